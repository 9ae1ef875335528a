//! Per-step feature assembly and encoding for the recurrent predictor.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::difficulty::N_BINS;
use crate::error::{Error, Result};
use crate::predictor::EncodedSequence;
use crate::profile::DEFAULT_CLUSTERS;

/// Ability one-hot width with the default cluster count (clusters + initial).
pub const DEFAULT_ABILITY_SLOTS: usize = DEFAULT_CLUSTERS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStep {
    pub mastery: f64,
    /// 1-based profile label.
    pub ability: usize,
    pub difficulty_bin: usize,
    pub skill: usize,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub student_id: String,
    pub steps: Vec<FeatureStep>,
}

/// Which blocks enter the encoding. Mastery is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    pub ability: bool,
    pub difficulty: bool,
    pub skill: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        Self::variant(4)
    }
}

impl FeatureMask {
    /// Ablation variants: 1 mastery, 2 mastery + ability, 3 mastery +
    /// difficulty, 4 all three. Skill one-hot is on in all of them.
    pub fn variant(n: u8) -> Self {
        let (ability, difficulty) = match n {
            1 => (false, false),
            2 => (true, false),
            3 => (false, true),
            4 => (true, true),
            _ => panic!("ablation variant must be 1..=4, got {n}"),
        };
        Self {
            ability,
            difficulty,
            skill: true,
        }
    }
}

/// Layout: `[mastery | ability one-hot | difficulty one-hot | skill one-hot]`
/// with masked-out blocks omitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub n_skills: usize,
    pub ability_slots: usize,
    pub mask: FeatureMask,
}

impl Encoder {
    pub fn new(n_skills: usize, ability_slots: usize, mask: FeatureMask) -> Self {
        Self {
            n_skills,
            ability_slots,
            mask,
        }
    }

    pub fn dim(&self) -> usize {
        1 + if self.mask.ability {
            self.ability_slots
        } else {
            0
        } + if self.mask.difficulty { N_BINS } else { 0 }
            + if self.mask.skill { self.n_skills } else { 0 }
    }

    pub fn encode_into(&self, step: &FeatureStep, out: &mut Vec<f64>) -> Result<()> {
        if !(0.0..=1.0).contains(&step.mastery) {
            return Err(Error::InvalidArgument(format!(
                "mastery {} outside [0, 1]",
                step.mastery
            )));
        }
        let check = |what: &str, v: usize, lo: usize, n: usize| {
            if v < lo || v >= lo + n {
                Err(Error::InvalidArgument(format!(
                    "{what} {v} outside {lo}..{}",
                    lo + n
                )))
            } else {
                Ok(v - lo)
            }
        };
        let ability = check("ability label", step.ability, 1, self.ability_slots)?;
        let bin = check("difficulty bin", step.difficulty_bin, 0, N_BINS)?;
        let skill = check("skill", step.skill, 0, self.n_skills)?;

        let start = out.len();
        out.resize(start + self.dim(), 0.0);
        let row = &mut out[start..];
        row[0] = step.mastery;
        let mut offset = 1;
        if self.mask.ability {
            row[offset + ability] = 1.0;
            offset += self.ability_slots;
        }
        if self.mask.difficulty {
            row[offset + bin] = 1.0;
            offset += N_BINS;
        }
        if self.mask.skill {
            row[offset + skill] = 1.0;
        }
        Ok(())
    }

    pub fn encode(&self, step: &FeatureStep) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dim());
        self.encode_into(step, &mut out)?;
        Ok(out)
    }

    pub fn encode_sequence(&self, seq: &FeatureSequence) -> Result<EncodedSequence> {
        let mut inputs = Vec::with_capacity(seq.steps.len() * self.dim());
        for step in &seq.steps {
            self.encode_into(step, &mut inputs)?;
        }
        Ok(EncodedSequence {
            input_dim: self.dim(),
            inputs,
            skills: seq.steps.iter().map(|s| s.skill).collect(),
            targets: seq.steps.iter().map(|s| s.target).collect(),
        })
    }

    pub fn encode_all(&self, seqs: &[FeatureSequence]) -> Result<Vec<EncodedSequence>> {
        seqs.iter().map(|s| self.encode_sequence(s)).collect()
    }
}

/// Full encoding with the default eight ability slots: length 19 + n_skills.
pub fn encode_step(step: &FeatureStep, n_skills: usize) -> Result<Vec<f64>> {
    Encoder::new(n_skills, DEFAULT_ABILITY_SLOTS, FeatureMask::variant(4)).encode(step)
}

/// Zips the per-record feature sources (each indexed `[student][record]`
/// following `data.students`) into one sequence per student.
pub fn build_sequences(
    data: &Dataset,
    masteries: &[Vec<f64>],
    abilities: &[Vec<usize>],
    difficulties: &[Vec<usize>],
) -> Result<Vec<FeatureSequence>> {
    data.students
        .iter()
        .enumerate()
        .map(|(i, student)| {
            let steps = student
                .records
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    let missing = |what| Error::MissingFeature {
                        student: student.id.clone(),
                        order: r.order,
                        what,
                    };
                    Ok(FeatureStep {
                        mastery: *masteries
                            .get(i)
                            .and_then(|m| m.get(j))
                            .ok_or_else(|| missing("mastery"))?,
                        ability: *abilities
                            .get(i)
                            .and_then(|m| m.get(j))
                            .ok_or_else(|| missing("ability"))?,
                        difficulty_bin: *difficulties
                            .get(i)
                            .and_then(|m| m.get(j))
                            .ok_or_else(|| missing("difficulty"))?,
                        skill: r.skill,
                        target: r.correct,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FeatureSequence {
                student_id: student.id.clone(),
                steps,
            })
        })
        .collect()
}

/// Debug dump: each step as a little-endian `u32` length followed by that
/// many `f64` values.
pub fn write_encoded<W: Write>(seqs: &[EncodedSequence], mut writer: W) -> Result<()> {
    for seq in seqs {
        for row in seq.inputs.chunks(seq.input_dim.max(1)) {
            writer.write_all(&(row.len() as u32).to_le_bytes())?;
            for v in row {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(skill: usize) -> FeatureStep {
        FeatureStep {
            mastery: 0.5,
            ability: 1,
            difficulty_bin: 5,
            skill,
            target: true,
        }
    }

    #[test]
    fn full_encoding_layout() {
        let v = encode_step(&step(0), 3).unwrap();
        assert_eq!(v.len(), 22);
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 3);
        assert_eq!(v[0], 0.5);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[1 + 8 + 5], 1.0);
        assert_eq!(v[19], 1.0);
    }

    #[test]
    fn skills_differ_only_in_skill_block() {
        let a = encode_step(&step(0), 3).unwrap();
        let b = encode_step(&step(2), 3).unwrap();
        let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diff, vec![19, 21]);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut s = step(0);
        s.difficulty_bin = 10;
        assert!(encode_step(&s, 3).is_err());
        let mut s = step(0);
        s.ability = 0;
        assert!(encode_step(&s, 3).is_err());
        assert!(encode_step(&step(3), 3).is_err());
    }

    #[test]
    fn variant_dims() {
        let dims: Vec<usize> = (1..=4)
            .map(|v| Encoder::new(3, 8, FeatureMask::variant(v)).dim())
            .collect();
        assert_eq!(dims, vec![4, 12, 14, 22]);
        let v1 = Encoder::new(3, 8, FeatureMask::variant(1))
            .encode(&step(1))
            .unwrap();
        assert_eq!(v1, vec![0.5, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn dump_is_length_prefixed() {
        let enc = Encoder::new(2, 8, FeatureMask::variant(1));
        let seq = enc
            .encode_sequence(&FeatureSequence {
                student_id: "a".into(),
                steps: vec![step(0), step(1)],
            })
            .unwrap();
        let mut buf = Vec::new();
        write_encoded(&[seq], &mut buf).unwrap();
        assert_eq!(buf.len(), 2 * (4 + 3 * 8));
        assert_eq!(&buf[..4], &3u32.to_le_bytes());
    }
}
