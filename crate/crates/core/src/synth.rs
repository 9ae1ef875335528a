//! Synthetic interaction data drawn from the BKT generative process.
//!
//! Each student holds a hidden learned/unlearned state per skill that starts
//! learned with probability `l0` and flips to learned with probability `t`
//! after every attempt. A learned student answers correctly with probability
//! `1 - s`, an unlearned one with probability `g`. Optionally the answer
//! probability is shifted on the logit scale by the problem's injected
//! difficulty bin and by a per-student ability offset shared across skills.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bkt::BktParams;
use crate::dataset::{Dataset, IdIndex, InteractionRecord, StudentLog};
use crate::difficulty::N_BINS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub students: usize,
    pub skills: usize,
    pub attempts: usize,
    pub problems_per_skill: usize,
    pub params: BktParams,
    /// Logit shift between the easiest and the middle bin; 0 disables.
    pub difficulty_strength: f64,
    /// Standard deviation of the per-student logit offset; 0 disables.
    pub ability_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            students: 500,
            skills: 5,
            attempts: 50,
            problems_per_skill: 50,
            params: BktParams {
                l0: 0.3,
                t: 0.2,
                g: 0.15,
                s: 0.1,
            },
            difficulty_strength: 0.0,
            ability_spread: 0.0,
            seed: 42,
        }
    }
}

/// Generated data with the values it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// Injected bin per problem index (high bin = easy, matching
    /// [`crate::difficulty`]'s orientation).
    pub problem_bins: Vec<usize>,
    pub student_ability: Vec<f64>,
}

fn shift(p: f64, logit: f64) -> f64 {
    if logit == 0.0 || p <= 0.0 || p >= 1.0 {
        return p;
    }
    let z = (p / (1.0 - p)).ln() + logit;
    1.0 / (1.0 + (-z).exp())
}

/// Logit offset of a difficulty bin: `strength * (bin - 4.5) / 4.5`.
pub fn bin_offset(bin: usize, strength: f64) -> f64 {
    strength * (bin as f64 - 4.5) / 4.5
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    let p = config.params;
    BktParams::new(p.l0, p.t, p.g, p.s)?;
    if config.skills == 0 || config.problems_per_skill == 0 {
        return Err(Error::InvalidArgument(
            "need at least one skill and one problem per skill".into(),
        ));
    }
    if !(config.ability_spread >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ability spread {}",
            config.ability_spread
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let skill_ids: Vec<String> = (0..config.skills).map(|k| format!("k{k:04}")).collect();
    let problem_ids: Vec<String> = (0..config.skills)
        .flat_map(|k| (0..config.problems_per_skill).map(move |j| format!("k{k:04}_p{j:05}")))
        .collect();
    // Identifier formats sort in generation order, so indices line up.
    let skill_index = IdIndex::from_ids(skill_ids);
    let problem_index = IdIndex::from_ids(problem_ids);
    let problem_bins: Vec<usize> = (0..problem_index.len())
        .map(|_| rng.gen_range(0..N_BINS))
        .collect();
    let ability = Normal::new(0.0, config.ability_spread)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut students = Vec::with_capacity(config.students);
    let mut student_ability = Vec::with_capacity(config.students);
    for i in 0..config.students {
        let offset = if config.ability_spread > 0.0 {
            ability.sample(&mut rng)
        } else {
            0.0
        };
        student_ability.push(offset);
        let mut known: Vec<bool> = (0..config.skills).map(|_| rng.gen_bool(p.l0)).collect();
        let mut decks: Vec<Vec<usize>> = (0..config.skills)
            .map(|k| {
                let mut d: Vec<usize> = (0..config.problems_per_skill)
                    .map(|j| k * config.problems_per_skill + j)
                    .collect();
                d.shuffle(&mut rng);
                d
            })
            .collect();
        let mut records = Vec::with_capacity(config.attempts);
        for n in 0..config.attempts {
            let skill = rng.gen_range(0..config.skills);
            let problem = decks[skill].pop().unwrap_or_else(|| {
                skill * config.problems_per_skill + rng.gen_range(0..config.problems_per_skill)
            });
            let base = if known[skill] { 1.0 - p.s } else { p.g };
            let logit = bin_offset(problem_bins[problem], config.difficulty_strength) + offset;
            let correct = rng.gen_bool(shift(base, logit));
            if !known[skill] && rng.gen_bool(p.t) {
                known[skill] = true;
            }
            records.push(InteractionRecord {
                problem: Some(problem),
                skill,
                correct,
                order: n as i64 + 1,
            });
        }
        students.push(StudentLog {
            id: format!("s{i:06}"),
            records,
        });
    }
    Ok(SynthOutput {
        dataset: Dataset {
            students,
            skill_index,
            problem_index,
        },
        problem_bins,
        student_ability,
    })
}

/// Ground truth as `kind,id,l0,t,g,s,value` rows: one `skill` row per skill
/// and one `problem` row per problem carrying its injected bin in `value`.
pub fn write_truth<W: Write>(config: &SynthConfig, out: &SynthOutput, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "id", "l0", "t", "g", "s", "value"])?;
    let p = config.params;
    for skill in out.dataset.skill_index.ids() {
        w.write_record([
            "skill",
            skill,
            &p.l0.to_string(),
            &p.t.to_string(),
            &p.g.to_string(),
            &p.s.to_string(),
            "",
        ])?;
    }
    for (j, bin) in out.problem_bins.iter().enumerate() {
        w.write_record([
            "problem",
            out.dataset.problem_index.id(j),
            "",
            "",
            "",
            "",
            &bin.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_all_correct() {
        let cfg = SynthConfig {
            students: 20,
            attempts: 10,
            params: BktParams::new(1.0, 0.3, 0.0, 0.0).unwrap(),
            difficulty_strength: 2.0,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        assert_eq!(out.dataset.n_records(), 200);
        assert!(out
            .dataset
            .students
            .iter()
            .flat_map(|s| &s.records)
            .all(|r| r.correct));
    }

    #[test]
    fn deterministic_and_clean() {
        let cfg = SynthConfig {
            students: 30,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        assert_eq!(
            crate::dataset::clean(&a.dataset).n_records(),
            a.dataset.n_records()
        );
    }

    #[test]
    fn shift_behaviour() {
        assert_eq!(shift(0.3, 0.0), 0.3);
        assert_eq!(shift(1.0, -5.0), 1.0);
        assert!(shift(0.3, 1.0) > 0.3);
        assert!((bin_offset(9, 2.0) - 2.0).abs() < 1e-15);
    }
}
