//! Problem difficulty bins from first-attempt success rates.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, IdIndex};
use crate::error::Result;

pub const DEFAULT_BIN: usize = 5;
pub const MIN_SUPPORT: usize = 4;
pub const N_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyTable {
    /// Problem index to bin, only for problems with enough support.
    pub levels: BTreeMap<usize, usize>,
    /// Problem index to number of attempting students.
    pub support: BTreeMap<usize, usize>,
    pub default_bin: usize,
}

impl Default for DifficultyTable {
    fn default() -> Self {
        Self {
            levels: BTreeMap::new(),
            support: BTreeMap::new(),
            default_bin: DEFAULT_BIN,
        }
    }
}

/// Success-rate decile, `min(floor(10 * correct / attempts), 9)`, computed in
/// integer arithmetic so exact deciles are not lost to rounding.
pub fn success_bin(correct: usize, attempts: usize) -> usize {
    debug_assert!(attempts > 0 && correct <= attempts);
    ((10 * correct) / attempts).min(N_BINS - 1)
}

impl DifficultyTable {
    /// Bins every problem attempted by at least `min_support` students of
    /// `train`. Records are expected to be first attempts (see
    /// [`crate::dataset::clean`]).
    pub fn compute(train: &Dataset, min_support: usize) -> Self {
        let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for student in &train.students {
            for r in &student.records {
                if let Some(p) = r.problem {
                    let e = tally.entry(p).or_default();
                    e.0 += usize::from(r.correct);
                    e.1 += 1;
                }
            }
        }
        let mut levels = BTreeMap::new();
        let mut support = BTreeMap::new();
        for (p, (correct, attempts)) in tally {
            support.insert(p, attempts);
            if attempts >= min_support {
                levels.insert(p, success_bin(correct, attempts));
            }
        }
        Self {
            levels,
            support,
            default_bin: DEFAULT_BIN,
        }
    }

    /// Bin of a problem; unknown, unsupported or absent problems map to the
    /// default bin.
    pub fn lookup(&self, problem: Option<usize>) -> usize {
        problem
            .and_then(|p| self.levels.get(&p).copied())
            .unwrap_or(self.default_bin)
    }

    /// Per-record bins, indexed as `[student][record]`.
    pub fn bins(&self, data: &Dataset) -> Vec<Vec<usize>> {
        data.students
            .iter()
            .map(|s| s.records.iter().map(|r| self.lookup(r.problem)).collect())
            .collect()
    }

    /// `(problem_id, bin, support)` rows; unsupported problems are written
    /// with the default bin.
    pub fn write<W: Write>(&self, problems: &IdIndex, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["problem_id", "bin", "support"])?;
        for (&p, &n) in &self.support {
            w.write_record([
                problems.id(p).to_string(),
                self.lookup(Some(p)).to_string(),
                n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_interactions, ColumnMap};

    fn dataset(rows: &[(&str, &str, bool)]) -> Dataset {
        let mut text = String::from("student_id,problem_id,skill_id,correct,order\n");
        for (s, p, c) in rows {
            text.push_str(&format!("{s},{p},k,{},1\n", u8::from(*c)));
        }
        load_interactions(text.as_bytes(), &ColumnMap::canonical())
            .unwrap()
            .0
    }

    #[test]
    fn low_support_defaults_to_five() {
        let d = dataset(&[("a", "p", true), ("b", "p", true), ("c", "p", true)]);
        let t = DifficultyTable::compute(&d, MIN_SUPPORT);
        assert!(t.levels.is_empty());
        assert_eq!(t.lookup(d.problem_index.get("p")), 5);
        assert_eq!(t.support[&0], 3);
    }

    #[test]
    fn seven_of_ten() {
        let rows: Vec<(String, bool)> = (0..10).map(|i| (format!("s{i}"), i < 7)).collect();
        let rows: Vec<(&str, &str, bool)> =
            rows.iter().map(|(s, c)| (s.as_str(), "p", *c)).collect();
        let d = dataset(&rows);
        let t = DifficultyTable::compute(&d, MIN_SUPPORT);
        assert_eq!(t.lookup(Some(0)), 7);
    }

    #[test]
    fn all_correct_clamps_to_nine() {
        let d = dataset(&[
            ("a", "p", true),
            ("b", "p", true),
            ("c", "p", true),
            ("d", "p", true),
        ]);
        assert_eq!(DifficultyTable::compute(&d, MIN_SUPPORT).lookup(Some(0)), 9);
    }

    #[test]
    fn unseen_and_absent() {
        assert_eq!(DifficultyTable::default().lookup(Some(1)), 5);
        let t = DifficultyTable::compute(&Dataset::default(), MIN_SUPPORT);
        assert_eq!(t.lookup(Some(42)), 5);
        assert_eq!(t.lookup(None), 5);
    }

    #[test]
    fn bins_monotone_in_success() {
        for n in 1..40 {
            for c in 1..=n {
                assert!(success_bin(c, n) >= success_bin(c - 1, n));
                assert!(success_bin(c, n) < N_BINS);
            }
        }
    }
}
