//! Per-skill Bayesian Knowledge Tracing.
//!
//! Each skill is a two-state hidden Markov model (unlearned/learned) with a
//! prior `l0`, a learning transition `t`, a guess rate `g` and a slip rate
//! `s`. Parameters are fitted by exhaustive grid search on the Bernoulli
//! log-likelihood of the per-step correctness predictions.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, IdIndex};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BktParams {
    pub l0: f64,
    pub t: f64,
    pub g: f64,
    pub s: f64,
}

impl BktParams {
    pub fn new(l0: f64, t: f64, g: f64, s: f64) -> Result<Self> {
        for (name, v) in [("l0", l0), ("t", t), ("g", g), ("s", s)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {v} is not a probability"
                )));
            }
        }
        Ok(Self { l0, t, g, s })
    }

    /// Used for skills that never occur in the training students.
    pub const FALLBACK: BktParams = BktParams {
        l0: 0.5,
        t: 0.1,
        g: 0.2,
        s: 0.1,
    };

    /// P(L_t | outcome): Bayesian update of the mastery belief after
    /// observing one response.
    ///
    /// A zero denominator (e.g. `prior = 0`, `g = 0` and a correct answer)
    /// leaves the prior unchanged and logs a warning.
    pub fn posterior_update(&self, prior: f64, correct: bool) -> f64 {
        let (num, den) = if correct {
            let known = prior * (1.0 - self.s);
            (known, known + (1.0 - prior) * self.g)
        } else {
            let known = prior * self.s;
            (known, known + (1.0 - prior) * (1.0 - self.g))
        };
        if den == 0.0 {
            log::warn!("degenerate BKT posterior (prior {prior}, params {self:?}); keeping prior");
            return prior;
        }
        (num / den).clamp(0.0, 1.0)
    }

    /// P(L_t) = posterior + (1 - posterior) * t.
    pub fn learn_step(&self, posterior: f64) -> f64 {
        posterior + (1.0 - posterior) * self.t
    }

    /// P(correct) given mastery belief `prior`.
    pub fn predict_correct(&self, prior: f64) -> f64 {
        prior * (1.0 - self.s) + (1.0 - prior) * self.g
    }

    /// Belief entering the next attempt after observing `correct`.
    pub fn advance(&self, prior: f64, correct: bool) -> f64 {
        self.learn_step(self.posterior_update(prior, correct))
    }

    /// Threads the belief through a response sequence. `masteries[i]` is the
    /// belief entering attempt `i`, `predicted[i]` the corresponding
    /// correctness probability.
    pub fn run_sequence(&self, outcomes: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
        if outcomes.is_empty() {
            return Err(Error::InvalidArgument("empty outcome sequence".into()));
        }
        let mut masteries = Vec::with_capacity(outcomes.len());
        let mut predicted = Vec::with_capacity(outcomes.len());
        let mut belief = self.l0;
        for &correct in outcomes {
            masteries.push(belief);
            predicted.push(self.predict_correct(belief));
            belief = self.advance(belief, correct);
        }
        Ok((masteries, predicted))
    }

    /// Total Bernoulli log-likelihood of the outcomes under the per-step
    /// predictions.
    pub fn log_likelihood(&self, outcomes: &[bool]) -> f64 {
        let mut belief = self.l0;
        let mut ll = 0.0;
        for &correct in outcomes {
            let p = self
                .predict_correct(belief)
                .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            ll += if correct { p.ln() } else { (1.0 - p).ln() };
            belief = self.advance(belief, correct);
        }
        ll
    }
}

/// Mastery beliefs for one student on one skill.
#[derive(Debug, Clone, PartialEq)]
pub struct MasteryTrace {
    pub student_id: String,
    pub skill: usize,
    pub masteries: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkillModel {
    pub skill: usize,
    pub params: BktParams,
    pub train_log_likelihood: f64,
}

/// Search grid over the four parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub step: f64,
    pub min: f64,
    pub max: f64,
    pub g_max: f64,
    pub s_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            step: 0.05,
            min: 0.05,
            max: 0.95,
            g_max: 0.30,
            s_max: 0.30,
        }
    }
}

impl GridSpec {
    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            min: step,
            max: 1.0 - step,
            ..Self::default()
        }
    }

    fn axis(&self, cap: f64) -> Vec<f64> {
        let hi = self.max.min(cap);
        let mut values = Vec::new();
        let mut k = 0usize;
        loop {
            // Rounded so that 0.15 is 0.15 and not 0.15000000000000002.
            let v = ((self.min + k as f64 * self.step) * 1e9).round() / 1e9;
            if v > hi + 1e-12 {
                break;
            }
            values.push(v);
            k += 1;
        }
        values
    }

    pub fn l0_values(&self) -> Vec<f64> {
        self.axis(1.0)
    }

    pub fn t_values(&self) -> Vec<f64> {
        self.axis(1.0)
    }

    pub fn g_values(&self) -> Vec<f64> {
        self.axis(self.g_max)
    }

    pub fn s_values(&self) -> Vec<f64> {
        self.axis(self.s_max)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.step > 0.0
            && (0.0..=1.0).contains(&self.min)
            && (0.0..=1.0).contains(&self.max)
            && self.min <= self.max
            && self.g_max >= self.min
            && self.s_max >= self.min;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid BKT grid {self:?}")))
        }
    }

    /// All grid points in tie-break order: g, then s, then t, then l0.
    pub fn points(&self) -> Vec<BktParams> {
        let (l0s, ts) = (self.l0_values(), self.t_values());
        let mut out = Vec::new();
        for &g in &self.g_values() {
            for &s in &self.s_values() {
                for &t in &ts {
                    for &l0 in &l0s {
                        out.push(BktParams { l0, t, g, s });
                    }
                }
            }
        }
        out
    }
}

// Factors are at least PROB_FLOOR, so 30 of them stay well above f64::MIN_POSITIVE.
const PRODUCT_CHUNK: usize = 30;

/// Log-likelihood with one `ln` per chunk of steps instead of per step.
fn fast_log_likelihood(params: &BktParams, sequences: &[Vec<bool>]) -> f64 {
    let mut ll = 0.0;
    for seq in sequences {
        let mut belief = params.l0;
        let mut product = 1.0;
        for (i, &correct) in seq.iter().enumerate() {
            let p = (belief * (1.0 - params.s) + (1.0 - belief) * params.g)
                .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            product *= if correct { p } else { 1.0 - p };
            belief = params.advance(belief, correct);
            if (i + 1) % PRODUCT_CHUNK == 0 {
                ll += product.ln();
                product = 1.0;
            }
        }
        ll += product.ln();
    }
    ll
}

/// Brute-force fit of one skill: the grid point with the highest total
/// log-likelihood over all sequences.
pub fn fit_skill(skill: usize, sequences: &[Vec<bool>], grid: &GridSpec) -> Result<SkillModel> {
    grid.validate()?;
    let sequences: Vec<Vec<bool>> = sequences
        .iter()
        .filter(|s| !s.is_empty())
        .cloned()
        .collect();
    if sequences.is_empty() {
        return Err(Error::EmptySkill(skill));
    }
    let points = grid.points();
    let scores: Vec<f64> = points
        .par_iter()
        .map(|p| fast_log_likelihood(p, &sequences))
        .collect();
    let mut best = 0;
    for (i, &score) in scores.iter().enumerate() {
        if score > scores[best] {
            best = i;
        }
    }
    let params = points[best];
    let train_log_likelihood = sequences.iter().map(|s| params.log_likelihood(s)).sum();
    Ok(SkillModel {
        skill,
        params,
        train_log_likelihood,
    })
}

/// Per-skill outcome sequences of every student, indexed by skill.
pub fn skill_sequences(data: &Dataset) -> Vec<Vec<Vec<bool>>> {
    let mut out = vec![Vec::new(); data.n_skills()];
    for student in &data.students {
        let mut per_skill: Vec<Vec<bool>> = vec![Vec::new(); data.n_skills()];
        for r in &student.records {
            per_skill[r.skill].push(r.correct);
        }
        for (skill, seq) in per_skill.into_iter().enumerate() {
            if !seq.is_empty() {
                out[skill].push(seq);
            }
        }
    }
    out
}

/// Fitted models for every skill of a dataset's index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// One entry per skill index.
    pub models: Vec<SkillModel>,
    /// Skills without training data; their models carry [`BktParams::FALLBACK`].
    pub fallback: Vec<usize>,
}

impl FitReport {
    pub fn params(&self, skill: usize) -> BktParams {
        self.models
            .get(skill)
            .map(|m| m.params)
            .unwrap_or(BktParams::FALLBACK)
    }
}

/// Fits every skill independently (in parallel across skills).
pub fn fit_all(data: &Dataset, grid: &GridSpec) -> Result<FitReport> {
    grid.validate()?;
    let sequences = skill_sequences(data);
    let fitted: Vec<Option<SkillModel>> = sequences
        .par_iter()
        .enumerate()
        .map(|(skill, seqs)| match fit_skill(skill, seqs, grid) {
            Ok(m) => Ok(Some(m)),
            Err(Error::EmptySkill(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let mut fallback = Vec::new();
    let models = fitted
        .into_iter()
        .enumerate()
        .map(|(skill, m)| {
            m.unwrap_or_else(|| {
                fallback.push(skill);
                SkillModel {
                    skill,
                    params: BktParams::FALLBACK,
                    train_log_likelihood: 0.0,
                }
            })
        })
        .collect();
    if !fallback.is_empty() {
        log::info!(
            "{} skills without training data use fallback parameters",
            fallback.len()
        );
    }
    Ok(FitReport { models, fallback })
}

/// P(L_{t-1}) of each record's skill, advanced only on attempts of that
/// skill. Indexed as `[student][record]` following `data.students`.
pub fn mastery_features(data: &Dataset, models: &FitReport) -> Vec<Vec<f64>> {
    data.students
        .iter()
        .map(|student| {
            let mut belief: Vec<Option<f64>> = vec![None; data.n_skills()];
            student
                .records
                .iter()
                .map(|r| {
                    let params = models.params(r.skill);
                    let current = belief[r.skill].unwrap_or(params.l0);
                    belief[r.skill] = Some(params.advance(current, r.correct));
                    current
                })
                .collect()
        })
        .collect()
}

/// Mastery traces per (student, skill), in first-appearance order of skills.
pub fn mastery_traces(data: &Dataset, models: &FitReport) -> Vec<MasteryTrace> {
    let features = mastery_features(data, models);
    let mut out = Vec::new();
    for (student, feats) in data.students.iter().zip(&features) {
        let mut traces: Vec<MasteryTrace> = Vec::new();
        for (r, &m) in student.records.iter().zip(feats) {
            match traces.iter_mut().find(|t| t.skill == r.skill) {
                Some(t) => t.masteries.push(m),
                None => traces.push(MasteryTrace {
                    student_id: student.id.clone(),
                    skill: r.skill,
                    masteries: vec![m],
                }),
            }
        }
        out.extend(traces);
    }
    out
}

const MODEL_COLUMNS: [&str; 6] = ["skill_id", "l0", "t", "g", "s", "log_likelihood"];

/// Writes `(skill_id, l0, t, g, s, log_likelihood)` rows with 17 significant
/// digits so that reading them back is bit-exact.
pub fn write_models<W: Write>(report: &FitReport, skills: &IdIndex, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MODEL_COLUMNS)?;
    for m in &report.models {
        let p = m.params;
        w.write_record([
            skills.id(m.skill).to_string(),
            format!("{:.16e}", p.l0),
            format!("{:.16e}", p.t),
            format!("{:.16e}", p.g),
            format!("{:.16e}", p.s),
            format!("{:.16e}", m.train_log_likelihood),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a model table, resolving skill identifiers through `skills`.
/// Skills missing from the table get fallback parameters.
pub fn read_models<R: Read>(reader: R, skills: &IdIndex) -> Result<FitReport> {
    let mut r = csv::Reader::from_reader(reader);
    let mut found: Vec<Option<SkillModel>> = vec![None; skills.len()];
    for row in r.records() {
        let row = row?;
        let bad = |reason: String| Error::Malformed {
            path: "<bkt models>".into(),
            reason,
        };
        if row.len() != MODEL_COLUMNS.len() {
            return Err(bad(format!(
                "expected {} columns, got {}",
                MODEL_COLUMNS.len(),
                row.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse()
                .map_err(|_| bad(format!("bad number `{}`", &row[i])))
        };
        let Some(skill) = skills.get(&row[0]) else {
            log::warn!("skill `{}` not in dataset; ignored", &row[0]);
            continue;
        };
        found[skill] = Some(SkillModel {
            skill,
            params: BktParams::new(num(1)?, num(2)?, num(3)?, num(4)?)?,
            train_log_likelihood: num(5)?,
        });
    }
    let mut fallback = Vec::new();
    let models = found
        .into_iter()
        .enumerate()
        .map(|(skill, m)| {
            m.unwrap_or_else(|| {
                fallback.push(skill);
                SkillModel {
                    skill,
                    params: BktParams::FALLBACK,
                    train_log_likelihood: 0.0,
                }
            })
        })
        .collect();
    Ok(FitReport { models, fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: BktParams = BktParams {
        l0: 0.5,
        t: 0.1,
        g: 0.2,
        s: 0.1,
    };

    #[test]
    fn noiseless_certainty() {
        let p = BktParams::new(0.5, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.posterior_update(1.0, true), 1.0);
    }

    #[test]
    fn worked_posterior_values() {
        assert!((P.posterior_update(0.5, true) - 0.45 / 0.55).abs() < 1e-12);
        assert!((P.posterior_update(0.5, false) - 0.05 / 0.45).abs() < 1e-12);
    }

    #[test]
    fn degenerate_denominator_keeps_prior() {
        let p = BktParams::new(0.0, 0.1, 0.0, 0.1).unwrap();
        assert_eq!(p.posterior_update(0.0, true), 0.0);
    }

    #[test]
    fn learn_step_values() {
        assert_eq!(P.learn_step(1.0), 1.0);
        assert!(
            (P.learn_step(0.45 / 0.55) - (0.45 / 0.55 + (1.0 - 0.45 / 0.55) * 0.1)).abs() < 1e-15
        );
        let frozen = BktParams::new(0.0, 0.0, 0.2, 0.1).unwrap();
        assert_eq!(frozen.learn_step(0.0), 0.0);
    }

    #[test]
    fn predict_values() {
        let sure = BktParams::new(0.5, 0.1, 0.2, 0.0).unwrap();
        assert_eq!(sure.predict_correct(1.0), 1.0);
        assert!((P.predict_correct(0.0) - 0.2).abs() < 1e-15);
        assert!((P.predict_correct(0.5) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn run_sequence_chain() {
        let (m, p) = P.run_sequence(&[true]).unwrap();
        assert_eq!(m, vec![0.5]);
        assert!((p[0] - 0.55).abs() < 1e-15);
        let (m, _) = P.run_sequence(&[true, true]).unwrap();
        assert!((m[1] - 0.8363636363636363).abs() < 1e-12);
        assert!(P.run_sequence(&[]).is_err());
    }

    #[test]
    fn grid_axes() {
        let g = GridSpec::default();
        assert_eq!(g.l0_values().len(), 19);
        assert_eq!(g.g_values(), vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3]);
        assert_eq!(g.points().len(), 19 * 19 * 6 * 6);
    }

    #[test]
    fn all_correct_pushes_l0_to_max() {
        let seqs = vec![vec![true; 10]; 5];
        let m = fit_skill(0, &seqs, &GridSpec::default()).unwrap();
        assert_eq!(m.params.l0, 0.95);
        assert_eq!(m.params.s, 0.05);
        assert!(m.train_log_likelihood <= 0.0);
    }

    #[test]
    fn all_wrong_pushes_l0_and_g_to_min() {
        let m = fit_skill(0, &[vec![false; 12]], &GridSpec::default()).unwrap();
        assert_eq!(m.params.l0, 0.05);
        assert_eq!(m.params.g, 0.05);
    }

    #[test]
    fn empty_skill_is_error() {
        assert!(matches!(
            fit_skill(3, &[vec![]], &GridSpec::default()),
            Err(Error::EmptySkill(3))
        ));
    }

    #[test]
    fn chunked_likelihood_matches_direct() {
        let seq: Vec<bool> = (0..97).map(|i| i % 3 != 0).collect();
        let direct = P.log_likelihood(&seq);
        let fast = fast_log_likelihood(&P, &[seq]);
        assert!((direct - fast).abs() < 1e-10 * direct.abs());
    }

    proptest! {
        #[test]
        fn probabilities_stay_in_unit_interval(
            l0 in 0.0..=1.0f64, t in 0.0..=1.0f64, g in 0.0..=1.0f64, s in 0.0..=1.0f64,
            prior in 0.0..=1.0f64, correct: bool,
        ) {
            let p = BktParams::new(l0, t, g, s).unwrap();
            let post = p.posterior_update(prior, correct);
            prop_assert!((0.0..=1.0).contains(&post));
            let learned = p.learn_step(post);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&learned));
            prop_assert!(learned >= post);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&p.predict_correct(prior)));
        }

        #[test]
        fn update_direction_when_informative(
            l0 in 0.0..=1.0f64, t in 0.0..=1.0f64, g in 0.0..0.5f64, s in 0.0..0.5f64, prior in 0.0..=1.0f64,
        ) {
            let p = BktParams::new(l0, t, g, s).unwrap();
            prop_assert!(p.posterior_update(prior, true) >= prior - 1e-12);
            prop_assert!(p.posterior_update(prior, false) <= prior + 1e-12);
        }

        #[test]
        fn learn_step_monotone(t in 0.0..=1.0f64, a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let p = BktParams::new(0.5, t, 0.2, 0.1).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.learn_step(lo) <= p.learn_step(hi) + 1e-15);
        }

        #[test]
        fn all_correct_trace_non_decreasing(
            l0 in 0.0..=1.0f64, t in 0.0..=1.0f64, g in 0.0..0.5f64, s in 0.0..0.5f64, n in 1usize..40,
        ) {
            let p = BktParams::new(l0, t, g, s).unwrap();
            let (m, _) = p.run_sequence(&vec![true; n]).unwrap();
            for w in m.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12);
            }
        }
    }
}
