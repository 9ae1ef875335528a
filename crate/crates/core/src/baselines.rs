//! Reference models: Bayesian IRT, Performance Factors Analysis, plain BKT
//! and the DKT input encoding.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bkt::{mastery_features, FitReport};
use crate::dataset::{Dataset, IdIndex, InteractionRecord};
use crate::error::{Error, Result};
use crate::predictor::EncodedSequence;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln sigmoid(x)` without overflow for large `|x|`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn bernoulli_ll(logit: f64, correct: bool) -> f64 {
    if correct {
        log_sigmoid(logit)
    } else {
        log_sigmoid(-logit)
    }
}

/// What a baseline treats as an "item".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemKind {
    Problem,
    /// Used when the dataset carries no problem identifiers.
    Skill,
}

impl ItemKind {
    pub fn for_dataset(data: &Dataset) -> Self {
        if data.has_problem_info() {
            ItemKind::Problem
        } else {
            ItemKind::Skill
        }
    }

    pub fn count(self, data: &Dataset) -> usize {
        match self {
            ItemKind::Problem => data.n_problems(),
            ItemKind::Skill => data.n_skills(),
        }
    }

    pub fn item(self, r: &InteractionRecord) -> Option<usize> {
        match self {
            ItemKind::Problem => r.problem,
            ItemKind::Skill => Some(r.skill),
        }
    }
}

// ---------------------------------------------------------------------------
// Bayesian IRT

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirtModel {
    pub item_kind: ItemKind,
    /// Proficiency of each training student.
    pub theta: BTreeMap<String, f64>,
    /// Difficulty per item index.
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BirtFitReport {
    /// Log posterior (up to a constant) after each sweep, starting with the
    /// initial all-zero state.
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

pub const BIRT_TOLERANCE: f64 = 1e-6;
pub const BIRT_MAX_SWEEPS: usize = 100;
const MAX_HALVINGS: usize = 20;

/// Maximises `f` along one coordinate from `x` with a damped Newton step.
/// Returns the new value (unchanged when no halving improves `f`).
fn newton_coordinate(x: f64, grad: f64, curvature: f64, f: impl Fn(f64) -> f64) -> Result<f64> {
    let base = f(x);
    let mut step = grad / curvature;
    if step == 0.0 {
        return Ok(x);
    }
    let mut finite_seen = false;
    for _ in 0..=MAX_HALVINGS {
        let candidate = x + step;
        let value = f(candidate);
        if value.is_finite() {
            finite_seen = true;
            if value >= base {
                return Ok(candidate);
            }
        }
        step *= 0.5;
    }
    if finite_seen {
        Ok(x)
    } else {
        Err(Error::Optimizer(
            "non-finite Newton update after 20 halvings".into(),
        ))
    }
}

/// MAP fit of `P(correct) = sigmoid(theta_student - beta_item)` with
/// independent standard normal priors.
///
/// Alternates one damped Newton step per student proficiency and per item
/// difficulty (each coordinate's Hessian is a scalar) until the largest
/// parameter change drops below 1e-6 or 100 sweeps have run. Every attempt
/// enters the likelihood as its own Bernoulli term.
pub fn fit_birt(train: &Dataset) -> Result<(BirtModel, BirtFitReport)> {
    if train.n_records() == 0 {
        return Err(Error::InvalidArgument(
            "BIRT needs at least one record".into(),
        ));
    }
    let kind = ItemKind::for_dataset(train);
    let n_items = kind.count(train);
    let mut by_student: Vec<Vec<(usize, bool)>> = Vec::with_capacity(train.students.len());
    let mut by_item: Vec<Vec<(usize, bool)>> = vec![Vec::new(); n_items];
    for (i, s) in train.students.iter().enumerate() {
        let mut rows = Vec::new();
        for r in &s.records {
            if let Some(j) = kind.item(r) {
                rows.push((j, r.correct));
                by_item[j].push((i, r.correct));
            }
        }
        by_student.push(rows);
    }

    let mut theta = vec![0.0; by_student.len()];
    let mut beta = vec![0.0; n_items];
    let objective = |theta: &[f64], beta: &[f64]| -> f64 {
        let ll: f64 = by_student
            .iter()
            .enumerate()
            .flat_map(|(i, rows)| rows.iter().map(move |&(j, r)| (i, j, r)))
            .map(|(i, j, r)| bernoulli_ll(theta[i] - beta[j], r))
            .sum();
        ll - 0.5 * theta.iter().map(|x| x * x).sum::<f64>()
            - 0.5 * beta.iter().map(|x| x * x).sum::<f64>()
    };

    let mut report = BirtFitReport {
        objective_trace: vec![objective(&theta, &beta)],
        sweeps: 0,
        converged: false,
    };
    while report.sweeps < BIRT_MAX_SWEEPS {
        report.sweeps += 1;
        let mut max_change: f64 = 0.0;
        for (i, rows) in by_student.iter().enumerate() {
            let (mut grad, mut info) = (-theta[i], 1.0);
            for &(j, r) in rows {
                let p = sigmoid(theta[i] - beta[j]);
                grad += f64::from(u8::from(r)) - p;
                info += p * (1.0 - p);
            }
            let local = |x: f64| {
                rows.iter()
                    .map(|&(j, r)| bernoulli_ll(x - beta[j], r))
                    .sum::<f64>()
                    - 0.5 * x * x
            };
            let next = newton_coordinate(theta[i], grad, info, local)?;
            max_change = max_change.max((next - theta[i]).abs());
            theta[i] = next;
        }
        for (j, rows) in by_item.iter().enumerate() {
            let (mut grad, mut info) = (-beta[j], 1.0);
            for &(i, r) in rows {
                let p = sigmoid(theta[i] - beta[j]);
                grad -= f64::from(u8::from(r)) - p;
                info += p * (1.0 - p);
            }
            let local = |x: f64| {
                rows.iter()
                    .map(|&(i, r)| bernoulli_ll(theta[i] - x, r))
                    .sum::<f64>()
                    - 0.5 * x * x
            };
            let next = newton_coordinate(beta[j], grad, info, local)?;
            max_change = max_change.max((next - beta[j]).abs());
            beta[j] = next;
        }
        report.objective_trace.push(objective(&theta, &beta));
        if max_change < BIRT_TOLERANCE {
            report.converged = true;
            break;
        }
    }
    let theta = train
        .students
        .iter()
        .map(|s| s.id.clone())
        .zip(theta)
        .collect();
    Ok((
        BirtModel {
            item_kind: kind,
            theta,
            beta,
        },
        report,
    ))
}

impl BirtModel {
    /// `sigmoid(theta - beta)`; unseen students and items sit at the prior
    /// mean 0.
    pub fn predict(&self, student: &str, item: Option<usize>) -> f64 {
        let theta = self.theta.get(student).copied().unwrap_or(0.0);
        let beta = item.and_then(|j| self.beta.get(j).copied()).unwrap_or(0.0);
        sigmoid(theta - beta)
    }

    /// Per-record predictions, indexed `[student][record]`.
    pub fn predict_dataset(&self, data: &Dataset) -> Vec<Vec<f64>> {
        data.students
            .iter()
            .map(|s| {
                s.records
                    .iter()
                    .map(|r| self.predict(&s.id, self.item_kind.item(r)))
                    .collect()
            })
            .collect()
    }

    pub fn write<W: Write>(&self, items: &IdIndex, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["kind", "id", "value"])?;
        for (s, v) in &self.theta {
            w.write_record(["theta", s.as_str(), &format!("{v:.16e}")])?;
        }
        for (j, v) in self.beta.iter().enumerate() {
            w.write_record(["beta", items.id(j), &format!("{v:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Performance Factors Analysis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfaModel {
    pub item_kind: ItemKind,
    /// Bias per item.
    pub beta: Vec<f64>,
    /// Weight of prior successes per skill.
    pub gamma: Vec<f64>,
    /// Weight of prior failures per skill.
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfaFitReport {
    /// Penalised mean log-likelihood before the first and after every
    /// accepted step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfaOptions {
    pub l2: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PfaOptions {
    fn default() -> Self {
        Self {
            l2: 0.01,
            tolerance: 1e-5,
            max_iterations: 500,
        }
    }
}

/// One PFA design row: item, skill and the student's prior success and
/// failure counts on that skill.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfaRow {
    pub item: Option<usize>,
    pub skill: usize,
    pub successes: f64,
    pub failures: f64,
    pub correct: bool,
}

/// Design rows with counts taken strictly before each attempt, indexed
/// `[student][record]`.
pub fn pfa_rows(data: &Dataset, kind: ItemKind) -> Vec<Vec<PfaRow>> {
    data.students
        .iter()
        .map(|s| {
            let mut succ = vec![0u32; data.n_skills()];
            let mut fail = vec![0u32; data.n_skills()];
            s.records
                .iter()
                .map(|r| {
                    let row = PfaRow {
                        item: kind.item(r),
                        skill: r.skill,
                        successes: f64::from(succ[r.skill]),
                        failures: f64::from(fail[r.skill]),
                        correct: r.correct,
                    };
                    if r.correct {
                        succ[r.skill] += 1;
                    } else {
                        fail[r.skill] += 1;
                    }
                    row
                })
                .collect()
        })
        .collect()
}

impl PfaModel {
    pub fn zeros(kind: ItemKind, n_items: usize, n_skills: usize) -> Self {
        Self {
            item_kind: kind,
            beta: vec![0.0; n_items],
            gamma: vec![0.0; n_skills],
            rho: vec![0.0; n_skills],
        }
    }

    /// Logit `beta_item + gamma_skill * successes + rho_skill * failures`;
    /// unseen items and skills contribute 0.
    pub fn logit(&self, row: &PfaRow) -> f64 {
        let beta = row
            .item
            .and_then(|j| self.beta.get(j).copied())
            .unwrap_or(0.0);
        let gamma = self.gamma.get(row.skill).copied().unwrap_or(0.0);
        let rho = self.rho.get(row.skill).copied().unwrap_or(0.0);
        beta + gamma * row.successes + rho * row.failures
    }

    pub fn predict(&self, row: &PfaRow) -> f64 {
        sigmoid(self.logit(row))
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Vec<Vec<f64>> {
        pfa_rows(data, self.item_kind)
            .iter()
            .map(|rows| rows.iter().map(|r| self.predict(r)).collect())
            .collect()
    }

    fn flat(&self) -> Vec<f64> {
        self.beta
            .iter()
            .chain(&self.gamma)
            .chain(&self.rho)
            .copied()
            .collect()
    }

    fn set_flat(&mut self, w: &[f64]) {
        let (nb, ns) = (self.beta.len(), self.gamma.len());
        self.beta.copy_from_slice(&w[..nb]);
        self.gamma.copy_from_slice(&w[nb..nb + ns]);
        self.rho.copy_from_slice(&w[nb + ns..]);
    }

    pub fn write<W: Write>(&self, items: &IdIndex, skills: &IdIndex, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["kind", "id", "value"])?;
        for (j, v) in self.beta.iter().enumerate() {
            w.write_record(["beta", items.id(j), &format!("{v:.16e}")])?;
        }
        for (k, v) in self.gamma.iter().enumerate() {
            w.write_record(["gamma", skills.id(k), &format!("{v:.16e}")])?;
        }
        for (k, v) in self.rho.iter().enumerate() {
            w.write_record(["rho", skills.id(k), &format!("{v:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Penalised mean log-likelihood, its gradient and the diagonal of the
/// negated Hessian, all over the flat `[beta | gamma | rho]` layout.
pub fn pfa_objective(model: &PfaModel, rows: &[PfaRow], l2: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (nb, ns) = (model.beta.len(), model.gamma.len());
    let dim = nb + 2 * ns;
    let mut grad = vec![0.0; dim];
    let mut curv = vec![0.0; dim];
    let mut ll = 0.0;
    let inv_n = 1.0 / rows.len().max(1) as f64;
    for row in rows {
        let z = model.logit(row);
        ll += bernoulli_ll(z, row.correct);
        let p = sigmoid(z);
        let resid = f64::from(u8::from(row.correct)) - p;
        let w = p * (1.0 - p);
        if let Some(j) = row.item {
            grad[j] += resid;
            curv[j] += w;
        }
        grad[nb + row.skill] += resid * row.successes;
        curv[nb + row.skill] += w * row.successes * row.successes;
        grad[nb + ns + row.skill] += resid * row.failures;
        curv[nb + ns + row.skill] += w * row.failures * row.failures;
    }
    let params = model.flat();
    let penalty: f64 = params.iter().map(|x| x * x).sum::<f64>();
    for ((g, c), x) in grad.iter_mut().zip(curv.iter_mut()).zip(&params) {
        *g = *g * inv_n - l2 * x;
        *c = *c * inv_n + l2;
    }
    (ll * inv_n - 0.5 * l2 * penalty, grad, curv)
}

/// Fits PFA by gradient ascent on the L2-penalised mean log-likelihood.
///
/// Each coordinate's gradient is scaled by the inverse of its diagonal
/// curvature (raw success/failure counts make unscaled steps badly
/// conditioned). The step length starts at twice the last accepted one,
/// capped at 1, and is halved until a sufficient increase is reached. Stops
/// when the gradient norm falls below the tolerance or after
/// `max_iterations`.
pub fn fit_pfa(train: &Dataset, options: &PfaOptions) -> Result<(PfaModel, PfaFitReport)> {
    let kind = ItemKind::for_dataset(train);
    let rows: Vec<PfaRow> = pfa_rows(train, kind).into_iter().flatten().collect();
    fit_pfa_rows(&rows, kind, kind.count(train), train.n_skills(), options)
}

/// [`fit_pfa`] on prepared design rows.
pub fn fit_pfa_rows(
    rows: &[PfaRow],
    kind: ItemKind,
    n_items: usize,
    n_skills: usize,
    options: &PfaOptions,
) -> Result<(PfaModel, PfaFitReport)> {
    let mut model = PfaModel::zeros(kind, n_items, n_skills);
    let (mut value, mut grad, mut curv) = pfa_objective(&model, rows, options.l2);
    let mut report = PfaFitReport {
        objective_trace: vec![value],
        iterations: 0,
        gradient_norm: norm(&grad),
        converged: false,
    };
    let mut step: f64 = 1.0;
    while report.iterations < options.max_iterations {
        if report.gradient_norm < options.tolerance {
            report.converged = true;
            break;
        }
        report.iterations += 1;
        let w = model.flat();
        let direction: Vec<f64> = grad.iter().zip(&curv).map(|(g, c)| g / c).collect();
        let slope: f64 = grad.iter().zip(&direction).map(|(g, d)| g * d).sum();
        let mut accepted = None;
        let mut trial = (step * 2.0).min(1.0);
        for _ in 0..=MAX_HALVINGS * 2 {
            let candidate: Vec<f64> = w
                .iter()
                .zip(&direction)
                .map(|(x, d)| x + trial * d)
                .collect();
            let mut m = model.clone();
            m.set_flat(&candidate);
            let (v, g, c) = pfa_objective(&m, rows, options.l2);
            if v.is_finite() && v >= value + 1e-4 * trial * slope {
                accepted = Some((m, v, g, c));
                break;
            }
            trial *= 0.5;
        }
        let Some((m, v, g, c)) = accepted else {
            // No ascent along the scaled gradient: at the optimum to
            // machine precision.
            report.converged = report.gradient_norm < options.tolerance.sqrt();
            break;
        };
        step = trial;
        model = m;
        value = v;
        grad = g;
        curv = c;
        report.gradient_norm = norm(&grad);
        report.objective_trace.push(value);
    }
    if report.gradient_norm < options.tolerance {
        report.converged = true;
    }
    if !model.flat().iter().all(|x| x.is_finite()) {
        return Err(Error::Optimizer("PFA coefficients diverged".into()));
    }
    Ok((model, report))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Plain BKT

/// Per-record `P(correct)` from each record's skill model, threading the
/// belief over the student's attempts on that skill.
pub fn predict_bkt_baseline(models: &FitReport, data: &Dataset) -> Vec<Vec<f64>> {
    mastery_features(data, models)
        .iter()
        .zip(&data.students)
        .map(|(m, s)| {
            m.iter()
                .zip(&s.records)
                .map(|(&belief, r)| models.params(r.skill).predict_correct(belief))
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// DKT

/// DKT inputs: step `t` one-hot encodes the previous interaction in `2M`
/// dimensions (`skill` for an incorrect answer, `M + skill` for a correct
/// one); the first step is all zeros.
pub fn build_dkt_input(data: &Dataset) -> Vec<EncodedSequence> {
    let m = data.n_skills();
    let dim = 2 * m;
    data.students
        .iter()
        .map(|s| {
            let mut inputs = vec![0.0; s.records.len() * dim];
            for (t, prev) in s
                .records
                .iter()
                .enumerate()
                .skip(1)
                .map(|(t, _)| (t, &s.records[t - 1]))
            {
                let index = if prev.correct {
                    m + prev.skill
                } else {
                    prev.skill
                };
                inputs[t * dim + index] = 1.0;
            }
            EncodedSequence {
                input_dim: dim,
                inputs,
                skills: s.records.iter().map(|r| r.skill).collect(),
                targets: s.records.iter().map(|r| r.correct).collect(),
            }
        })
        .collect()
}
