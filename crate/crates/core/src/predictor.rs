//! Recurrent correctness predictor.
//!
//! Two cells share the same input and output shapes:
//!
//! * `Simple`: `h_t = tanh(W_x x_t + W_h h_{t-1} + b_h)`
//! * `Gated`: an LSTM cell with input, forget and output gates.
//!
//! Both emit `y_t = sigmoid(W_y dropout(h_t) + b_y)`, one unit per skill, and
//! the prediction for step `t` is `y_t[skill_t]`. Dropout only touches the
//! copy of `h_t` read by the output layer, never the recurrent path.
//! Gradients are exact full-sequence backpropagation through time.

use std::io::{Read, Write};
use std::time::Instant;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bkt::PROB_FLOOR;
use crate::error::{Error, Result};
use crate::eval;

/// One student's encoded inputs with the skill and outcome of each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub input_dim: usize,
    /// Row-major `len x input_dim`.
    pub inputs: Vec<f64>,
    pub skills: Vec<usize>,
    pub targets: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_dim..(t + 1) * self.input_dim]
    }

    /// Steps `range` as an independent sequence.
    pub fn slice(&self, range: std::ops::Range<usize>) -> EncodedSequence {
        EncodedSequence {
            input_dim: self.input_dim,
            inputs: self.inputs[range.start * self.input_dim..range.end * self.input_dim].to_vec(),
            skills: self.skills[range.clone()].to_vec(),
            targets: self.targets[range].to_vec(),
        }
    }

    /// Appends `n` all-zero steps (skill 0, target 0).
    pub fn padded(&self, n: usize) -> EncodedSequence {
        let mut out = self.clone();
        out.inputs
            .extend(std::iter::repeat_n(0.0, n * self.input_dim));
        out.skills.extend(std::iter::repeat_n(0, n));
        out.targets.extend(std::iter::repeat_n(false, n));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Gated,
    Simple,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gated => 4,
            CellKind::Simple => 1,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" | "lstm" => Ok(CellKind::Gated),
            "simple" | "rnn" => Ok(CellKind::Simple),
            _ => Err(Error::InvalidArgument(format!(
                "unknown cell `{s}` (gated, simple)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub cell: CellKind,
    pub seed: u64,
    pub max_grad_norm: f64,
    /// Training sequences longer than this are split into independent chunks.
    pub bptt_cap: usize,
    /// Compute per-sequence gradients of a batch on the rayon pool. The
    /// reduction order is fixed, so results match the sequential mode.
    pub parallel: bool,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            hidden_size: 200,
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 100,
            dropout_rate: 0.5,
            cell: CellKind::Gated,
            seed: 42,
            max_grad_norm: 5.0,
            bptt_cap: 500,
            parallel: false,
        }
    }
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.batch_size == 0 || self.bptt_cap == 0 {
            return Err(Error::InvalidArgument(
                "hidden size, batch size and BPTT cap must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "max grad norm {}",
                self.max_grad_norm
            )));
        }
        Ok(())
    }
}

/// Trainable tensors. Also used for gradients.
///
/// Gate blocks are stacked as `[input, forget, output, candidate]` for the
/// gated cell; the simple cell has a single block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `input_dim x (gates * hidden)`, one row per input feature.
    pub w_x: Vec<f64>,
    /// `(gates * hidden) x hidden`.
    pub w_h: Vec<f64>,
    /// `gates * hidden`.
    pub b_h: Vec<f64>,
    /// `n_outputs x hidden`.
    pub w_y: Vec<f64>,
    /// `n_outputs`.
    pub b_y: Vec<f64>,
}

impl Params {
    fn zeros_like(other: &Params) -> Params {
        Params {
            w_x: vec![0.0; other.w_x.len()],
            w_h: vec![0.0; other.w_h.len()],
            b_h: vec![0.0; other.b_h.len()],
            w_y: vec![0.0; other.w_y.len()],
            b_y: vec![0.0; other.b_y.len()],
        }
    }

    pub fn tensors(&self) -> [&Vec<f64>; 5] {
        [&self.w_x, &self.w_h, &self.b_h, &self.w_y, &self.b_y]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.w_x,
            &mut self.w_h,
            &mut self.b_h,
            &mut self.w_y,
            &mut self.b_y,
        ]
    }

    fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnModel {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden_size: usize,
    pub n_outputs: usize,
    pub params: Params,
}

pub type Gradients = Params;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl RnnModel {
    /// All parameters zero.
    pub fn zeros(cell: CellKind, input_dim: usize, hidden_size: usize, n_outputs: usize) -> Self {
        let gh = cell.gates() * hidden_size;
        Self {
            cell,
            input_dim,
            hidden_size,
            n_outputs,
            params: Params {
                w_x: vec![0.0; input_dim * gh],
                w_h: vec![0.0; gh * hidden_size],
                b_h: vec![0.0; gh],
                w_y: vec![0.0; n_outputs * hidden_size],
                b_y: vec![0.0; n_outputs],
            },
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng>(
        cell: CellKind,
        input_dim: usize,
        hidden_size: usize,
        n_outputs: usize,
        rng: &mut R,
    ) -> Self {
        let mut m = Self::zeros(cell, input_dim, hidden_size, n_outputs);
        let bound = 1.0 / ((input_dim + hidden_size) as f64).sqrt();
        let recurrent = Uniform::new_inclusive(-bound, bound);
        for w in m.params.w_x.iter_mut().chain(m.params.w_h.iter_mut()) {
            *w = recurrent.sample(rng);
        }
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let output = Uniform::new_inclusive(-bound, bound);
        for w in m.params.w_y.iter_mut() {
            *w = output.sample(rng);
        }
        m
    }

    fn gate_width(&self) -> usize {
        self.cell.gates() * self.hidden_size
    }

    fn check(&self, seq: &EncodedSequence) -> Result<()> {
        if seq.input_dim != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: seq.input_dim,
            });
        }
        if let Some(&bad) = seq.skills.iter().find(|&&s| s >= self.n_outputs) {
            return Err(Error::DimensionMismatch {
                expected: self.n_outputs,
                got: bad + 1,
            });
        }
        Ok(())
    }

    /// Pre-activation `W_x x + W_h h + b`; zero inputs are skipped so one-hot
    /// blocks cost one row each.
    fn pre_activation(&self, x: &[f64], h_prev: &[f64], z: &mut [f64]) {
        let gh = self.gate_width();
        z.copy_from_slice(&self.params.b_h);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(xj, &self.params.w_x[j * gh..(j + 1) * gh], z);
            }
        }
        let h = self.hidden_size;
        for (r, zr) in z.iter_mut().enumerate() {
            *zr += dot(&self.params.w_h[r * h..(r + 1) * h], h_prev);
        }
    }

    /// One recurrent step. `state` holds the gate activations (or `h` for the
    /// simple cell), `c` the cell memory, `h` the hidden output.
    fn step(
        &self,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        act: &mut [f64],
        c: &mut [f64],
        h: &mut [f64],
    ) {
        self.pre_activation(x, h_prev, act);
        let n = self.hidden_size;
        match self.cell {
            CellKind::Simple => {
                for (a, hv) in act.iter_mut().zip(h.iter_mut()) {
                    *a = a.tanh();
                    *hv = *a;
                }
            }
            CellKind::Gated => {
                for k in 0..n {
                    let i = sigmoid(act[k]);
                    let f = sigmoid(act[n + k]);
                    let o = sigmoid(act[2 * n + k]);
                    let g = act[3 * n + k].tanh();
                    act[k] = i;
                    act[n + k] = f;
                    act[2 * n + k] = o;
                    act[3 * n + k] = g;
                    c[k] = f * c_prev[k] + i * g;
                    h[k] = o * c[k].tanh();
                }
            }
        }
    }

    fn output_unit(&self, skill: usize, h: &[f64]) -> f64 {
        let n = self.hidden_size;
        sigmoid(dot(&self.params.w_y[skill * n..(skill + 1) * n], h) + self.params.b_y[skill])
    }
}

/// Hidden states and per-skill outputs of every step.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub hidden: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

/// Full forward pass. With `train_mode`, dropout masks are drawn from `seed`.
pub fn forward(
    model: &RnnModel,
    seq: &EncodedSequence,
    train_mode: bool,
    dropout: f64,
    seed: u64,
) -> Result<ForwardPass> {
    model.check(seq)?;
    let n = model.hidden_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut act = vec![0.0; model.gate_width()];
    let (mut h_prev, mut c_prev) = (vec![0.0; n], vec![0.0; n]);
    let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
    let mut hidden = Vec::with_capacity(seq.len());
    let mut outputs = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        model.step(seq.input(t), &h_prev, &c_prev, &mut act, &mut c, &mut h);
        let read: Vec<f64> = if train_mode && dropout > 0.0 {
            let keep = 1.0 - dropout;
            h.iter()
                .map(|&v| {
                    if rng.gen::<f64>() < keep {
                        v / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        } else {
            h.clone()
        };
        outputs.push(
            (0..model.n_outputs)
                .map(|k| model.output_unit(k, &read))
                .collect(),
        );
        hidden.push(h.clone());
        std::mem::swap(&mut h, &mut h_prev);
        std::mem::swap(&mut c, &mut c_prev);
    }
    Ok(ForwardPass { hidden, outputs })
}

/// `y_t[skill_t]` for every step, without dropout.
pub fn predict(model: &RnnModel, seq: &EncodedSequence) -> Result<Vec<f64>> {
    model.check(seq)?;
    let n = model.hidden_size;
    let mut act = vec![0.0; model.gate_width()];
    let (mut h_prev, mut c_prev) = (vec![0.0; n], vec![0.0; n]);
    let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        model.step(seq.input(t), &h_prev, &c_prev, &mut act, &mut c, &mut h);
        out.push(model.output_unit(seq.skills[t], &h));
        std::mem::swap(&mut h, &mut h_prev);
        std::mem::swap(&mut c, &mut c_prev);
    }
    Ok(out)
}

fn bce(p: f64, target: bool) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if target {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Summed cross-entropy of `outputs[t][skill_t]` against the targets.
pub fn loss_sum(outputs: &[Vec<f64>], seq: &EncodedSequence) -> f64 {
    outputs
        .iter()
        .zip(seq.skills.iter().zip(&seq.targets))
        .map(|(y, (&k, &r))| bce(y[k], r))
        .sum()
}

/// Cross-entropy averaged per predicted step.
pub fn loss(outputs: &[Vec<f64>], seq: &EncodedSequence) -> f64 {
    if seq.is_empty() {
        return 0.0;
    }
    loss_sum(outputs, seq) / seq.len() as f64
}

/// Summed loss, gradients of the summed loss, and the number of counted steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGradient {
    pub loss: f64,
    pub counted: usize,
    pub grads: Gradients,
}

/// Forward and backward pass over one sequence.
///
/// `mask[t] == false` excludes step `t` from the loss (padding). Dropout is
/// applied when `dropout > 0` with masks drawn from `seed`.
pub fn backward(
    model: &RnnModel,
    seq: &EncodedSequence,
    mask: Option<&[bool]>,
    dropout: f64,
    seed: u64,
) -> Result<SequenceGradient> {
    model.check(seq)?;
    let counted_at = |t: usize| mask.is_none_or(|m| m[t]);
    // Steps after the last counted one cannot reach the loss.
    let len = (0..seq.len())
        .rev()
        .find(|&t| counted_at(t))
        .map_or(0, |t| t + 1);

    let n = model.hidden_size;
    let gw = model.gate_width();
    let gated = model.cell == CellKind::Gated;
    let keep = 1.0 - dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Cached activations; index t + 1 holds step t, index 0 the zero state.
    let mut acts = vec![0.0; len * gw];
    let mut hs = vec![0.0; (len + 1) * n];
    let mut cs = vec![0.0; (len + 1) * n];
    let mut masks = if dropout > 0.0 {
        vec![0.0; len * n]
    } else {
        Vec::new()
    };
    let mut probs = vec![0.0; len];
    let mut h_read = vec![0.0; n];
    let mut c_buf = vec![0.0; n];
    let mut h_buf = vec![0.0; n];
    let mut loss = 0.0;
    let mut counted = 0;

    for t in 0..len {
        let (h_prev, c_prev) = (&hs[t * n..(t + 1) * n], &cs[t * n..(t + 1) * n]);
        model.step(
            seq.input(t),
            h_prev,
            c_prev,
            &mut acts[t * gw..(t + 1) * gw],
            &mut c_buf,
            &mut h_buf,
        );
        hs[(t + 1) * n..(t + 2) * n].copy_from_slice(&h_buf);
        cs[(t + 1) * n..(t + 2) * n].copy_from_slice(&c_buf);
        if counted_at(t) {
            h_read.copy_from_slice(&h_buf);
            if dropout > 0.0 {
                let m = &mut masks[t * n..(t + 1) * n];
                for (mk, hv) in m.iter_mut().zip(h_read.iter_mut()) {
                    *mk = if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    };
                    *hv *= *mk;
                }
            }
            let p = model.output_unit(seq.skills[t], &h_read);
            probs[t] = p;
            loss += bce(p, seq.targets[t]);
            counted += 1;
        }
    }

    let mut grads = Params::zeros_like(&model.params);
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut dh = vec![0.0; n];
    let mut dz = vec![0.0; gw];
    for t in (0..len).rev() {
        dh.copy_from_slice(&dh_next);
        let h_t = &hs[(t + 1) * n..(t + 2) * n];
        if counted_at(t) {
            let k = seq.skills[t];
            let da = probs[t] - f64::from(u8::from(seq.targets[t]));
            grads.b_y[k] += da;
            let w_row = &model.params.w_y[k * n..(k + 1) * n];
            let g_row = &mut grads.w_y[k * n..(k + 1) * n];
            if dropout > 0.0 {
                let m = &masks[t * n..(t + 1) * n];
                for j in 0..n {
                    g_row[j] += da * h_t[j] * m[j];
                    dh[j] += da * w_row[j] * m[j];
                }
            } else {
                axpy(da, h_t, g_row);
                axpy(da, w_row, &mut dh);
            }
        }

        let act = &acts[t * gw..(t + 1) * gw];
        if gated {
            let c_t = &cs[(t + 1) * n..(t + 2) * n];
            let c_prev = &cs[t * n..(t + 1) * n];
            for j in 0..n {
                let (i, f, o, g) = (act[j], act[n + j], act[2 * n + j], act[3 * n + j]);
                let tc = c_t[j].tanh();
                let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
                dz[j] = dc * g * i * (1.0 - i);
                dz[n + j] = dc * c_prev[j] * f * (1.0 - f);
                dz[2 * n + j] = dh[j] * tc * o * (1.0 - o);
                dz[3 * n + j] = dc * i * (1.0 - g * g);
                dc_next[j] = dc * f;
            }
        } else {
            for j in 0..n {
                dz[j] = dh[j] * (1.0 - act[j] * act[j]);
            }
        }

        let x = seq.input(t);
        for (col, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(xj, &dz, &mut grads.w_x[col * gw..(col + 1) * gw]);
            }
        }
        axpy(1.0, &dz, &mut grads.b_h);
        let h_prev = &hs[t * n..(t + 1) * n];
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for (r, &dzr) in dz.iter().enumerate() {
            if dzr != 0.0 {
                axpy(dzr, h_prev, &mut grads.w_h[r * n..(r + 1) * n]);
                axpy(dzr, &model.params.w_h[r * n..(r + 1) * n], &mut dh_next);
            }
        }
    }

    Ok(SequenceGradient {
        loss,
        counted,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-step training loss of each epoch (with dropout active).
    pub epoch_loss: Vec<f64>,
    /// Validation AUC after each epoch; empty without validation data.
    pub validation_auc: Vec<Option<f64>>,
    /// 0-based epoch with the highest validation AUC.
    pub best_epoch: Option<usize>,
    pub wall_seconds: f64,
}

fn mix_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Validation AUC of `model` over pooled steps; `None` for single-class data.
pub fn validation_auc(model: &RnnModel, seqs: &[EncodedSequence]) -> Result<Option<f64>> {
    let mut preds = eval::PredictionSet::default();
    for s in seqs {
        for (p, &r) in predict(model, s)?.into_iter().zip(&s.targets) {
            preds.push(p, r);
        }
    }
    Ok(eval::auc(&preds))
}

/// Mini-batch SGD on the mean per-step cross-entropy.
///
/// Batches hold `batch_size` sequences, padded to the longest member with
/// padded steps masked out of the loss. The global gradient norm is clipped
/// to `max_grad_norm`. Deterministic for a given `config.seed`.
pub fn train(
    config: &RnnConfig,
    n_outputs: usize,
    train_set: &[EncodedSequence],
    validation: &[EncodedSequence],
) -> Result<(RnnModel, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let Some(first) = train_set.iter().find(|s| !s.is_empty()) else {
        return Err(Error::InvalidArgument("empty training set".into()));
    };
    let input_dim = first.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = RnnModel::init(
        config.cell,
        input_dim,
        config.hidden_size,
        n_outputs,
        &mut rng,
    );

    let chunks: Vec<EncodedSequence> = train_set
        .iter()
        .filter(|s| !s.is_empty())
        .flat_map(|s| {
            (0..s.len())
                .step_by(config.bptt_cap)
                .map(|start| s.slice(start..(start + config.bptt_cap).min(s.len())))
                .collect::<Vec<_>>()
        })
        .collect();
    for c in &chunks {
        model.check(c)?;
    }

    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(config.epochs),
        validation_auc: Vec::new(),
        best_epoch: None,
        wall_seconds: 0.0,
    };
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let padded_len = batch.iter().map(|&i| chunks[i].len()).max().unwrap_or(0);
            let one = |&i: &usize| {
                let seq = &chunks[i];
                let mask: Vec<bool> = (0..padded_len).map(|t| t < seq.len()).collect();
                let padded;
                let seq = if seq.len() < padded_len {
                    padded = seq.padded(padded_len - seq.len());
                    &padded
                } else {
                    seq
                };
                backward(
                    &model,
                    seq,
                    Some(&mask),
                    config.dropout_rate,
                    mix_seed(config.seed, epoch as u64, i as u64),
                )
            };
            let parts: Vec<SequenceGradient> = if config.parallel {
                batch.par_iter().map(one).collect::<Result<_>>()?
            } else {
                batch.iter().map(one).collect::<Result<_>>()?
            };
            let mut grads = Params::zeros_like(&model.params);
            let mut batch_loss = 0.0;
            let mut counted = 0;
            for part in &parts {
                grads.add_assign(&part.grads);
                batch_loss += part.loss;
                counted += part.counted;
            }
            if counted == 0 {
                continue;
            }
            grads.scale(1.0 / counted as f64);
            let norm = grads.norm();
            if norm > config.max_grad_norm {
                grads.scale(config.max_grad_norm / norm);
            }
            for (w, g) in model.params.tensors_mut().into_iter().zip(grads.tensors()) {
                axpy(-config.learning_rate, g, w);
            }
            epoch_loss += batch_loss;
            epoch_steps += counted;
        }
        let mean = epoch_loss / epoch_steps.max(1) as f64;
        if !mean.is_finite() || !model.params.all_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        report.epoch_loss.push(mean);
        if !validation.is_empty() {
            let auc = validation_auc(&model, validation)?;
            let best = report.best_epoch.and_then(|e| report.validation_auc[e]);
            if auc.is_some() && (best.is_none() || auc > best) {
                report.best_epoch = Some(epoch);
            }
            report.validation_auc.push(auc);
        }
        log::debug!("epoch {epoch}: loss {mean:.5}");
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: RnnConfig,
    pub model: RnnModel,
}

const CHECKPOINT_FORMAT: &str = "bktlstm-rnn-v1";

/// JSON checkpoint; floats use shortest round-trip formatting, so reloading is
/// bit-exact.
pub fn save_checkpoint<W: Write>(config: &RnnConfig, model: &RnnModel, writer: W) -> Result<()> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        config: config.clone(),
        model: model.clone(),
    };
    serde_json::to_writer(writer, &ckpt)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(reader: R) -> Result<Checkpoint> {
    let ckpt: Checkpoint = serde_json::from_reader(reader)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Malformed {
            path: "<checkpoint>".into(),
            reason: format!("unsupported format `{}`", ckpt.format),
        });
    }
    let m = &ckpt.model;
    let gw = m.cell.gates() * m.hidden_size;
    let p = &m.params;
    if p.w_x.len() != m.input_dim * gw
        || p.w_h.len() != gw * m.hidden_size
        || p.b_h.len() != gw
        || p.w_y.len() != m.n_outputs * m.hidden_size
        || p.b_y.len() != m.n_outputs
    {
        return Err(Error::Malformed {
            path: "<checkpoint>".into(),
            reason: "parameter shapes do not match dimensions".into(),
        });
    }
    Ok(ckpt)
}
