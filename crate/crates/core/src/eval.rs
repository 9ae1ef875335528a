//! Metrics, student-level cross-validation and the feature ablation runner.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_dkt_input, fit_birt, fit_pfa, predict_bkt_baseline, PfaOptions};
use crate::bkt::{fit_all, mastery_features, GridSpec};
use crate::dataset::{split_folds, Dataset, FoldSplit, DEFAULT_SEED};
use crate::difficulty::{DifficultyTable, MIN_SUPPORT};
use crate::error::{Error, Result};
use crate::features::{build_sequences, Encoder, FeatureMask};
use crate::predictor::{predict, train, EncodedSequence, RnnConfig};
use crate::profile::{
    fit_profiles, profile_sequence, KMeansInit, DEFAULT_CLUSTERS, DEFAULT_WINDOW,
};

/// Identity of a predicted record, for joins and per-skill breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub student: usize,
    pub order: i64,
    pub skill: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub predicted: Vec<f64>,
    pub actual: Vec<bool>,
    /// Empty, or one entry per prediction.
    pub records: Vec<RecordRef>,
}

impl PredictionSet {
    pub fn push(&mut self, predicted: f64, actual: bool) {
        self.predicted.push(predicted);
        self.actual.push(actual);
    }

    pub fn push_record(&mut self, predicted: f64, actual: bool, record: RecordRef) {
        self.push(predicted, actual);
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn from_pairs(pairs: &[(f64, bool)]) -> Self {
        let mut out = Self::default();
        for &(p, a) in pairs {
            out.push(p, a);
        }
        out
    }

    /// Pairs every record of `data` with the `[student][record]` predictions.
    pub fn from_dataset(data: &Dataset, predictions: &[Vec<f64>]) -> Self {
        let mut out = Self::default();
        for (i, (s, preds)) in data.students.iter().zip(predictions).enumerate() {
            for (r, &p) in s.records.iter().zip(preds) {
                out.push_record(
                    p,
                    r.correct,
                    RecordRef {
                        student: i,
                        order: r.order,
                        skill: r.skill,
                    },
                );
            }
        }
        out
    }
}

/// Rank-based (Mann-Whitney) AUC with tied scores sharing the mean rank.
/// `None` unless both classes are present.
pub fn auc(preds: &PredictionSet) -> Option<f64> {
    let n = preds.len();
    let positives = preds.actual.iter().filter(|&&a| a).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| preds.predicted[a].total_cmp(&preds.predicted[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && preds.predicted[idx[j]] == preds.predicted[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = idx[i..j].iter().filter(|&&k| preds.actual[k]).count();
        rank_sum += mean_rank * tied_pos as f64;
        i = j;
    }
    let (p, q) = (positives as f64, negatives as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

pub fn rmse(preds: &PredictionSet) -> Option<f64> {
    if preds.is_empty() {
        return None;
    }
    let sse: f64 = preds
        .predicted
        .iter()
        .zip(&preds.actual)
        .map(|(&p, &a)| (p - f64::from(u8::from(a))).powi(2))
        .sum();
    Some((sse / preds.len() as f64).sqrt())
}

/// Squared Pearson correlation; `None` when either side has zero variance.
pub fn r_squared(preds: &PredictionSet) -> Option<f64> {
    let n = preds.len();
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let ys: Vec<f64> = preds
        .actual
        .iter()
        .map(|&a| f64::from(u8::from(a)))
        .collect();
    let mx = preds.predicted.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in preds.predicted.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy * sxy / (sxx * syy))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: Option<f64>,
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
}

impl Metrics {
    pub fn of(preds: &PredictionSet) -> Self {
        Self {
            auc: auc(preds),
            rmse: rmse(preds),
            r2: r_squared(preds),
        }
    }

    /// Component-wise mean over the defined values.
    pub fn mean<'a, I: IntoIterator<Item = &'a Metrics>>(items: I) -> Self {
        let items: Vec<&Metrics> = items.into_iter().collect();
        let avg = |f: fn(&Metrics) -> Option<f64>| {
            let vals: Vec<f64> = items.iter().filter_map(|m| f(m)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Self {
            auc: avg(|m| m.auc),
            rmse: avg(|m| m.rmse),
            r2: avg(|m| m.r2),
        }
    }
}

/// Metrics computed separately for each skill and averaged over skills.
pub fn per_skill_average(preds: &PredictionSet) -> Metrics {
    let max_skill = preds.records.iter().map(|r| r.skill + 1).max().unwrap_or(0);
    let mut per: Vec<PredictionSet> = vec![PredictionSet::default(); max_skill];
    for ((&p, &a), r) in preds
        .predicted
        .iter()
        .zip(&preds.actual)
        .zip(&preds.records)
    {
        per[r.skill].push(p, a);
    }
    let metrics: Vec<Metrics> = per
        .iter()
        .filter(|s| !s.is_empty())
        .map(Metrics::of)
        .collect();
    Metrics::mean(&metrics)
}

/// Which model a cross-validation run evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSpec {
    BktLstm(FeatureMask),
    Bkt,
    Birt,
    Pfa,
    Dkt,
}

impl ModelSpec {
    pub fn name(&self) -> String {
        match self {
            ModelSpec::BktLstm(mask) => {
                let variant = (1..=4u8).find(|&v| FeatureMask::variant(v) == *mask);
                match variant {
                    Some(4) => "BKT-LSTM".into(),
                    Some(v) => format!("BKT-LSTM-{v}"),
                    None => format!(
                        "BKT-LSTM(ability={},difficulty={},skill={})",
                        mask.ability, mask.difficulty, mask.skill
                    ),
                }
            }
            ModelSpec::Bkt => "BKT".into(),
            ModelSpec::Birt => "BIRT".into(),
            ModelSpec::Pfa => "PFA".into(),
            ModelSpec::Dkt => "DKT".into(),
        }
    }

    pub fn parse(name: &str) -> Result<Vec<ModelSpec>> {
        Ok(match name {
            "bkt-lstm" => vec![ModelSpec::BktLstm(FeatureMask::default())],
            "bkt" => vec![ModelSpec::Bkt],
            "birt" => vec![ModelSpec::Birt],
            "pfa" => vec![ModelSpec::Pfa],
            "dkt" => vec![ModelSpec::Dkt],
            "all" => vec![
                ModelSpec::BktLstm(FeatureMask::default()),
                ModelSpec::Bkt,
                ModelSpec::Birt,
                ModelSpec::Pfa,
                ModelSpec::Dkt,
            ],
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown model `{other}` (bkt-lstm, bkt, birt, pfa, dkt, all)"
                )))
            }
        })
    }
}

/// Everything a cross-validation run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub folds: usize,
    pub seed: u64,
    pub window: usize,
    pub clusters: usize,
    pub kmeans_init: KMeansInit,
    pub grid: GridSpec,
    pub rnn: RnnConfig,
    pub pfa: PfaOptions,
    /// Track test-fold AUC per epoch in the training report (monitoring
    /// only; the final-epoch model is always the one evaluated).
    pub track_validation: bool,
    /// Run folds on the rayon pool.
    pub parallel_folds: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: DEFAULT_SEED,
            window: DEFAULT_WINDOW,
            clusters: DEFAULT_CLUSTERS,
            kmeans_init: KMeansInit::Random,
            grid: GridSpec::default(),
            rnn: RnnConfig::default(),
            pfa: PfaOptions::default(),
            track_validation: false,
            parallel_folds: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold_id: usize,
    pub test_records: usize,
    pub metrics: Option<Metrics>,
    /// Per-skill averaged metrics (BKT only).
    pub per_skill: Option<Metrics>,
    /// Optimizer convergence of the fitted baseline, when applicable.
    pub converged: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub folds: Vec<FoldOutcome>,
    /// Mean over the folds that succeeded.
    pub mean: Metrics,
    pub per_skill_mean: Option<Metrics>,
}

/// The three BKT-LSTM feature sources and the encoded sequences of one fold.
pub struct FoldFeatures {
    pub train: Vec<EncodedSequence>,
    pub test: Vec<EncodedSequence>,
    pub n_skills: usize,
}

/// Fits BKT, the ability model and the difficulty table on `train` only and
/// encodes both sides with them.
pub fn fold_features(
    train: &Dataset,
    test: &Dataset,
    mask: FeatureMask,
    config: &PipelineConfig,
) -> Result<FoldFeatures> {
    let bkt = fit_all(train, &config.grid)?;
    let ability = fit_profiles(
        train,
        config.window,
        config.clusters,
        config.seed,
        config.kmeans_init,
    )?;
    let difficulty = DifficultyTable::compute(train, MIN_SUPPORT);
    let encoder = Encoder::new(train.n_skills(), ability.n_labels(), mask);
    let encode = |data: &Dataset| -> Result<Vec<EncodedSequence>> {
        let seqs = build_sequences(
            data,
            &mastery_features(data, &bkt),
            &profile_sequence(data, &ability, config.window)?,
            &difficulty.bins(data),
        )?;
        encoder.encode_all(&seqs)
    };
    Ok(FoldFeatures {
        train: encode(train)?,
        test: encode(test)?,
        n_skills: train.n_skills(),
    })
}

fn predict_sequences(
    config: &PipelineConfig,
    fold_id: usize,
    n_skills: usize,
    train_seqs: &[EncodedSequence],
    test_seqs: &[EncodedSequence],
) -> Result<Vec<Vec<f64>>> {
    let rnn = RnnConfig {
        seed: config.rnn.seed.wrapping_add(fold_id as u64),
        ..config.rnn.clone()
    };
    let validation: &[EncodedSequence] = if config.track_validation {
        test_seqs
    } else {
        &[]
    };
    let (model, report) = train(&rnn, n_skills, train_seqs, validation)?;
    log::info!(
        "fold {fold_id}: final loss {:.4} after {} epochs ({:.1}s)",
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        report.epoch_loss.len(),
        report.wall_seconds
    );
    test_seqs.iter().map(|s| predict(&model, s)).collect()
}

fn run_fold(
    data: &Dataset,
    fold: &FoldSplit,
    spec: ModelSpec,
    config: &PipelineConfig,
) -> Result<FoldOutcome> {
    let train_set = data.subset(&fold.train_students);
    let test_set = data.subset(&fold.test_students);
    let mut per_skill = None;
    let mut converged = None;
    let predictions = match spec {
        ModelSpec::BktLstm(mask) => {
            let f = fold_features(&train_set, &test_set, mask, config)?;
            predict_sequences(config, fold.fold_id, f.n_skills, &f.train, &f.test)?
        }
        ModelSpec::Dkt => {
            let (tr, te) = (build_dkt_input(&train_set), build_dkt_input(&test_set));
            predict_sequences(config, fold.fold_id, data.n_skills(), &tr, &te)?
        }
        ModelSpec::Bkt => {
            let models = fit_all(&train_set, &config.grid)?;
            let preds = predict_bkt_baseline(&models, &test_set);
            per_skill = Some(per_skill_average(&PredictionSet::from_dataset(
                &test_set, &preds,
            )));
            preds
        }
        ModelSpec::Birt => {
            let (model, report) = fit_birt(&train_set)?;
            converged = Some(report.converged);
            model.predict_dataset(&test_set)
        }
        ModelSpec::Pfa => {
            let (model, report) = fit_pfa(&train_set, &config.pfa)?;
            converged = Some(report.converged);
            model.predict_dataset(&test_set)
        }
    };
    let preds = PredictionSet::from_dataset(&test_set, &predictions);
    Ok(FoldOutcome {
        fold_id: fold.fold_id,
        test_records: preds.len(),
        metrics: Some(Metrics::of(&preds)),
        per_skill,
        converged,
        error: None,
    })
}

/// k-fold student-level cross-validation of one model. Every fitted artifact
/// of a fold sees that fold's training students only. Failed folds are
/// recorded and left out of the mean.
pub fn cross_validate(
    data: &Dataset,
    spec: ModelSpec,
    config: &PipelineConfig,
) -> Result<EvalReport> {
    let folds = split_folds(data, config.folds, config.seed)?;
    let run = |fold: &FoldSplit| {
        run_fold(data, fold, spec, config).unwrap_or_else(|e| {
            log::warn!("{} fold {} failed: {e}", spec.name(), fold.fold_id);
            FoldOutcome {
                fold_id: fold.fold_id,
                test_records: 0,
                metrics: None,
                per_skill: None,
                converged: None,
                error: Some(e.to_string()),
            }
        })
    };
    let outcomes: Vec<FoldOutcome> = if config.parallel_folds {
        folds.par_iter().map(run).collect()
    } else {
        folds.iter().map(run).collect()
    };
    let ok: Vec<&Metrics> = outcomes.iter().filter_map(|o| o.metrics.as_ref()).collect();
    if ok.is_empty() {
        let first = outcomes
            .iter()
            .find_map(|o| o.error.clone())
            .unwrap_or_default();
        return Err(Error::Optimizer(format!(
            "{}: every fold failed ({first})",
            spec.name()
        )));
    }
    let per_skill: Vec<&Metrics> = outcomes
        .iter()
        .filter_map(|o| o.per_skill.as_ref())
        .collect();
    Ok(EvalReport {
        model: spec.name(),
        mean: Metrics::mean(ok),
        per_skill_mean: (!per_skill.is_empty()).then(|| Metrics::mean(per_skill)),
        folds: outcomes,
    })
}

/// BKT-LSTM variants 1..=4 under identical folds, seeds and hyperparameters.
pub fn ablate(data: &Dataset, config: &PipelineConfig) -> Result<Vec<EvalReport>> {
    (1..=4u8)
        .map(|v| cross_validate(data, ModelSpec::BktLstm(FeatureMask::variant(v)), config))
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Human-readable tables: one per metric, rows = models, columns = folds
/// and mean. Values rounded to three decimals.
pub fn render_text(reports: &[EvalReport]) -> String {
    let n_folds = reports.iter().map(|r| r.folds.len()).max().unwrap_or(0);
    let width = reports
        .iter()
        .map(|r| r.model.len() + if r.per_skill_mean.is_some() { 12 } else { 0 })
        .max()
        .unwrap_or(5)
        .max(5)
        + 2;
    let mut out = String::new();
    let metrics: [(&str, fn(&Metrics) -> Option<f64>); 3] =
        [("AUC", |m| m.auc), ("RMSE", |m| m.rmse), ("r2", |m| m.r2)];
    for (name, get) in metrics {
        let _ = writeln!(out, "{name}");
        let _ = write!(out, "{:<width$}", "model");
        for f in 0..n_folds {
            let _ = write!(out, "{:>9}", format!("fold{f}"));
        }
        let _ = writeln!(out, "{:>9}", "mean");
        for r in reports {
            let _ = write!(out, "{:<width$}", r.model);
            for f in 0..n_folds {
                let v = r
                    .folds
                    .get(f)
                    .and_then(|o| o.metrics.as_ref())
                    .and_then(get);
                let _ = write!(out, "{:>9}", cell(v));
            }
            let _ = writeln!(out, "{:>9}", cell(get(&r.mean)));
            if let Some(ps) = &r.per_skill_mean {
                let _ = write!(out, "{:<width$}", format!("{} (per-skill)", r.model));
                for f in 0..n_folds {
                    let v = r
                        .folds
                        .get(f)
                        .and_then(|o| o.per_skill.as_ref())
                        .and_then(get);
                    let _ = write!(out, "{:>9}", cell(v));
                }
                let _ = writeln!(out, "{:>9}", cell(get(ps)));
            }
        }
        out.push('\n');
    }
    for r in reports {
        for f in &r.folds {
            if let Some(e) = &f.error {
                let _ = writeln!(out, "warning: {} fold {} failed: {e}", r.model, f.fold_id);
            }
        }
    }
    out
}

/// Machine-readable `model,fold,metric,value` rows; `fold` is `mean` for the
/// aggregate.
pub fn render_rows(reports: &[EvalReport]) -> String {
    let mut out = String::from("model,fold,metric,value\n");
    let mut emit = |model: &str, fold: &str, m: &Metrics| {
        for (name, v) in [("auc", m.auc), ("rmse", m.rmse), ("r2", m.r2)] {
            if let Some(v) = v {
                let _ = writeln!(out, "{model},{fold},{name},{v:.6}");
            }
        }
    };
    for r in reports {
        for f in &r.folds {
            if let Some(m) = &f.metrics {
                emit(&r.model, &f.fold_id.to_string(), m);
            }
            if let Some(m) = &f.per_skill {
                emit(
                    &format!("{} (per-skill)", r.model),
                    &f.fold_id.to_string(),
                    m,
                );
            }
        }
        emit(&r.model, "mean", &r.mean);
        if let Some(m) = &r.per_skill_mean {
            emit(&format!("{} (per-skill)", r.model), "mean", m);
        }
    }
    out
}
