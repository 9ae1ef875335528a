//! Temporal ability profiles.
//!
//! A student's history is cut into windows of attempts. After each window
//! the cumulative per-skill success rates form a performance vector; k-means
//! over the training students' vectors defines the profiles, and each
//! student is relabelled at every window boundary.

use std::cmp::Ordering;
use std::io::Write;
use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, IdIndex, InteractionRecord};
use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_CLUSTERS: usize = 7;
pub const MAX_ITERATIONS: usize = 100;
/// Label given before the first evaluation.
pub const INITIAL_LABEL: usize = 1;
/// Success rate of a skill the student has not attempted yet.
pub const UNSEEN_RATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceVector {
    pub student_id: String,
    /// 1-based.
    pub interval_index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbilityModel {
    /// Sorted ascending by mean component.
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Objective after the initial assignment and after every iteration.
    pub objective_trace: Vec<f64>,
}

impl AbilityModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Number of distinct labels including the initial one.
    pub fn n_labels(&self) -> usize {
        self.k() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbilityProfile {
    pub student_id: String,
    pub interval_index: usize,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KMeansInit {
    /// k distinct input vectors drawn with the seeded RNG.
    #[default]
    Random,
    /// One seeded pick, then repeatedly the vector farthest from all chosen.
    FarthestPoint,
}

/// Attempt ranges of each window; a trailing partial window is kept.
pub fn segment_intervals(n_attempts: usize, window: usize) -> Vec<Range<usize>> {
    assert!(window >= 1, "window must be positive");
    (0..n_attempts)
        .step_by(window)
        .map(|start| start..(start + window).min(n_attempts))
        .collect()
}

/// Per-skill success rates over `records`; unattempted skills get 0.5.
pub fn performance_vector(records: &[InteractionRecord], n_skills: usize) -> Vec<f64> {
    let mut tally = RateTally::new(n_skills);
    for r in records {
        tally.add(r);
    }
    tally.rates()
}

struct RateTally {
    correct: Vec<u32>,
    attempts: Vec<u32>,
}

impl RateTally {
    fn new(n_skills: usize) -> Self {
        Self {
            correct: vec![0; n_skills],
            attempts: vec![0; n_skills],
        }
    }

    fn add(&mut self, r: &InteractionRecord) {
        self.attempts[r.skill] += 1;
        self.correct[r.skill] += u32::from(r.correct);
    }

    fn rates(&self) -> Vec<f64> {
        self.correct
            .iter()
            .zip(&self.attempts)
            .map(|(&c, &n)| {
                if n == 0 {
                    UNSEEN_RATE
                } else {
                    f64::from(c) / f64::from(n)
                }
            })
            .collect()
    }
}

/// Cumulative vectors through each interval of one student (index 0 is
/// interval 1).
pub fn cumulative_vectors(
    records: &[InteractionRecord],
    n_skills: usize,
    window: usize,
) -> Vec<Vec<f64>> {
    let mut tally = RateTally::new(n_skills);
    segment_intervals(records.len(), window)
        .into_iter()
        .map(|range| {
            for r in &records[range] {
                tally.add(r);
            }
            tally.rates()
        })
        .collect()
}

/// Every (student, interval) cumulative vector of the dataset.
pub fn training_vectors(data: &Dataset, window: usize) -> Vec<PerformanceVector> {
    let mut out = Vec::new();
    for student in &data.students {
        for (z, values) in cumulative_vectors(&student.records, data.n_skills(), window)
            .into_iter()
            .enumerate()
        {
            out.push(PerformanceVector {
                student_id: student.id.clone(),
                interval_index: z + 1,
                values,
            });
        }
    }
    out
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, point);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn mean_component(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Lloyd's k-means.
///
/// Inputs are sorted lexicographically before anything else, so the result
/// does not depend on the order of `vectors`. Iterates until no assignment
/// changes or [`MAX_ITERATIONS`] is reached. An empty cluster is re-seeded at
/// the point farthest from its assigned centroid.
pub fn fit_kmeans(
    vectors: &[Vec<f64>],
    k: usize,
    seed: u64,
    init: KMeansInit,
) -> Result<AbilityModel> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let dim = vectors.first().map_or(0, Vec::len);
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let mut points: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    points.sort_by(|a, b| lex_cmp(a, b));
    let mut distinct: Vec<&[f64]> = points.clone();
    distinct.dedup_by(|a, b| lex_cmp(a, b) == Ordering::Equal);
    if distinct.len() < k {
        return Err(Error::TooFewVectors {
            k,
            found: distinct.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = match init {
        KMeansInit::Random => {
            let mut picks = sample(&mut rng, distinct.len(), k).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| distinct[i].to_vec()).collect()
        }
        KMeansInit::FarthestPoint => {
            let mut chosen = vec![distinct[rng.gen_range(0..distinct.len())].to_vec()];
            while chosen.len() < k {
                let mut best = (0, -1.0);
                for (i, p) in distinct.iter().enumerate() {
                    let d = nearest(&chosen, p).1;
                    if d > best.1 {
                        best = (i, d);
                    }
                }
                chosen.push(distinct[best.0].to_vec());
            }
            chosen
        }
    };

    let assign = |centroids: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]| -> (bool, f64) {
        let mut changed = false;
        let mut objective = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(centroids, p);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = d;
            objective += d;
        }
        (changed, objective)
    };

    let n = points.len();
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let (_, objective) = assign(&centroids, &mut labels, &mut dists);
    let mut objective_trace = vec![objective];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s * inv).collect();
            } else {
                // Farthest point from its own centroid; never one already used
                // for another empty cluster.
                let mut best: Option<(usize, f64)> = None;
                for i in 0..n {
                    if !taken[i] && best.is_none_or(|(_, d)| dists[i] > d) {
                        best = Some((i, dists[i]));
                    }
                }
                let (i, _) = best.expect("n >= k");
                taken[i] = true;
                dists[i] = 0.0;
                centroids[c] = points[i].to_vec();
            }
        }
        let (changed, objective) = assign(&centroids, &mut labels, &mut dists);
        objective_trace.push(objective);
        if !changed {
            break;
        }
    }

    centroids.sort_by(|a, b| {
        mean_component(a)
            .total_cmp(&mean_component(b))
            .then_with(|| lex_cmp(a, b))
    });
    Ok(AbilityModel {
        centroids,
        iterations,
        objective_trace,
    })
}

/// Profile label (2..=k+1) of the nearest centroid.
pub fn assign_profile(model: &AbilityModel, vector: &[f64]) -> Result<usize> {
    if vector.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: vector.len(),
        });
    }
    Ok(INITIAL_LABEL + 1 + nearest(&model.centroids, vector).0)
}

/// Label of every interval of one student: interval 1 gets the initial
/// label, interval z >= 2 is assigned from the cumulative vector through
/// interval z - 1.
pub fn interval_labels(
    model: &AbilityModel,
    records: &[InteractionRecord],
    n_skills: usize,
    window: usize,
) -> Result<Vec<usize>> {
    let vectors = cumulative_vectors(records, n_skills, window);
    let mut labels = Vec::with_capacity(vectors.len());
    for z in 0..vectors.len() {
        labels.push(if z == 0 {
            INITIAL_LABEL
        } else {
            assign_profile(model, &vectors[z - 1])?
        });
    }
    Ok(labels)
}

/// Per-record profile labels, indexed as `[student][record]`.
pub fn profile_sequence(
    data: &Dataset,
    model: &AbilityModel,
    window: usize,
) -> Result<Vec<Vec<usize>>> {
    data.students
        .iter()
        .map(|student| {
            let labels = interval_labels(model, &student.records, data.n_skills(), window)?;
            Ok((0..student.records.len())
                .map(|i| labels[i / window])
                .collect())
        })
        .collect()
}

/// Profile of every (student, interval).
pub fn profiles(
    data: &Dataset,
    model: &AbilityModel,
    window: usize,
) -> Result<Vec<AbilityProfile>> {
    let mut out = Vec::new();
    for student in &data.students {
        for (z, label) in interval_labels(model, &student.records, data.n_skills(), window)?
            .into_iter()
            .enumerate()
        {
            out.push(AbilityProfile {
                student_id: student.id.clone(),
                interval_index: z + 1,
                label,
            });
        }
    }
    Ok(out)
}

/// Fits the ability model on the cumulative vectors of `train`.
pub fn fit_profiles(
    train: &Dataset,
    window: usize,
    k: usize,
    seed: u64,
    init: KMeansInit,
) -> Result<AbilityModel> {
    let vectors: Vec<Vec<f64>> = training_vectors(train, window)
        .into_iter()
        .map(|v| v.values)
        .collect();
    fit_kmeans(&vectors, k, seed, init)
}

/// One row per centroid, one column per skill.
pub fn write_centroids<W: Write>(model: &AbilityModel, skills: &IdIndex, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(std::iter::once("label").chain(skills.ids().iter().map(String::as_str)))?;
    for (i, c) in model.centroids.iter().enumerate() {
        let mut row = vec![(INITIAL_LABEL + 1 + i).to_string()];
        row.extend(c.iter().map(|v| format!("{v:.16e}")));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_profiles<W: Write>(profiles: &[AbilityProfile], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["student_id", "interval_index", "label"])?;
    for p in profiles {
        w.write_record([
            p.student_id.clone(),
            p.interval_index.to_string(),
            p.label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(skill: usize, correct: bool) -> InteractionRecord {
        InteractionRecord {
            problem: None,
            skill,
            correct,
            order: 0,
        }
    }

    #[test]
    fn interval_segmentation() {
        let sizes: Vec<usize> = segment_intervals(45, 20).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![20, 20, 5]);
        assert_eq!(segment_intervals(20, 20).len(), 1);
        assert!(segment_intervals(0, 20).is_empty());
    }

    #[test]
    fn performance_vector_ratios() {
        assert_eq!(performance_vector(&[], 3), vec![0.5; 3]);
        let recs = [rec(1, true), rec(1, true), rec(1, false), rec(1, true)];
        assert_eq!(performance_vector(&recs, 3), vec![0.5, 0.75, 0.5]);
    }

    #[test]
    fn cumulative_vectors_accumulate() {
        let recs: Vec<_> = (0..4).map(|i| rec(0, i < 2)).collect();
        let v = cumulative_vectors(&recs, 1, 2);
        assert_eq!(v, vec![vec![1.0], vec![0.5]]);
    }

    #[test]
    fn k1_is_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 8.0]];
        let m = fit_kmeans(&pts, 1, 3, KMeansInit::Random).unwrap();
        assert_eq!(m.centroids, vec![vec![2.0, 4.0]]);
    }

    #[test]
    fn too_few_distinct_vectors() {
        let pts = vec![vec![0.5, 0.5]; 10];
        assert!(matches!(
            fit_kmeans(&pts, 2, 0, KMeansInit::Random),
            Err(Error::TooFewVectors { k: 2, found: 1 })
        ));
    }

    #[test]
    fn assign_profile_rules() {
        let model = AbilityModel {
            centroids: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            iterations: 0,
            objective_trace: vec![],
        };
        assert_eq!(assign_profile(&model, &[1.0, 1.0]).unwrap(), 3);
        assert_eq!(assign_profile(&model, &[0.5, 0.5]).unwrap(), 2);
        assert!(assign_profile(&model, &[0.5]).is_err());
    }

    #[test]
    fn short_student_stays_initial() {
        let model = AbilityModel {
            centroids: vec![vec![0.0], vec![1.0]],
            iterations: 0,
            objective_trace: vec![],
        };
        let recs: Vec<_> = (0..15).map(|_| rec(0, true)).collect();
        assert_eq!(interval_labels(&model, &recs, 1, 20).unwrap(), vec![1]);
        let recs: Vec<_> = (0..40).map(|_| rec(0, true)).collect();
        assert_eq!(interval_labels(&model, &recs, 1, 20).unwrap(), vec![1, 3]);
    }

    #[test]
    fn farthest_point_init_runs() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i % 5) as f64, (i / 5) as f64])
            .collect();
        let a = fit_kmeans(&pts, 3, 9, KMeansInit::FarthestPoint).unwrap();
        let b = fit_kmeans(&pts, 3, 9, KMeansInit::FarthestPoint).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.k(), 3);
    }
}
