#![allow(dead_code)]

use bktlstm::dataset::{load_interactions, ColumnMap, Dataset};

/// Dataset from canonical CSV rows (no header).
pub fn dataset(rows: &str) -> Dataset {
    let text = format!("student_id,problem_id,skill_id,correct,order\n{rows}");
    load_interactions(text.as_bytes(), &ColumnMap::canonical())
        .unwrap()
        .0
}

/// Exhaustive pairwise AUC: (concordant + ties/2) / (pos * neg).
pub fn pairwise_auc(pairs: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = pairs.iter().filter(|p| p.1).map(|p| p.0).collect();
    let neg: Vec<f64> = pairs.iter().filter(|p| !p.1).map(|p| p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut score = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                score += 1.0;
            } else if p == n {
                score += 0.5;
            }
        }
    }
    Some(score / (pos.len() * neg.len()) as f64)
}

fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&midranks(a), &midranks(b))
}

/// Log-likelihood of one binary sequence under a two-state HMM, by the
/// forward algorithm over (unlearned, learned).
pub fn hmm_log_likelihood(l0: f64, t: f64, g: f64, s: f64, outcomes: &[bool]) -> f64 {
    let mut alpha = [1.0 - l0, l0];
    let mut ll = 0.0;
    for &o in outcomes {
        let emit = if o { [g, 1.0 - s] } else { [1.0 - g, s] };
        let joint = [alpha[0] * emit[0], alpha[1] * emit[1]];
        let total = joint[0] + joint[1];
        ll += total.max(1e-9).ln();
        let post = [joint[0] / total, joint[1] / total];
        alpha = [post[0] * (1.0 - t), post[1] + post[0] * t];
    }
    ll
}
