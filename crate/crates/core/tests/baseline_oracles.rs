mod common;

use bktlstm::baselines::{build_dkt_input, fit_birt, fit_pfa, PfaOptions};
use bktlstm::bkt::GridSpec;
use bktlstm::eval::{
    auc, cross_validate, render_rows, render_text, ModelSpec, PipelineConfig, PredictionSet,
};
use bktlstm::predictor::{predict, train, RnnConfig};
use bktlstm::synth::{generate, SynthConfig};
use common::dataset;

#[test]
fn balanced_items_have_zero_difficulty() {
    let mut rows = String::new();
    for i in 0..40 {
        for j in 0..4 {
            rows += &format!("s{i:02},p{j},k,{},{}\n", u8::from((i + j) % 2 == 0), j + 1);
        }
    }
    let (model, report) = fit_birt(&dataset(&rows)).unwrap();
    assert!(report.converged);
    assert!(
        model.beta.iter().all(|b| b.abs() < 0.05),
        "{:?}",
        model.beta
    );
    for w in report.objective_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-12);
    }
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Solves the penalised logistic regression by plain Newton with a dense
/// Hessian. Columns: one per item, then successes, then failures.
fn newton_logistic(x: &[Vec<f64>], y: &[bool], l2: f64) -> Vec<f64> {
    let (n, dim) = (x.len() as f64, x[0].len());
    let mut w = vec![0.0; dim];
    for _ in 0..50 {
        let mut g: Vec<f64> = w.iter().map(|wi| -l2 * wi).collect();
        let mut h = vec![vec![0.0; dim]; dim];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = l2;
        }
        for (row, &r) in x.iter().zip(y) {
            let p = sig(row.iter().zip(&w).map(|(a, b)| a * b).sum());
            let resid = f64::from(u8::from(r)) - p;
            for a in 0..dim {
                g[a] += resid * row[a] / n;
                for b in 0..dim {
                    h[a][b] += p * (1.0 - p) * row[a] * row[b] / n;
                }
            }
        }
        // Gaussian elimination of h * delta = g.
        let mut m: Vec<Vec<f64>> = h
            .into_iter()
            .zip(&g)
            .map(|(mut r, gi)| {
                r.push(*gi);
                r
            })
            .collect();
        for c in 0..dim {
            let pivot = (c..dim)
                .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
                .unwrap();
            m.swap(c, pivot);
            for r in 0..dim {
                if r != c {
                    let f = m[r][c] / m[c][c];
                    for k in c..=dim {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
        for a in 0..dim {
            w[a] += m[a][dim] / m[a][a];
        }
    }
    w
}

#[test]
fn pfa_matches_newton_solution() {
    let rows = "a,p1,k,0,1\na,p2,k,0,2\na,p1,k,1,3\na,p3,k,1,4\na,p2,k,1,5\n\
                b,p2,k,1,1\nb,p3,k,1,2\nb,p1,k,0,3\nb,p2,k,1,4\n\
                c,p3,k,0,1\nc,p1,k,0,2\nc,p2,k,0,3\nc,p3,k,1,4\nc,p1,k,1,5\nc,p2,k,1,6\n\
                d,p1,k,1,1\nd,p3,k,0,2\nd,p2,k,1,3\n";
    let d = dataset(rows);
    // Design rows built from scratch: counts strictly before each attempt.
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for s in &d.students {
        let (mut succ, mut fail) = (0.0, 0.0);
        for r in &s.records {
            let mut row = vec![0.0; d.n_problems() + 2];
            row[r.problem.unwrap()] = 1.0;
            row[d.n_problems()] = succ;
            row[d.n_problems() + 1] = fail;
            x.push(row);
            y.push(r.correct);
            if r.correct {
                succ += 1.0;
            } else {
                fail += 1.0;
            }
        }
    }
    let options = PfaOptions::default();
    let oracle = newton_logistic(&x, &y, options.l2);
    let (model, report) = fit_pfa(&d, &options).unwrap();
    assert!(report.converged);
    for w in report.objective_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-12);
    }
    let fitted: Vec<f64> = model
        .beta
        .iter()
        .chain(&model.gamma)
        .chain(&model.rho)
        .copied()
        .collect();
    for (a, b) in fitted.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-3, "{fitted:?} vs {oracle:?}");
    }
}

#[test]
fn dkt_overfits_a_toy_set() {
    // Student i answers skill k correctly iff i + k is even: the first
    // answer reveals the pattern for the rest.
    let mut rows = String::new();
    for i in 0..5 {
        for t in 0..30 {
            let k = (t * 7 + i) % 3;
            rows += &format!(
                "s{i},p{t}_{k},k{k},{},{}\n",
                u8::from((i + k) % 2 == 0),
                t + 1
            );
        }
    }
    let d = dataset(&rows);
    let seqs = build_dkt_input(&d);
    let config = RnnConfig {
        hidden_size: 16,
        epochs: 100,
        learning_rate: 1.0,
        batch_size: 5,
        dropout_rate: 0.0,
        ..RnnConfig::default()
    };
    let (model, _) = train(&config, d.n_skills(), &seqs, &[]).unwrap();
    let mut preds = PredictionSet::default();
    for s in &seqs {
        for (p, &r) in predict(&model, s).unwrap().iter().zip(&s.targets) {
            preds.push(*p, r);
        }
    }
    let a = auc(&preds).unwrap();
    assert!(a > 0.9, "training AUC {a}");
}

#[test]
fn all_models_report_on_a_small_subsample() {
    let data = generate(&SynthConfig {
        students: 200,
        attempts: 30,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset;
    let config = PipelineConfig {
        grid: GridSpec::with_step(0.1),
        clusters: 3,
        rnn: RnnConfig {
            hidden_size: 8,
            epochs: 2,
            learning_rate: 0.5,
            ..RnnConfig::default()
        },
        ..PipelineConfig::default()
    };
    let reports: Vec<_> = ModelSpec::parse("all")
        .unwrap()
        .into_iter()
        .map(|s| cross_validate(&data, s, &config).unwrap())
        .collect();
    assert_eq!(reports.len(), 5);
    let text = render_text(&reports);
    for name in ["BKT-LSTM", "BKT", "BIRT", "PFA", "DKT"] {
        assert!(
            text.lines()
                .any(|l| l.split_whitespace().next() == Some(name)),
            "{name}"
        );
    }
    let rows = render_rows(&reports);
    assert_eq!(rows.lines().filter(|l| l.contains(",mean,auc,")).count(), 6);
    for r in &reports {
        assert!(r.folds.iter().all(|f| f.error.is_none()));
        assert!(r.mean.auc.unwrap() > 0.5, "{}", r.model);
    }
}
