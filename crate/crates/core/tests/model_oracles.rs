mod common;

use std::collections::BTreeSet;

use bktlstm::bkt::{fit_all, fit_skill, mastery_features, BktParams, GridSpec};
use bktlstm::dataset::{split_folds, Dataset};
use bktlstm::difficulty::{DifficultyTable, MIN_SUPPORT};
use bktlstm::eval::{fold_features, PipelineConfig};
use bktlstm::features::{build_sequences, Encoder, FeatureMask};
use bktlstm::predictor::{predict, CellKind, RnnModel};
use bktlstm::profile::{
    fit_kmeans, fit_profiles, nearest, performance_vector, profile_sequence, KMeansInit,
    INITIAL_LABEL,
};
use bktlstm::synth::{generate, SynthConfig};
use common::{dataset, hmm_log_likelihood, spearman};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn coarse_grid() -> GridSpec {
    GridSpec {
        step: 0.2,
        min: 0.05,
        max: 0.95,
        g_max: 0.3,
        s_max: 0.3,
    }
}

#[test]
fn grid_fit_matches_exhaustive_hmm_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seqs: Vec<Vec<bool>> = (0..25)
        .map(|_| {
            let n = rng.gen_range(1..15);
            let mut known = rng.gen_bool(0.4);
            (0..n)
                .map(|_| {
                    let r = rng.gen_bool(if known { 0.85 } else { 0.25 });
                    known |= rng.gen_bool(0.2);
                    r
                })
                .collect()
        })
        .collect();
    let axis = [0.05, 0.25, 0.45, 0.65, 0.85];
    let mut scored = Vec::new();
    for g in [0.05, 0.25] {
        for s in [0.05, 0.25] {
            for t in axis {
                for l0 in axis {
                    let ll: f64 = seqs
                        .iter()
                        .map(|q| hmm_log_likelihood(l0, t, g, s, q))
                        .sum();
                    scored.push(((l0, t, g, s), ll));
                }
            }
        }
    }
    let best =
        scored.iter().cloned().fold(
            None,
            |acc: Option<((f64, f64, f64, f64), f64)>, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            },
        );
    let ((l0, t, g, s), ll) = best.unwrap();
    let fit = fit_skill(0, &seqs, &coarse_grid()).unwrap();
    assert_eq!(
        (fit.params.l0, fit.params.t, fit.params.g, fit.params.s),
        (l0, t, g, s)
    );
    assert!((fit.train_log_likelihood - ll).abs() < 1e-9);
}

#[test]
fn all_incorrect_sequence_pushes_prior_and_guess_down() {
    let fit = fit_skill(0, &[vec![false; 12]], &GridSpec::default()).unwrap();
    assert_eq!(fit.params.l0, 0.05);
    assert_eq!(fit.params.g, 0.05);
}

#[test]
fn run_sequence_matches_hmm_predictions() {
    let p = BktParams::new(0.3, 0.2, 0.15, 0.1).unwrap();
    let outcomes = [true, false, false, true, true, false, true];
    let (_, predicted) = p.run_sequence(&outcomes).unwrap();
    for n in 0..outcomes.len() {
        let before = hmm_log_likelihood(0.3, 0.2, 0.15, 0.1, &outcomes[..n]);
        let with_correct = {
            let mut o = outcomes[..n].to_vec();
            o.push(true);
            hmm_log_likelihood(0.3, 0.2, 0.15, 0.1, &o)
        };
        assert!(((with_correct - before).exp() - predicted[n]).abs() < 1e-12);
    }
}

#[test]
fn mastery_features_thread_the_two_step_chain() {
    let d = dataset("a,p1,k,1,1\na,p2,k,1,2\n");
    let report = fit_all(&d, &GridSpec::default()).unwrap();
    let p = report.params(0);
    let m = mastery_features(&d, &report);
    assert_eq!(m[0][0], p.l0);
    assert!((m[0][1] - p.advance(p.l0, true)).abs() < 1e-15);
}

fn brute_force_two_means(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << n) - 1 {
        let mut sse = 0.0;
        for side in [true, false] {
            let members: Vec<&[f64; 2]> = (0..n)
                .filter(|&i| (mask >> i & 1 == 1) == side)
                .map(|i| &points[i])
                .collect();
            let c =
                [0, 1].map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64);
            sse += members
                .iter()
                .map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
                .sum::<f64>();
        }
        best = best.min(sse);
    }
    best
}

#[test]
fn two_separated_groups_recover_group_means() {
    let points = [
        [0.1, 0.2],
        [0.15, 0.1],
        [0.2, 0.25],
        [0.05, 0.15],
        [0.9, 0.8],
        [0.85, 0.95],
        [0.8, 0.85],
    ];
    let vectors: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    for init in [KMeansInit::Random, KMeansInit::FarthestPoint] {
        for seed in 0..5 {
            let model = fit_kmeans(&vectors, 2, seed, init).unwrap();
            assert!(
                (model.objective_trace.last().unwrap() - brute_force_two_means(&points)).abs()
                    < 1e-12
            );
            let low = [
                (0.1 + 0.15 + 0.2 + 0.05) / 4.0,
                (0.2 + 0.1 + 0.25 + 0.15) / 4.0,
            ];
            let high = [(0.9 + 0.85 + 0.8) / 3.0, (0.8 + 0.95 + 0.85) / 3.0];
            for (c, want) in model.centroids.iter().zip([low, high]) {
                assert!((c[0] - want[0]).abs() < 1e-12 && (c[1] - want[1]).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_contracts(
        raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 8..40),
        k in 1usize..6,
        seed in 0u64..1000,
    ) {
        let model = fit_kmeans(&raw, k, seed, KMeansInit::Random).unwrap();
        for w in model.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        let mut sse = 0.0;
        for p in &raw {
            let (i, d) = nearest(&model.centroids, p);
            let scan: Vec<f64> = model.centroids.iter().map(|c| c.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let min = scan.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(d, scan[i]);
            prop_assert_eq!(scan.iter().position(|&x| x == min), Some(i));
            sse += d;
        }
        prop_assert!((sse - model.objective_trace.last().unwrap()).abs() < 1e-9);
        let mut shuffled = raw.clone();
        shuffled.reverse();
        prop_assert_eq!(fit_kmeans(&shuffled, k, seed, KMeansInit::Random).unwrap(), model);
    }

    #[test]
    fn folds_partition_students(n in 5usize..60, k in 2usize..6, seed in 0u64..100) {
        let rows: String = (0..n).map(|i| format!("s{i},p,k,1,1\n")).collect();
        let d = dataset(&rows);
        let folds = split_folds(&d, k, seed).unwrap();
        let mut seen = BTreeSet::new();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test_students.len()).collect();
        for f in &folds {
            prop_assert!(f.train_students.is_disjoint(&f.test_students));
            prop_assert_eq!(f.train_students.len() + f.test_students.len(), n);
            for s in &f.test_students {
                prop_assert!(seen.insert(s.clone()));
            }
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn performance_vector_uses_success_rates() {
    let d =
        dataset("a,p1,k1,1,1\na,p2,k1,1,2\na,p3,k1,0,3\na,p4,k1,1,4\nb,p5,k0,1,1\nb,p6,k2,1,1\n");
    let k1 = d.skill_index.get("k1").unwrap();
    let v = performance_vector(&d.student("a").unwrap().records, d.n_skills());
    for (j, x) in v.iter().enumerate() {
        assert_eq!(*x, if j == k1 { 0.75 } else { 0.5 });
    }
}

#[test]
fn synthetic_difficulty_round_trip() {
    let out = generate(&SynthConfig {
        students: 500,
        attempts: 60,
        problems_per_skill: 40,
        difficulty_strength: 2.5,
        ..SynthConfig::default()
    })
    .unwrap();
    let table = DifficultyTable::compute(&out.dataset, MIN_SUPPORT);
    let (mut injected, mut computed) = (Vec::new(), Vec::new());
    for (j, &bin) in out.problem_bins.iter().enumerate() {
        if table.support.get(&j).copied().unwrap_or(0) >= MIN_SUPPORT {
            injected.push(bin as f64);
            computed.push(table.lookup(Some(j)) as f64);
        }
    }
    assert!(injected.len() > 150);
    let rho = spearman(&injected, &computed);
    assert!(rho > 0.8, "spearman {rho}");
}

fn toy_data() -> Dataset {
    generate(&SynthConfig {
        students: 60,
        attempts: 45,
        difficulty_strength: 1.5,
        ability_spread: 1.0,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset
}

fn small_config() -> PipelineConfig {
    PipelineConfig {
        grid: GridSpec::with_step(0.1),
        clusters: 3,
        ..PipelineConfig::default()
    }
}

#[test]
fn predictions_do_not_depend_on_later_responses() {
    let data = toy_data();
    let config = small_config();
    let bkt = fit_all(&data, &config.grid).unwrap();
    let ability =
        fit_profiles(&data, config.window, config.clusters, 1, KMeansInit::Random).unwrap();
    let table = DifficultyTable::compute(&data, MIN_SUPPORT);
    let encoder = Encoder::new(data.n_skills(), ability.n_labels(), FeatureMask::default());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = RnnModel::init(CellKind::Gated, encoder.dim(), 8, data.n_skills(), &mut rng);
    let run = |d: &Dataset| {
        let seqs = build_sequences(
            d,
            &mastery_features(d, &bkt),
            &profile_sequence(d, &ability, config.window).unwrap(),
            &table.bins(d),
        )
        .unwrap();
        predict(&model, &encoder.encode_sequence(&seqs[0]).unwrap()).unwrap()
    };
    let base = run(&data);
    for cut in [0, 7, 19, 20, 33] {
        let mut altered = data.clone();
        for r in &mut altered.students[0].records[cut..] {
            r.correct = !r.correct;
        }
        let p = run(&altered);
        assert_eq!(p[..=cut], base[..=cut], "cut {cut}");
        assert_ne!(p, base);
    }
}

#[test]
fn profile_labels_start_initial_and_use_past_intervals() {
    let data = toy_data();
    let ability = fit_profiles(&data, 20, 3, 1, KMeansInit::Random).unwrap();
    let labels = profile_sequence(&data, &ability, 20).unwrap();
    for (s, l) in data.students.iter().zip(&labels) {
        assert_eq!(l.len(), s.records.len());
        assert!(l[..20].iter().all(|&x| x == INITIAL_LABEL));
        assert!(l[20..].iter().all(|&x| (2..=4).contains(&x)));
        assert!(l[20..40].iter().all(|&x| x == l[20]));
    }
}

#[test]
fn fold_features_ignore_test_students() {
    let data = toy_data();
    let config = small_config();
    let ids: Vec<String> = data.student_ids().map(String::from).collect();
    let train: BTreeSet<String> = ids[..45].iter().cloned().collect();
    let test: BTreeSet<String> = ids[45..].iter().cloned().collect();
    let (tr, te) = (data.subset(&train), data.subset(&test));
    let mut flipped = te.clone();
    for s in &mut flipped.students {
        for r in &mut s.records {
            r.correct = !r.correct;
        }
    }
    let a = fold_features(&tr, &te, FeatureMask::default(), &config).unwrap();
    let b = fold_features(&tr, &flipped, FeatureMask::default(), &config).unwrap();
    assert_eq!(a.train, b.train);

    // A problem only test students saw gets the default bin.
    let table = DifficultyTable::compute(&tr, MIN_SUPPORT);
    let seen: BTreeSet<usize> = tr
        .students
        .iter()
        .flat_map(|s| s.records.iter().filter_map(|r| r.problem))
        .collect();
    for s in &te.students {
        for r in &s.records {
            if let Some(p) = r.problem.filter(|p| !seen.contains(p)) {
                assert_eq!(table.lookup(Some(p)), 5);
            }
        }
    }
}
