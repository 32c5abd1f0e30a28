mod common;

use common::rng;
use moscode::linalg::{log_softmax_in_place, Mat};
use moscode::mos::{
    bottleneck_report, fit_output_layer, mos_component_probs, mos_probs, numerical_rank, softmax_probs,
    synthetic_truth, BottleneckConfig, BottleneckReport, FitConfig, LogProbMatrix, MosParams, OutputModel,
};
use moscode::Parallelism;
use proptest::prelude::*;
use rand::Rng;

fn gaussianish(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = rng(seed);
    Mat::from_fn(rows, cols, |_, _| r.random_range(-2.0..2.0))
}

fn product(h: &Mat, w: &Mat) -> Mat {
    Mat::from_fn(h.rows, w.rows, |i, j| {
        (0..h.cols).map(|k| h.get(i, k) * w.get(j, k)).sum()
    })
}

#[test]
fn factorization_rank_is_bounded_by_dimension() {
    for seed in 0..50 {
        let d = 1 + (seed % 5) as usize;
        let hw = product(&gaussianish(20, d, seed), &gaussianish(15, d, seed + 100));
        assert!(numerical_rank(&hw, 1e-9) <= d, "seed {seed}");
        assert_eq!(numerical_rank(&hw, 1e-9), d);
    }
}

#[test]
fn row_centred_log_softmax_rank_is_at_most_d_plus_one() {
    for seed in 0..100 {
        let d = 2;
        let mut a = product(&gaussianish(16, d, seed), &gaussianish(16, d, seed + 1000));
        for i in 0..a.rows {
            let row = a.row_mut(i);
            log_softmax_in_place(row);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter_mut().for_each(|x| *x -= mean);
        }
        assert!(numerical_rank(&a, 1e-9) <= d + 1, "seed {seed}");
    }
}

#[test]
fn realizable_truth_is_fit_by_single_softmax() {
    for inst in 0..3 {
        let mut logits = product(&gaussianish(10, 2, 2 * inst + 1), &gaussianish(8, 2, 2 * inst + 2));
        for i in 0..logits.rows {
            log_softmax_in_place(logits.row_mut(i));
        }
        let truth = LogProbMatrix::new(logits).unwrap();
        // Two-dimensional fits have poor local minima; restarts escape them.
        let cfg = FitConfig {
            d: 2,
            d_context: 2,
            iters: 20_000,
            lr: 0.02,
            seed: 0,
            restarts: 3,
        };
        let fit = fit_output_layer(OutputModel::Single, &truth, &cfg).unwrap();
        assert!(fit.mean_kl < 1e-3, "instance {inst}: {}", fit.mean_kl);
    }
}

#[test]
fn identical_rows_are_fit_in_one_dimension() {
    let row: Vec<f64> = (0..6).map(|j| j as f64 * 0.3).collect();
    let truth = LogProbMatrix::from_logits(Mat::from_fn(5, 6, |_, j| row[j])).unwrap();
    let cfg = FitConfig {
        d: 1,
        d_context: 4,
        iters: 5000,
        lr: 0.02,
        seed: 4,
        restarts: 1,
    };
    for model in [OutputModel::Single, OutputModel::Mos { mixtures: 3 }] {
        let fit = fit_output_layer(model, &truth, &cfg).unwrap();
        assert!(fit.mean_kl < 1e-3, "{model:?}: {}", fit.mean_kl);
    }
}

#[test]
fn bottleneck_separates_single_softmax_from_mixture() {
    let report = bottleneck_report(&BottleneckConfig::default()).unwrap();
    let mut wins = 0;
    for pair in report.records.chunks(2) {
        let (single, mos) = (&pair[0], &pair[1]);
        assert_eq!((single.mixtures, mos.mixtures), (1, 4));
        assert!(single.rank <= 3, "{single}");
        assert!(mos.rank > 3, "{mos}");
        if single.kl > 5.0 * mos.kl {
            wins += 1;
        }
    }
    assert!(wins >= 8, "{wins}/10 seeds\n{}", report.to_text());
}

#[test]
fn sufficient_dimension_closes_the_gap() {
    let cfg = BottleneckConfig {
        d: 4,
        truth_rank: 3,
        n: 10,
        v_out: 10,
        seeds: vec![0, 1, 2],
        iters: 5000,
        restarts: 1,
        ..BottleneckConfig::default()
    };
    let report = bottleneck_report(&cfg).unwrap();
    for pair in report.records.chunks(2) {
        let (a, b) = (pair[0].kl, pair[1].kl);
        // Both converge; compare against a floor so two tiny values pass.
        let floor = 1e-3;
        assert!(
            a.max(floor) <= 2.0 * b.max(floor) && b.max(floor) <= 2.0 * a.max(floor),
            "{a} vs {b}"
        );
    }
}

#[test]
fn report_is_deterministic_and_round_trips() {
    let cfg = BottleneckConfig {
        seeds: vec![3, 4],
        iters: 200,
        restarts: 2,
        mode: Parallelism::Sequential,
        ..BottleneckConfig::default()
    };
    let a = bottleneck_report(&cfg).unwrap();
    let b = bottleneck_report(&BottleneckConfig {
        mode: Parallelism::available(),
        ..cfg
    })
    .unwrap();
    assert_eq!(a, b);
    let text = a.to_text();
    let back = BottleneckReport::parse(&text).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_text(), text);
}

#[test]
fn synthetic_truth_has_requested_structure() {
    for seed in 0..10 {
        let t = synthetic_truth(16, 16, 8, seed);
        // Log-softmax adds a rank-one shift to the rank-8 logits.
        let r = numerical_rank(t.matrix(), 1e-9);
        assert!((8..=9).contains(&r), "{r}");
    }
}

fn random_params(m: usize, v: usize, d: usize, seed: u64) -> MosParams {
    MosParams::new(
        gaussianish(v, d, seed),
        (0..m).map(|k| gaussianish(d, d, seed * 31 + k as u64 + 1)).collect(),
        gaussianish(m, d, seed + 7),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn mixture_outputs_are_convex_combinations(seed in 0u64..10_000, m in 1usize..5) {
        let p = random_params(m, 7, 3, seed);
        let g: Vec<f64> = gaussianish(1, 3, seed ^ 0xabc).data;
        let out = mos_probs(&g, &p).unwrap();
        let comps = mos_component_probs(&g, &p).unwrap();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for j in 0..out.len() {
            let lo = comps.iter().map(|c| c[j]).fold(f64::INFINITY, f64::min);
            let hi = comps.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[j] >= lo - 1e-15 && out[j] <= hi + 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(seed in 0u64..10_000, c in -100.0f64..100.0) {
        let w = gaussianish(9, 3, seed);
        let h: Vec<f64> = gaussianish(1, 3, seed + 1).data;
        let p = softmax_probs(&h, &w).unwrap();
        // Shift every logit by c via an extra constant feature.
        let w1 = Mat::from_fn(9, 4, |i, k| if k < 3 { w.get(i, k) } else { 1.0 });
        let h1: Vec<f64> = h.iter().copied().chain([c]).collect();
        let q = softmax_probs(&h1, &w1).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }
}
