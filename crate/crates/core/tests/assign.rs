mod common;

use common::{brute_force_min, random_cost, sorted_greedy, weight, zipf_corpus};
use moscode::assign::{
    build_cost_matrix, solve_exact, solve_greedy, solve_greedy_counted, train_hybrid_lightrnn, CostMatrix,
    HybridConfig, DEFAULT_EXACT_CAP,
};
use moscode::codelm::{CodeLmParams, TrainConfig};
use moscode::codetable::{corpus_log_likelihood, word_nll_contributions, CodeTable, UniformModel};
use moscode::{Error, Parallelism};
use proptest::prelude::*;

#[test]
fn exact_matches_brute_force_for_small_n() {
    for seed in 0..500u64 {
        let n = 1 + (seed % 7) as usize;
        let cost = random_cost(n, seed, seed % 2 == 0);
        let a = solve_exact(&cost).unwrap();
        assert!(a.is_permutation());
        assert!((a.objective - cost.objective(&a.perm)).abs() < 1e-9);
        let best = brute_force_min(&cost);
        assert!(
            (a.objective - best).abs() < 1e-9,
            "seed {seed} n {n}: {} vs {best}",
            a.objective
        );
    }
}

#[test]
fn five_by_five_integer_instance() {
    let cost = random_cost(5, 12345, true);
    assert_eq!(solve_exact(&cost).unwrap().objective, brute_force_min(&cost));
}

#[test]
fn greedy_is_half_approximate() {
    for seed in 0..1000u64 {
        let cost = random_cost(6, seed, false);
        let g = solve_greedy(&cost);
        let e = solve_exact(&cost).unwrap();
        assert!(g.is_permutation());
        assert!(
            weight(&cost, &g.perm) >= 0.5 * weight(&cost, &e.perm) - 1e-9,
            "seed {seed}"
        );
    }
}

#[test]
fn greedy_equals_sorted_edge_greedy() {
    for seed in 0..300u64 {
        let n = 1 + (seed % 40) as usize;
        // Integer costs force many weight ties.
        let cost = random_cost(n, seed, seed % 3 != 0);
        assert_eq!(solve_greedy(&cost).perm, sorted_greedy(&cost), "seed {seed} n {n}");
    }
}

#[test]
fn greedy_inspections_stay_within_budget() {
    let n = 2000;
    let cost = random_cost(n, 7, false);
    let out = solve_greedy_counted(&cost);
    assert!(out.assignment.is_permutation());
    let budget = 3 * (n as u64) * (n as u64);
    assert!(out.inspections <= budget, "{} inspections", out.inspections);
}

#[test]
fn exact_refuses_oversized_problems() {
    let cost = random_cost(DEFAULT_EXACT_CAP + 1, 0, false);
    assert!(matches!(solve_exact(&cost), Err(Error::Size { .. })));
}

/// Sum of the transport objective under the current placement and the
/// codes of words outside the transport problem.
fn identity_transport_total(lm: &CodeLmParams, table: &CodeTable, corpus: &[Vec<usize>]) -> (f64, f64) {
    let cost = build_cost_matrix(lm, table, corpus, Parallelism::Sequential).unwrap();
    let ot = cost.objective(&cost.identity_perm(table));
    let contrib = word_nll_contributions(table, lm, corpus, Parallelism::Sequential).unwrap();
    let outside: f64 = contrib[..table.k_freq()].iter().sum::<f64>() + contrib[table.unk_id()];
    (ot + outside, corpus_log_likelihood(table, lm, corpus).unwrap())
}

#[test]
fn identity_transport_equals_corpus_nll() {
    for seed in 0..10u64 {
        let v = 30 + 5 * seed as usize;
        let corpus = zipf_corpus(v + 1, 40, seed);
        let table = CodeTable::init(v, 4 + seed as usize, 9, 9).unwrap();
        let lm = CodeLmParams::init(table.n_codes(), 4, 5, seed);
        let (ot, nll) = identity_transport_total(&lm, &table, &corpus);
        assert!((ot - nll).abs() <= 1e-6 * nll, "seed {seed}: {ot} vs {nll}");
    }
}

fn hybrid_cfg(k_freq: usize, d: usize, rounds: usize, lr: f64) -> HybridConfig {
    HybridConfig {
        k_freq,
        d1: d,
        d2: d,
        d_emb: 8,
        d_hid: 16,
        train: TrainConfig {
            learning_rate: lr,
            epochs: 2,
            batch_size: 16,
            clip_norm: 5.0,
            seed: 3,
        },
        rounds,
        exact_cap: DEFAULT_EXACT_CAP,
        mode: Parallelism::available(),
    }
}

#[test]
fn alternating_loop_never_increases_transport_objective() {
    let corpus = zipf_corpus(201, 300, 42);
    let cfg = hybrid_cfg(20, 14, 3, 0.3);
    let out = train_hybrid_lightrnn(&corpus, 200, &cfg).unwrap();
    assert_eq!(out.trace.len(), 3);
    for r in &out.trace {
        assert!(r.ot_after <= r.ot_before, "{r:?}");
        assert!(r.nll_before.is_finite() && r.nll_after.is_finite());
    }
    let init = CodeTable::init(200, 20, 14, 14).unwrap();
    for w in 0..20 {
        assert_eq!(out.table.encode_word(w).unwrap(), init.encode_word(w).unwrap());
    }
    assert_eq!(out.table.cell_of(200), init.cell_of(200));
}

#[test]
fn greedy_rounds_never_increase_transport_objective() {
    let corpus = zipf_corpus(201, 200, 9);
    let mut cfg = hybrid_cfg(20, 14, 2, 0.3);
    cfg.exact_cap = 10;
    let out = train_hybrid_lightrnn(&corpus, 200, &cfg).unwrap();
    for r in &out.trace {
        assert!(r.ot_after <= r.ot_before, "{r:?}");
    }
}

#[test]
fn frozen_model_round_does_not_increase_transport_objective() {
    let corpus = zipf_corpus(61, 80, 5);
    let cfg = hybrid_cfg(10, 8, 1, 0.0);
    let out = train_hybrid_lightrnn(&corpus, 60, &cfg).unwrap();
    let r = &out.trace[0];
    assert!(r.ot_after <= r.ot_before);
    // Under the frozen model the initial placement's objective is the
    // identity-transport value.
    let init = CodeTable::init(60, 10, 8, 8).unwrap();
    let lm0 = CodeLmParams::init(init.n_codes(), cfg.d_emb, cfg.d_hid, cfg.train.seed);
    assert_eq!(out.lm, lm0);
    let cost = build_cost_matrix(&lm0, &init, &corpus, Parallelism::Sequential).unwrap();
    assert!((cost.objective(&cost.identity_perm(&init)) - r.ot_before).abs() <= 1e-9 * r.ot_before);
}

#[test]
fn all_frequent_vocabulary_keeps_initial_table() {
    let corpus = zipf_corpus(31, 40, 1);
    let cfg = hybrid_cfg(30, 1, 2, 0.3);
    let out = train_hybrid_lightrnn(&corpus, 30, &cfg).unwrap();
    assert_eq!(out.table, CodeTable::init(30, 30, 1, 1).unwrap());
    assert!(!out.lm_history.is_empty());
    let frozen = CodeLmParams::init(out.table.n_codes(), cfg.d_emb, cfg.d_hid, cfg.train.seed);
    assert_ne!(out.lm, frozen);
}

#[test]
fn zero_rounds_rejected() {
    let cfg = hybrid_cfg(2, 2, 0, 0.1);
    assert!(matches!(
        train_hybrid_lightrnn(&[vec![0]], 4, &cfg),
        Err(Error::Argument(_))
    ));
}

#[test]
fn hybrid_is_deterministic_across_modes() {
    let corpus = zipf_corpus(81, 60, 2);
    let mut cfg = hybrid_cfg(8, 9, 2, 0.3);
    cfg.mode = Parallelism::Sequential;
    let a = train_hybrid_lightrnn(&corpus, 80, &cfg).unwrap();
    cfg.mode = Parallelism::available();
    let b = train_hybrid_lightrnn(&corpus, 80, &cfg).unwrap();
    assert_eq!(a.table, b.table);
    assert_eq!(a.lm, b.lm);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn uniform_costs_scale_with_occurrences() {
    let table = CodeTable::init(20, 3, 5, 4).unwrap();
    let corpus = zipf_corpus(21, 30, 4);
    let cost = build_cost_matrix(&UniformModel(table.n_codes()), &table, &corpus, Parallelism::Sequential).unwrap();
    let ln = (table.n_codes() as f64).ln();
    for (r, w) in cost.row_words().iter().enumerate() {
        let m = w.map_or(0, |w| corpus.iter().flatten().filter(|&&x| x == w).count());
        assert!(cost.row(r).iter().all(|&x| (x - 2.0 * m as f64 * ln).abs() < 1e-9));
    }
}

proptest! {
    #[test]
    fn solvers_return_permutations(n in 0usize..30, seed in 0u64..10_000) {
        let cost = random_cost(n, seed, seed % 2 == 0);
        let e = solve_exact(&cost).unwrap();
        let g = solve_greedy(&cost);
        prop_assert!(e.is_permutation() && g.is_permutation());
        prop_assert_eq!(e.perm.len(), n);
        prop_assert!(e.objective <= g.objective + 1e-9);
        let id: Vec<usize> = (0..n).collect();
        prop_assert!(e.objective <= cost.objective(&id) + 1e-9);
    }

    #[test]
    fn exact_is_shift_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        let cost = random_cost(6, seed, false);
        let rows: Vec<Vec<f64>> = (0..6).map(|r| cost.row(r).iter().map(|x| x + shift).collect()).collect();
        let shifted = CostMatrix::from_rows(rows).unwrap();
        let a = solve_exact(&cost).unwrap();
        let b = solve_exact(&shifted).unwrap();
        prop_assert!((b.objective - a.objective - 6.0 * shift).abs() < 1e-8);
    }
}
