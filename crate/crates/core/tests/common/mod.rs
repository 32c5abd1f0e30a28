//! Independent reference implementations used as test oracles.
//!
//! Everything here is deliberately naive: recount from scratch, enumerate
//! every permutation, sort every edge. None of it shares code with the
//! library beyond the public data types.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use moscode::assign::CostMatrix;
use moscode::corpus::{Token, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vocab(pairs: &[(&str, u64)]) -> Vocabulary {
    Vocabulary::from_counts(pairs.iter().map(|(w, c)| (Token::new(*w).unwrap(), *c))).unwrap()
}

/// Random vocabulary over a small alphabet, so pairs repeat often.
pub fn random_vocab(seed: u64) -> Vocabulary {
    let mut r = rng(seed);
    let alphabet: Vec<char> = "abcde".chars().take(r.random_range(2..=5)).collect();
    let mut words = BTreeMap::new();
    let n = r.random_range(3..=25);
    while words.len() < n {
        let len = r.random_range(1..=7);
        let w: String = (0..len).map(|_| alphabet[r.random_range(0..alphabet.len())]).collect();
        words.entry(w).or_insert_with(|| r.random_range(1..=20u64));
    }
    Vocabulary::from_counts(words.into_iter().map(|(w, c)| (Token::new(w).unwrap(), c))).unwrap()
}

/// Brute-force BPE: recount every adjacent pair of every word after every
/// merge. Returns merges as (left, right).
pub fn bpe_oracle(vocab: &Vocabulary, target: usize, eow: &str) -> Vec<(String, String)> {
    let mut words: Vec<(Vec<String>, u64)> = vocab
        .entries()
        .iter()
        .map(|(w, c)| {
            let mut s: Vec<String> = w.as_str().chars().map(String::from).collect();
            s.push(eow.to_owned());
            (s, *c)
        })
        .collect();
    let alphabet: HashSet<char> = vocab.entries().iter().flat_map(|(w, _)| w.as_str().chars()).collect();
    let mut merges = Vec::new();
    while alphabet.len() + 1 + merges.len() < target {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (s, c) in &words {
            for i in 0..s.len().saturating_sub(1) {
                *counts.entry((s[i].clone(), s[i + 1].clone())).or_default() += c;
            }
        }
        // BTreeMap iterates in (left, right) order; keep the first maximum.
        let mut best: Option<(&(String, String), u64)> = None;
        for (k, &c) in &counts {
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((k, c));
            }
        }
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let pair = pair.clone();
        for (s, _) in &mut words {
            *s = apply_merge(s, &pair.0, &pair.1);
        }
        merges.push(pair);
    }
    merges
}

pub fn apply_merge(s: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        if i + 1 < s.len() && s[i] == left && s[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(s[i].clone());
            i += 1;
        }
    }
    out
}

/// Segmentation by replaying every merge in order over the whole word.
pub fn bpe_encode_oracle(word: &str, merges: &[(String, String)], eow: &str) -> Vec<String> {
    let mut s: Vec<String> = word.chars().map(String::from).collect();
    s.push(eow.to_owned());
    for (l, r) in merges {
        s = apply_merge(&s, l, r);
    }
    s
}

pub fn random_cost(n: usize, seed: u64, integer: bool) -> CostMatrix {
    let mut r = rng(seed);
    let rows = (0..n)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if integer {
                        r.random_range(0..20) as f64
                    } else {
                        r.random_range(0.0..10.0)
                    }
                })
                .collect()
        })
        .collect();
    CostMatrix::from_rows(rows).unwrap()
}

/// Minimum total cost over all n! permutations (Heap's algorithm).
pub fn brute_force_min(cost: &CostMatrix) -> f64 {
    let n = cost.n();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = cost.objective(&perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost.objective(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Classic global greedy: sort all edges by (weight desc, row, col) and take
/// every edge whose endpoints are still free.
pub fn sorted_greedy(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.n();
    let mut edges: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
    edges.sort_by(|&(r1, c1), &(r2, c2)| {
        cost.get(r1, c1)
            .total_cmp(&cost.get(r2, c2))
            .then((r1, c1).cmp(&(r2, c2)))
    });
    let mut perm = vec![usize::MAX; n];
    let mut col_used = vec![false; n];
    for (r, c) in edges {
        if perm[r] == usize::MAX && !col_used[c] {
            perm[r] = c;
            col_used[c] = true;
        }
    }
    perm
}

/// Weight of a permutation under `w = max(C) - C`.
pub fn weight(cost: &CostMatrix, perm: &[usize]) -> f64 {
    let c_max = (0..cost.n())
        .flat_map(|r| cost.row(r).iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    perm.iter().enumerate().map(|(r, &c)| c_max - cost.get(r, c)).sum()
}

/// Max relative error between an analytic gradient and central differences.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn fd_check(theta: &[f64], analytic: &[f64], eps: f64, floor: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut x = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x);
        x[i] = orig - eps;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// Zipf-like corpus of word ids `0..vocab_size` with short-range structure,
/// ids ordered by decreasing expected frequency.
pub fn zipf_corpus(vocab_size: usize, sentences: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng(seed);
    let weights: Vec<f64> = (0..vocab_size).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let total: f64 = weights.iter().sum();
    let draw = |r: &mut ChaCha8Rng| {
        let mut u = r.random_range(0.0..total);
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        vocab_size - 1
    };
    (0..sentences)
        .map(|_| {
            let len = r.random_range(2..=8);
            let mut s = Vec::with_capacity(len);
            while s.len() < len {
                let w = draw(&mut r);
                s.push(w);
                // Fixed successor relation gives the model something to learn.
                if s.len() < len && w % 3 == 0 {
                    s.push((w * 7 + 1) % vocab_size);
                }
            }
            s
        })
        .collect()
}
