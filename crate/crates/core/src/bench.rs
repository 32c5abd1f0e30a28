//! Time and memory scaling of softmax / mixture-of-softmaxes output layers.
//!
//! Memory is accounted analytically from tensor shapes: the output embedding
//! (`n × d`), the logits of every component (`M × batch × n`) and the
//! component probabilities (`M × batch × n`). The mixture is reduced into
//! the first component's probability tensor, so no other tensor is needed.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::linalg::{dot, softmax_in_place};

const F64_BYTES: u64 = std::mem::size_of::<f64>() as u64;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub batch: usize,
    pub d: usize,
    pub sizes: Vec<usize>,
    pub mixtures: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Fan out over batch rows. Acceptance timings use `Sequential`.
    pub mode: Parallelism,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            batch: 32,
            d: 64,
            sizes: vec![10_000, 30_000],
            mixtures: vec![3],
            reps: 5,
            warmup: 1,
            seed: 0,
            mode: Parallelism::Sequential,
        }
    }
}

impl BenchSpec {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.d == 0 || self.warmup == 0 {
            return Err(Error::arg("batch, dimension and warmup must be positive"));
        }
        if self.reps < 3 {
            return Err(Error::arg("at least 3 repetitions are required"));
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) || self.mixtures.is_empty() || self.mixtures.contains(&0) {
            return Err(Error::arg(
                "output sizes and mixture counts must be nonempty and positive",
            ));
        }
        Ok(())
    }
}

/// Bytes held by each tensor of an output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryAccount {
    pub embedding: u64,
    pub logits: u64,
    pub probabilities: u64,
}

impl MemoryAccount {
    pub fn new(n: usize, d: usize, batch: usize, mixtures: usize) -> Self {
        let (n, d, b, m) = (n as u64, d as u64, batch as u64, mixtures as u64);
        MemoryAccount {
            embedding: n * d * F64_BYTES,
            logits: m * b * n * F64_BYTES,
            probabilities: m * b * n * F64_BYTES,
        }
    }

    pub fn total(&self) -> u64 {
        self.embedding + self.logits + self.probabilities
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub n: usize,
    pub mixtures: usize,
    pub batch: usize,
    pub d: usize,
    pub median_ms: f64,
    pub memory: MemoryAccount,
    /// Slowest over fastest repetition.
    pub spread: f64,
    /// Deterministic digest of the computed distributions.
    pub checksum: f64,
}

impl BenchResult {
    pub fn config(&self) -> String {
        format!("n={}/m={}/b={}/d={}", self.n, self.mixtures, self.batch, self.d)
    }
}

impl fmt::Display for BenchResult {
    /// `config<TAB>median_ms<TAB>bytes<TAB>spread`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.4}\t{}\t{:.4}",
            self.config(),
            self.median_ms,
            self.memory.total(),
            self.spread
        )
    }
}

/// Buffers and parameters for one (n, M) configuration.
struct Layer {
    n: usize,
    d: usize,
    m: usize,
    w: Vec<f64>,
    /// Context vectors, `batch × M × d`.
    hidden: Vec<f64>,
    /// Mixture weights, `batch × M`.
    priors: Vec<f64>,
    /// Per batch row: `M` logit rows then `M` probability rows.
    work: Vec<f64>,
}

fn alloc(len: usize, what: &str) -> Result<Vec<f64>> {
    let mut v = Vec::new();
    v.try_reserve_exact(len).map_err(|_| Error::Resource(what.to_owned()))?;
    v.resize(len, 0.0);
    Ok(v)
}

impl Layer {
    fn new(n: usize, m: usize, spec: &BenchSpec) -> Result<Self> {
        let name = format!("n={n}/m={m}/b={}/d={}", spec.batch, spec.d);
        let d = spec.d;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((n as u64) << 20) ^ m as u64);
        let scale = 1.0 / (d as f64).sqrt();
        let len = |a: usize, b: usize| a.checked_mul(b).ok_or_else(|| Error::Resource(name.clone()));
        let mut w = alloc(len(n, d)?, &name)?;
        w.iter_mut().for_each(|x| *x = rng.random_range(-scale..scale));
        let mut hidden = alloc(len(spec.batch * m, d)?, &name)?;
        hidden.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let mut priors = alloc(spec.batch * m, &name)?;
        for row in priors.chunks_mut(m) {
            row.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            softmax_in_place(row);
        }
        let work = alloc(len(spec.batch, len(2 * m, n)?)?, &name)?;
        Ok(Layer {
            n,
            d,
            m,
            w,
            hidden,
            priors,
            work,
        })
    }

    fn forward(&mut self, mode: Parallelism) {
        let (n, d, m) = (self.n, self.d, self.m);
        let w = &self.w;
        let hidden = &self.hidden;
        let priors = &self.priors;
        exec::for_each_chunk_mut(&mut self.work, 2 * m * n, mode, |b, row| {
            let (logits, probs) = row.split_at_mut(m * n);
            for k in 0..m {
                let h = &hidden[(b * m + k) * d..(b * m + k + 1) * d];
                let z = &mut logits[k * n..(k + 1) * n];
                for (zj, wj) in z.iter_mut().zip(w.chunks_exact(d)) {
                    *zj = dot(wj, h);
                }
                let p = &mut probs[k * n..(k + 1) * n];
                p.copy_from_slice(z);
                softmax_in_place(p);
                let pi = priors[b * m + k];
                p.iter_mut().for_each(|x| *x *= pi);
            }
            let (first, rest) = probs.split_at_mut(n);
            for comp in rest.chunks_exact(n) {
                for (a, b) in first.iter_mut().zip(comp) {
                    *a += b;
                }
            }
        });
    }

    fn checksum(&self) -> f64 {
        let (n, m) = (self.n, self.m);
        self.work
            .chunks_exact(2 * m * n)
            .map(|row| {
                row[m * n..m * n + n]
                    .iter()
                    .enumerate()
                    .map(|(j, p)| p * (j % 7) as f64)
                    .sum::<f64>()
            })
            .sum()
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

/// Times one configuration.
pub fn bench_config(n: usize, mixtures: usize, spec: &BenchSpec) -> Result<BenchResult> {
    spec.validate()?;
    let mut layer = Layer::new(n, mixtures, spec)?;
    for _ in 0..spec.warmup {
        layer.forward(spec.mode);
    }
    let mut times = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let start = Instant::now();
        layer.forward(spec.mode);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(0.0, f64::max);
    Ok(BenchResult {
        n,
        mixtures,
        batch: spec.batch,
        d: spec.d,
        median_ms: median(&mut times).max(f64::MIN_POSITIVE),
        memory: MemoryAccount::new(n, spec.d, spec.batch, mixtures),
        spread: if lo > 0.0 { hi / lo } else { 1.0 },
        checksum: layer.checksum(),
    })
}

/// Times every (output size, mixture count) pair in `spec`.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchResult>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.sizes.len() * spec.mixtures.len());
    for &n in &spec.sizes {
        for &m in &spec.mixtures {
            out.push(bench_config(n, m, spec)?);
        }
    }
    Ok(out)
}

/// Coded output layer (two softmaxes over the code dictionary) against a flat
/// layer over the full vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub flat: BenchResult,
    pub coded: BenchResult,
    /// Positions predicted per word by the coded layer.
    pub positions: usize,
}

impl Comparison {
    /// Coded time for a whole word over flat time.
    pub fn time_ratio(&self) -> f64 {
        self.positions as f64 * self.coded.median_ms / self.flat.median_ms
    }

    /// Coded time for one position over flat time.
    pub fn per_position_time_ratio(&self) -> f64 {
        self.coded.median_ms / self.flat.median_ms
    }

    /// Tensor bytes of one coded softmax over one flat softmax.
    pub fn memory_ratio(&self) -> f64 {
        self.coded.memory.total() as f64 / self.flat.memory.total() as f64
    }

    /// `summary<TAB>...` line closing a bench report.
    pub fn summary(&self) -> String {
        format!(
            "summary\tflat={}\tcoded={}x{}\ttime_ratio={:.4}\tmemory_ratio={:.6}",
            self.flat.n,
            self.coded.n,
            self.positions,
            self.time_ratio(),
            self.memory_ratio()
        )
    }
}

pub fn compare_coded_vs_flat(
    vocab_size: usize,
    code_dict_size: usize,
    mixtures: usize,
    spec: &BenchSpec,
) -> Result<Comparison> {
    if code_dict_size > vocab_size {
        return Err(Error::arg(format!(
            "code dictionary {code_dict_size} is larger than the vocabulary {vocab_size}"
        )));
    }
    let flat = bench_config(vocab_size, mixtures, spec)?;
    let coded = bench_config(code_dict_size, mixtures, spec)?;
    Ok(Comparison {
        flat,
        coded,
        positions: 2,
    })
}
