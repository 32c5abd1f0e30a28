//! Softmax and mixture-of-softmaxes output layers, and the rank analysis
//! that separates them.
//!
//! A mixture of softmaxes with `M` components maps a context vector `g` to
//!
//! ```text
//! π = softmax_k(g · w_pi[k])
//! h_k = tanh(W_h[k] g)
//! P(x | g) = Σ_k π_k softmax(W h_k)_x
//! ```
//!
//! where all components share the output embedding `W`. The single softmax
//! baseline is `softmax(W h)`. With `N` contexts stacked into `H`, a single
//! softmax produces log-probabilities `H Wᵀ` minus a per-row constant, whose
//! rank is at most `d + 1`; the mixture is not bound that way.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::linalg::{axpy, dot, log_softmax_in_place, log_sum_exp, softmax_in_place, Mat};

/// Tolerance for a log-probability row to count as normalized.
pub const NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct MosParams {
    /// Shared output embedding, `V_out × d`.
    pub w: Mat,
    /// Per-component context projections, each `d × d_g`.
    pub w_h: Vec<Mat>,
    /// Per-component prior weights, `M_mix × d_g`.
    pub w_pi: Mat,
}

impl MosParams {
    pub fn new(w: Mat, w_h: Vec<Mat>, w_pi: Mat) -> Result<Self> {
        let p = MosParams { w, w_h, w_pi };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let m = self.w_h.len();
        if m == 0 {
            return Err(Error::arg("at least one mixture component is required"));
        }
        let d = self.w.cols;
        let d_g = self.w_pi.cols;
        if self.w_pi.rows != m || self.w_h.iter().any(|p| p.rows != d || p.cols != d_g) {
            return Err(Error::arg("mixture parameter dimensions are inconsistent"));
        }
        let finite = self.w.is_finite() && self.w_pi.is_finite() && self.w_h.iter().all(Mat::is_finite);
        if !finite {
            return Err(Error::NumericOverflow("mixture parameters"));
        }
        Ok(())
    }

    pub fn mixtures(&self) -> usize {
        self.w_h.len()
    }

    pub fn vocab(&self) -> usize {
        self.w.rows
    }

    pub fn dim(&self) -> usize {
        self.w.cols
    }

    pub fn context_dim(&self) -> usize {
        self.w_pi.cols
    }
}

/// `softmax(W h)`, computed with max subtraction.
pub fn softmax_probs(h: &[f64], w: &Mat) -> Result<Vec<f64>> {
    if h.len() != w.cols {
        return Err(Error::arg(format!(
            "hidden size {} does not match embedding width {}",
            h.len(),
            w.cols
        )));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericOverflow("softmax input"));
    }
    let mut z = vec![0.0; w.rows];
    w.matvec(h, &mut z);
    softmax_in_place(&mut z);
    if z.iter().all(|x| x.is_finite()) {
        Ok(z)
    } else {
        Err(Error::NumericOverflow("softmax"))
    }
}

/// Mixture weights and log-probabilities of each component for context `g`.
fn mos_components(g: &[f64], params: &MosParams) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = params.mixtures();
    let mut log_pi: Vec<f64> = (0..m).map(|k| dot(g, params.w_pi.row(k))).collect();
    log_softmax_in_place(&mut log_pi);
    let mut h = vec![0.0; params.dim()];
    let comps = params
        .w_h
        .iter()
        .map(|proj| {
            proj.matvec(g, &mut h);
            h.iter_mut().for_each(|x| *x = x.tanh());
            let mut z = vec![0.0; params.vocab()];
            params.w.matvec(&h, &mut z);
            log_softmax_in_place(&mut z);
            z
        })
        .collect();
    (log_pi, comps)
}

fn check_context(g: &[f64], params: &MosParams) -> Result<()> {
    if g.len() != params.context_dim() {
        return Err(Error::arg(format!(
            "context size {} does not match {}",
            g.len(),
            params.context_dim()
        )));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericOverflow("context vector"));
    }
    Ok(())
}

/// Log-probabilities of the mixture, combined in log space.
pub fn mos_log_probs(g: &[f64], params: &MosParams) -> Result<Vec<f64>> {
    check_context(g, params)?;
    let (log_pi, comps) = mos_components(g, params);
    let mut terms = vec![0.0; log_pi.len()];
    let out: Vec<f64> = (0..params.vocab())
        .map(|j| {
            for (t, (lp, c)) in terms.iter_mut().zip(log_pi.iter().zip(&comps)) {
                *t = lp + c[j];
            }
            log_sum_exp(&terms)
        })
        .collect();
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NumericOverflow("mixture of softmaxes"))
    }
}

/// Prior-weighted average of the component softmaxes.
pub fn mos_probs(g: &[f64], params: &MosParams) -> Result<Vec<f64>> {
    check_context(g, params)?;
    let (log_pi, comps) = mos_components(g, params);
    let mut out = vec![0.0; params.vocab()];
    for (lp, c) in log_pi.iter().zip(&comps) {
        let pi = lp.exp();
        for (o, l) in out.iter_mut().zip(c) {
            *o += pi * l.exp();
        }
    }
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NumericOverflow("mixture of softmaxes"))
    }
}

/// Component distributions for context `g`, one row per component.
pub fn mos_component_probs(g: &[f64], params: &MosParams) -> Result<Vec<Vec<f64>>> {
    check_context(g, params)?;
    let (_, comps) = mos_components(g, params);
    Ok(comps
        .into_iter()
        .map(|c| c.into_iter().map(f64::exp).collect())
        .collect())
}

/// `N × V` matrix of log-probabilities, one normalized row per context.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbMatrix(Mat);

impl LogProbMatrix {
    pub fn new(m: Mat) -> Result<Self> {
        for r in 0..m.rows {
            let lse = log_sum_exp(m.row(r));
            if lse.is_nan() || lse.abs() > NORM_TOL {
                return Err(Error::arg(format!("row {r} is not normalized (log-sum-exp {lse})")));
            }
        }
        Ok(LogProbMatrix(m))
    }

    /// Row-wise log-softmax of arbitrary logits.
    pub fn from_logits(mut m: Mat) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NumericOverflow("logits"));
        }
        let cols = m.cols;
        for row in m.data.chunks_mut(cols.max(1)) {
            log_softmax_in_place(row);
        }
        Ok(LogProbMatrix(m))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }
}

/// Log-softmax of `A B` with `A: N×r`, `B: r×V` standard normal entries.
pub fn synthetic_truth(n: usize, v: usize, rank: usize, seed: u64) -> LogProbMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Mat::from_fn(n, rank, |_, _| rng.sample(StandardNormal));
    let b = Mat::from_fn(rank, v, |_, _| rng.sample(StandardNormal));
    let logits = Mat::from_fn(n, v, |i, j| (0..rank).map(|k| a.get(i, k) * b.get(k, j)).sum());
    LogProbMatrix::from_logits(logits).expect("finite")
}

/// Count of singular values above `rel_tol` times the largest.
pub fn numerical_rank(m: &Mat, rel_tol: f64) -> usize {
    if m.rows == 0 || m.cols == 0 {
        return 0;
    }
    let dm = DMatrix::from_row_slice(m.rows, m.cols, &m.data);
    let sv = dm.singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// The output layer being fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputModel {
    /// `softmax(H Wᵀ)` with free context matrix `H`.
    Single,
    /// Mixture of `mixtures` softmaxes over free context vectors.
    Mos { mixtures: usize },
}

impl OutputModel {
    pub fn name(&self) -> &'static str {
        match self {
            OutputModel::Single => "softmax",
            OutputModel::Mos { .. } => "mos",
        }
    }

    pub fn mixtures(&self) -> usize {
        match self {
            OutputModel::Single => 1,
            OutputModel::Mos { mixtures } => *mixtures,
        }
    }
}

/// Mean `KL(truth ‖ model)` over contexts as a function of a flat parameter
/// vector.
///
/// Layout for [`OutputModel::Single`]: `H (N×d)`, `W (V×d)`.
/// Layout for [`OutputModel::Mos`]: `G (N×d)`, `W (V×d)`, `W_h (M×d×d)`,
/// `w_pi (M×d)`. Context vectors have the same width as the embedding.
#[derive(Clone, Debug)]
pub struct KlObjective<'a> {
    pub model: OutputModel,
    pub truth: &'a LogProbMatrix,
    /// Embedding width; bounds the rank of every component's logits.
    pub d: usize,
    /// Width of the mixture's context vectors `g`. Unused by the single
    /// softmax, whose contexts are the `d`-wide rows of `H`.
    pub d_context: usize,
}

impl<'a> KlObjective<'a> {
    /// Objective with context vectors as wide as the embedding.
    pub fn new(model: OutputModel, truth: &'a LogProbMatrix, d: usize) -> Result<Self> {
        Self::with_context(model, truth, d, d)
    }

    pub fn with_context(model: OutputModel, truth: &'a LogProbMatrix, d: usize, d_context: usize) -> Result<Self> {
        if d == 0 || d_context == 0 {
            return Err(Error::arg("dimensions must be positive"));
        }
        if model.mixtures() == 0 {
            return Err(Error::arg("at least one mixture component is required"));
        }
        if truth.rows() == 0 || truth.cols() == 0 {
            return Err(Error::arg("truth matrix is empty"));
        }
        Ok(KlObjective {
            model,
            truth,
            d,
            d_context,
        })
    }

    fn n(&self) -> usize {
        self.truth.rows()
    }

    fn v(&self) -> usize {
        self.truth.cols()
    }

    /// Width of each row of the context matrix.
    fn ctx_dim(&self) -> usize {
        match self.model {
            OutputModel::Single => self.d,
            OutputModel::Mos { .. } => self.d_context,
        }
    }

    pub fn n_params(&self) -> usize {
        let (n, v, d, dg) = (self.n(), self.v(), self.d, self.ctx_dim());
        match self.model {
            OutputModel::Single => n * d + v * d,
            OutputModel::Mos { mixtures: m } => n * dg + v * d + m * d * dg + m * dg,
        }
    }

    /// Seeded starting point: standard normal entries scaled by 0.5.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.n_params())
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn split<'t>(&self, theta: &'t [f64]) -> (&'t [f64], &'t [f64], &'t [f64], &'t [f64]) {
        let (n, v, d, dg) = (self.n(), self.v(), self.d, self.ctx_dim());
        let (ctx, rest) = theta.split_at(n * dg);
        let (w, rest) = rest.split_at(v * d);
        let m = self.model.mixtures();
        match self.model {
            OutputModel::Single => (ctx, w, &[], &[]),
            OutputModel::Mos { .. } => {
                let (wh, wpi) = rest.split_at(m * d * dg);
                (ctx, w, wh, wpi)
            }
        }
    }

    /// Mixture parameters encoded in `theta` (for the mixture model).
    pub fn mos_params(&self, theta: &[f64]) -> Option<MosParams> {
        let OutputModel::Mos { mixtures: m } = self.model else {
            return None;
        };
        let (d, dg) = (self.d, self.d_context);
        let (_, w, wh, wpi) = self.split(theta);
        Some(MosParams {
            w: Mat {
                rows: self.v(),
                cols: d,
                data: w.to_vec(),
            },
            w_h: wh
                .chunks(d * dg)
                .map(|c| Mat {
                    rows: d,
                    cols: dg,
                    data: c.to_vec(),
                })
                .collect(),
            w_pi: Mat {
                rows: m,
                cols: dg,
                data: wpi.to_vec(),
            },
        })
    }

    /// Context matrix (`H` or `G`) encoded in `theta`.
    pub fn contexts(&self, theta: &[f64]) -> Mat {
        let (ctx, ..) = self.split(theta);
        Mat {
            rows: self.n(),
            cols: self.ctx_dim(),
            data: ctx.to_vec(),
        }
    }

    /// Model log-probabilities, one row per context.
    pub fn log_outputs(&self, theta: &[f64]) -> Result<Mat> {
        let (n, v, d) = (self.n(), self.v(), self.d);
        let (ctx, w, ..) = self.split(theta);
        let w = Mat {
            rows: v,
            cols: d,
            data: w.to_vec(),
        };
        let mut out = Mat::zeros(n, v);
        match self.model {
            OutputModel::Single => {
                for i in 0..n {
                    let row = out.row_mut(i);
                    w.matvec(&ctx[i * d..(i + 1) * d], row);
                    log_softmax_in_place(row);
                }
            }
            OutputModel::Mos { .. } => {
                let params = self.mos_params(theta).expect("mixture model");
                let dg = self.d_context;
                for i in 0..n {
                    let lp = mos_log_probs(&ctx[i * dg..(i + 1) * dg], &params)?;
                    out.row_mut(i).copy_from_slice(&lp);
                }
            }
        }
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NumericOverflow("output layer"))
        }
    }

    /// Mean KL divergence from the truth rows to the model rows.
    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        let out = self.log_outputs(theta)?;
        Ok(mean_kl(self.truth.matrix(), &out))
    }

    /// Mean KL and its gradient with respect to `theta`.
    pub fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.n_params() {
            return Err(Error::arg(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        match self.model {
            OutputModel::Single => Ok(self.single_grad(theta)),
            OutputModel::Mos { mixtures } => self.mos_grad(theta, mixtures),
        }
    }

    fn single_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (n, v, d) = (self.n(), self.v(), self.d);
        let (h, w, ..) = self.split(theta);
        let mut grad = vec![0.0; theta.len()];
        let (gh, gw) = grad.split_at_mut(n * d);
        let inv_n = 1.0 / n as f64;
        let mut kl = 0.0;
        let mut z = vec![0.0; v];
        for i in 0..n {
            let hi = &h[i * d..(i + 1) * d];
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = dot(hi, &w[j * d..(j + 1) * d]);
            }
            log_softmax_in_place(&mut z);
            let lp = self.truth.matrix().row(i);
            for j in 0..v {
                let p = lp[j].exp();
                kl += p * (lp[j] - z[j]);
                let dz = (z[j].exp() - p) * inv_n;
                axpy(dz, &w[j * d..(j + 1) * d], &mut gh[i * d..(i + 1) * d]);
                axpy(dz, hi, &mut gw[j * d..(j + 1) * d]);
            }
        }
        (kl * inv_n, grad)
    }

    fn mos_grad(&self, theta: &[f64], m: usize) -> Result<(f64, Vec<f64>)> {
        let (n, v, d, dg) = (self.n(), self.v(), self.d, self.d_context);
        let (g_all, w, wh, wpi) = self.split(theta);
        let mut grad = vec![0.0; theta.len()];
        let (gg, rest) = grad.split_at_mut(n * dg);
        let (gw, rest) = rest.split_at_mut(v * d);
        let (gwh, gwpi) = rest.split_at_mut(m * d * dg);
        let inv_n = 1.0 / n as f64;
        let mut kl = 0.0;

        let mut hs = vec![vec![0.0; d]; m];
        let mut log_s = vec![vec![0.0; v]; m];
        let mut log_q = vec![0.0; v];
        let mut terms = vec![0.0; m];
        let mut dz = vec![0.0; v];
        let mut dh = vec![0.0; d];
        for i in 0..n {
            let g = &g_all[i * dg..(i + 1) * dg];
            let p_log = self.truth.matrix().row(i);
            let mut log_pi: Vec<f64> = (0..m).map(|k| dot(g, &wpi[k * dg..(k + 1) * dg])).collect();
            log_softmax_in_place(&mut log_pi);
            for k in 0..m {
                let proj = &wh[k * d * dg..(k + 1) * d * dg];
                for (a, hv) in hs[k].iter_mut().enumerate() {
                    *hv = dot(&proj[a * dg..(a + 1) * dg], g).tanh();
                }
                for (j, s) in log_s[k].iter_mut().enumerate() {
                    *s = dot(&w[j * d..(j + 1) * d], &hs[k]);
                }
                log_softmax_in_place(&mut log_s[k]);
            }
            for j in 0..v {
                for k in 0..m {
                    terms[k] = log_pi[k] + log_s[k][j];
                }
                log_q[j] = log_sum_exp(&terms);
                let p = p_log[j].exp();
                kl += p * (p_log[j] - log_q[j]);
            }
            let gi = &mut gg[i * dg..(i + 1) * dg];
            for k in 0..m {
                // Responsibilities r_kj and their truth-weighted total R_k.
                let mut big_r = 0.0;
                for j in 0..v {
                    let r = (log_pi[k] + log_s[k][j] - log_q[j]).exp();
                    let p = p_log[j].exp();
                    big_r += p * r;
                    dz[j] = -p * r;
                }
                for j in 0..v {
                    dz[j] = (dz[j] + log_s[k][j].exp() * big_r) * inv_n;
                }
                let da = (log_pi[k].exp() - big_r) * inv_n;
                dh.fill(0.0);
                for j in 0..v {
                    axpy(dz[j], &hs[k], &mut gw[j * d..(j + 1) * d]);
                    axpy(dz[j], &w[j * d..(j + 1) * d], &mut dh);
                }
                let proj = &wh[k * d * dg..(k + 1) * d * dg];
                let gproj = &mut gwh[k * d * dg..(k + 1) * d * dg];
                for a in 0..d {
                    let du = dh[a] * (1.0 - hs[k][a] * hs[k][a]);
                    axpy(du, g, &mut gproj[a * dg..(a + 1) * dg]);
                    axpy(du, &proj[a * dg..(a + 1) * dg], gi);
                }
                axpy(da, g, &mut gwpi[k * dg..(k + 1) * dg]);
                axpy(da, &wpi[k * dg..(k + 1) * dg], gi);
            }
        }
        let kl = kl * inv_n;
        if kl.is_finite() && grad.iter().all(|x| x.is_finite()) {
            Ok((kl, grad))
        } else {
            Err(Error::NumericOverflow("mixture gradient"))
        }
    }
}

/// Mean over rows of `KL(truth ‖ model)`, both given as log-probabilities.
pub fn mean_kl(truth: &Mat, model: &Mat) -> f64 {
    let total: f64 = (0..truth.rows)
        .map(|i| {
            truth
                .row(i)
                .iter()
                .zip(model.row(i))
                .map(|(&lp, &lq)| lp.exp() * (lp - lq))
                .sum::<f64>()
        })
        .sum();
    total / truth.rows as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub d: usize,
    /// Width of the mixture's context vectors.
    pub d_context: usize,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
    pub restarts: usize,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: OutputModel,
    pub theta: Vec<f64>,
    pub mean_kl: f64,
    /// Fitted log-probabilities, `N × V`.
    pub log_outputs: Mat,
}

/// Minimizes mean `KL(truth ‖ model)` with Adam over all parameters,
/// including the context vectors. Each restart starts from its own seeded
/// point; the lowest final KL wins, earliest restart on ties.
pub fn fit_output_layer(model: OutputModel, truth: &LogProbMatrix, cfg: &FitConfig) -> Result<FitResult> {
    let obj = KlObjective::with_context(model, truth, cfg.d, cfg.d_context)?;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::arg("learning rate must be positive"));
    }
    if cfg.restarts == 0 {
        return Err(Error::arg("at least one restart is required"));
    }
    let mut best: Option<FitResult> = None;
    for r in 0..cfg.restarts as u64 {
        let seed = cfg.seed.wrapping_add(r.wrapping_mul(0xD1B5_4A32_D192_ED03));
        let fit = adam_fit(&obj, seed, cfg)?;
        if best.as_ref().is_none_or(|b| fit.mean_kl < b.mean_kl) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn adam_fit(obj: &KlObjective<'_>, seed: u64, cfg: &FitConfig) -> Result<FitResult> {
    let mut theta = obj.init(seed);
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut m1 = vec![0.0; theta.len()];
    let mut m2 = vec![0.0; theta.len()];
    for t in 1..=cfg.iters {
        let (_, grad) = obj
            .value_and_grad(&theta)
            .map_err(|_| Error::TrainingDiverged { epoch: t - 1 })?;
        let c1 = 1.0 - f64::powi(beta1, t as i32);
        let c2 = 1.0 - f64::powi(beta2, t as i32);
        for (((x, g), a), b) in theta.iter_mut().zip(&grad).zip(m1.iter_mut()).zip(m2.iter_mut()) {
            *a = beta1 * *a + (1.0 - beta1) * g;
            *b = beta2 * *b + (1.0 - beta2) * g * g;
            *x -= cfg.lr * (*a / c1) / ((*b / c2).sqrt() + eps);
        }
    }
    let log_outputs = obj
        .log_outputs(&theta)
        .map_err(|_| Error::TrainingDiverged { epoch: cfg.iters })?;
    let mean_kl = mean_kl(obj.truth.matrix(), &log_outputs);
    if !mean_kl.is_finite() {
        return Err(Error::TrainingDiverged { epoch: cfg.iters });
    }
    Ok(FitResult {
        model: obj.model,
        theta,
        mean_kl,
        log_outputs,
    })
}

/// Parameters of a softmax-bottleneck experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckConfig {
    /// Number of contexts.
    pub n: usize,
    pub v_out: usize,
    pub d: usize,
    /// Width of the mixture's context vectors.
    pub d_context: usize,
    pub truth_rank: usize,
    /// Mixture counts to fit; `1` means the single softmax.
    pub mixtures: Vec<usize>,
    pub seeds: Vec<u64>,
    pub iters: usize,
    pub lr: f64,
    pub restarts: usize,
    pub rank_tol: f64,
    pub mode: Parallelism,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            n: 16,
            v_out: 16,
            d: 2,
            d_context: 16,
            truth_rank: 8,
            mixtures: vec![1, 4],
            seeds: (0..10).collect(),
            iters: 20_000,
            lr: 0.02,
            restarts: 3,
            rank_tol: 1e-6,
            mode: Parallelism::available(),
        }
    }
}

/// One fitted model: `model<TAB>M_mix<TAB>d<TAB>kl<TAB>rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRecord {
    pub model: String,
    pub mixtures: usize,
    pub d: usize,
    pub kl: f64,
    pub rank: usize,
}

impl fmt::Display for ReportRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:?}\t{}",
            self.model, self.mixtures, self.d, self.kl, self.rank
        )
    }
}

impl FromStr for ReportRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::parse(0, format!("bad report record {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        let [model, mixtures, d, kl, rank] = f[..] else {
            return Err(bad());
        };
        Ok(ReportRecord {
            model: model.to_owned(),
            mixtures: mixtures.parse().map_err(|_| bad())?,
            d: d.parse().map_err(|_| bad())?,
            kl: kl.parse().map_err(|_| bad())?,
            rank: rank.parse().map_err(|_| bad())?,
        })
    }
}

/// Records in (seed, model) order.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckReport {
    pub records: Vec<ReportRecord>,
}

impl BottleneckReport {
    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                l.parse()
                    .map_err(|_| Error::parse(i + 1, format!("bad report record {l:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(BottleneckReport { records })
    }
}

/// Fits every requested model on a synthetic truth per seed.
pub fn bottleneck_report(cfg: &BottleneckConfig) -> Result<BottleneckReport> {
    if cfg.mixtures.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::arg("need at least one model and one seed"));
    }
    if cfg.truth_rank == 0 || cfg.n == 0 || cfg.v_out == 0 {
        return Err(Error::arg("dimensions must be positive"));
    }
    let tasks: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.mixtures.iter().map(move |&m| (s, m)))
        .collect();
    let results = exec::map_indices(tasks.len(), cfg.mode, |t| -> Result<ReportRecord> {
        let (seed, m) = tasks[t];
        let truth = synthetic_truth(cfg.n, cfg.v_out, cfg.truth_rank, seed);
        let model = if m == 1 {
            OutputModel::Single
        } else {
            OutputModel::Mos { mixtures: m }
        };
        let fit_cfg = FitConfig {
            d: cfg.d,
            d_context: cfg.d_context,
            iters: cfg.iters,
            lr: cfg.lr,
            restarts: cfg.restarts,
            seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(m as u64),
        };
        let fit = fit_output_layer(model, &truth, &fit_cfg)?;
        Ok(ReportRecord {
            model: model.name().to_owned(),
            mixtures: m,
            d: cfg.d,
            kl: fit.mean_kl,
            rank: numerical_rank(&fit.log_outputs, cfg.rank_tol),
        })
    });
    Ok(BottleneckReport {
        records: results.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(m: usize, v: usize, d: usize, seed: u64) -> MosParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MosParams::new(
            Mat::uniform(v, d, 1.0, &mut rng),
            (0..m).map(|_| Mat::uniform(d, d, 1.0, &mut rng)).collect(),
            Mat::uniform(m, d, 1.0, &mut rng),
        )
        .unwrap()
    }

    #[test]
    fn equal_logits_are_uniform() {
        let w = Mat::from_fn(4, 2, |_, _| 1.0);
        let p = softmax_probs(&[0.3, -0.2], &w).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance() {
        // A constant column in W with a matching unit in h shifts every logit equally.
        let w = Mat {
            rows: 3,
            cols: 2,
            data: vec![0.5, 1.0, -1.0, 1.0, 2.0, 1.0],
        };
        let a = softmax_probs(&[0.7, 0.0], &w).unwrap();
        let b = softmax_probs(&[0.7, 123.0], &w).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_by_hand() {
        // W is 3×2 and h has 2 entries: logits [0.5, -0.1, 1.1].
        let w = Mat {
            rows: 3,
            cols: 2,
            data: vec![1.0, 0.0, 0.0, -1.0, 1.0, 1.0],
        };
        let p = softmax_probs(&[0.5, 0.1], &w).unwrap();
        let e = [0.5f64.exp(), (-0.1f64).exp(), 0.6f64.exp()];
        let total: f64 = e.iter().sum();
        for (pi, ei) in p.iter().zip(e) {
            assert!((pi - ei / total).abs() < 1e-15);
        }
        assert!(softmax_probs(&[f64::NAN, 0.0], &w).is_err());
        assert!(softmax_probs(&[1.0], &w).is_err());
    }

    #[test]
    fn single_component_is_plain_softmax() {
        let p = params(1, 6, 3, 1);
        let g = [0.2, -0.4, 0.9];
        let mut h = vec![0.0; 3];
        p.w_h[0].matvec(&g, &mut h);
        h.iter_mut().for_each(|x| *x = x.tanh());
        let a = mos_probs(&g, &p).unwrap();
        let b = softmax_probs(&h, &p.w).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_components_ignore_priors() {
        let mut p = params(3, 5, 2, 2);
        let first = p.w_h[0].clone();
        p.w_h = vec![first.clone(); 3];
        let g = [0.8, -0.3];
        let a = mos_probs(&g, &p).unwrap();
        let single = MosParams::new(p.w.clone(), vec![first], Mat::zeros(1, 2)).unwrap();
        let b = mos_probs(&g, &single).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_by_hand() {
        // M = 2, V = 4, d = d_g = 1.
        let p = MosParams::new(
            Mat {
                rows: 4,
                cols: 1,
                data: vec![1.0, -1.0, 2.0, 0.0],
            },
            vec![
                Mat {
                    rows: 1,
                    cols: 1,
                    data: vec![0.5],
                },
                Mat {
                    rows: 1,
                    cols: 1,
                    data: vec![-2.0],
                },
            ],
            Mat {
                rows: 2,
                cols: 1,
                data: vec![1.0, -1.0],
            },
        )
        .unwrap();
        let g = 0.7;
        let pi0 = (0.7f64).exp() / ((0.7f64).exp() + (-0.7f64).exp());
        let comp = |h: f64| {
            let z = [h, -h, 2.0 * h, 0.0].map(f64::exp);
            let s: f64 = z.iter().sum();
            z.map(|x| x / s)
        };
        let (a, b) = (comp((0.5f64 * g).tanh()), comp((-2.0f64 * g).tanh()));
        let got = mos_probs(&[g], &p).unwrap();
        for j in 0..4 {
            let want = pi0 * a[j] + (1.0 - pi0) * b[j];
            assert!((got[j] - want).abs() < 1e-14);
        }
        let logp = mos_log_probs(&[g], &p).unwrap();
        for j in 0..4 {
            assert!((logp[j].exp() - got[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn mixture_is_normalized_and_convex() {
        for seed in 0..20 {
            let p = params(4, 9, 3, seed);
            let g = [seed as f64 * 0.1 - 1.0, 0.5, -0.25];
            let q = mos_probs(&g, &p).unwrap();
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let comps = mos_component_probs(&g, &p).unwrap();
            for j in 0..9 {
                let lo = comps.iter().map(|c| c[j]).fold(f64::INFINITY, f64::min);
                let hi = comps.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max);
                assert!(q[j] >= 0.0 && q[j] >= lo - 1e-15 && q[j] <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn rank_of_simple_matrices() {
        let id = Mat::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        assert_eq!(numerical_rank(&id, 1e-8), 4);
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0, 4.0, 1.5];
        assert_eq!(numerical_rank(&Mat::from_fn(3, 4, |i, j| u[i] * v[j]), 1e-8), 1);
        assert_eq!(numerical_rank(&Mat::zeros(3, 3), 1e-8), 0);
    }

    #[test]
    fn log_prob_matrix_checks_rows() {
        assert!(LogProbMatrix::new(Mat {
            rows: 1,
            cols: 2,
            data: vec![0.5f64.ln(), 0.5f64.ln()]
        })
        .is_ok());
        assert!(LogProbMatrix::new(Mat {
            rows: 1,
            cols: 2,
            data: vec![0.0, 0.0]
        })
        .is_err());
    }

    #[test]
    fn report_record_round_trip() {
        let r = ReportRecord {
            model: "mos".into(),
            mixtures: 4,
            d: 2,
            kl: 0.1 + 0.2,
            rank: 9,
        };
        let line = r.to_string();
        assert_eq!(line, "mos\t4\t2\t0.30000000000000004\t9");
        assert_eq!(line.parse::<ReportRecord>().unwrap(), r);
        assert!("mos\t4\t2\t0.3".parse::<ReportRecord>().is_err());
    }
}
