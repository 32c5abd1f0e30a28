//! Single-layer tanh recurrent language model over code streams.
//!
//! ```text
//! h' = tanh(W_hh h + W_xhᵀ emb[code] + b_h)
//! log p = log_softmax(U h' + b_o)
//! ```
//!
//! Every sentence starts from a zero hidden state and a reserved
//! sentence-start code, whose id is `n_codes` (one past the last predictable
//! code). The embedding table therefore has `n_codes + 1` rows.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codetable::{CodeId, CodeModel, EncodedCorpus};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::linalg::{log_softmax_in_place, Mat};

const MAGIC: &str = "#codelm-v1";
const INIT_SCALE: f64 = 0.08;
/// Sequences per gradient work unit. Fixed so reductions do not depend on
/// the number of threads.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct CodeLmParams {
    n_codes: usize,
    /// `(n_codes + 1) × d_emb`; the last row embeds the sentence-start code.
    pub emb: Mat,
    /// `d_hid × d_hid`
    pub w_hh: Mat,
    /// `d_emb × d_hid`
    pub w_xh: Mat,
    pub b_h: Vec<f64>,
    /// `n_codes × d_hid`
    pub u: Mat,
    pub b_o: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 5,
            batch_size: 16,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be finite and non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("epochs and batch size must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::arg("gradient clip norm must be positive"));
        }
        Ok(())
    }
}

impl CodeLmParams {
    pub fn zeros(n_codes: usize, d_emb: usize, d_hid: usize) -> Self {
        CodeLmParams {
            n_codes,
            emb: Mat::zeros(n_codes + 1, d_emb),
            w_hh: Mat::zeros(d_hid, d_hid),
            w_xh: Mat::zeros(d_emb, d_hid),
            b_h: vec![0.0; d_hid],
            u: Mat::zeros(n_codes, d_hid),
            b_o: vec![0.0; n_codes],
        }
    }

    /// Uniform initialization in [-0.08, 0.08].
    pub fn init(n_codes: usize, d_emb: usize, d_hid: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(n_codes, d_emb, d_hid);
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x = rand::Rng::random_range(&mut rng, -INIT_SCALE..=INIT_SCALE);
            }
        }
        p
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn d_emb(&self) -> usize {
        self.emb.cols
    }

    pub fn d_hid(&self) -> usize {
        self.w_hh.rows
    }

    /// The sentence-start input code.
    pub fn bos(&self) -> CodeId {
        CodeId(self.n_codes as u32)
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.emb.data,
            &self.w_hh.data,
            &self.w_xh.data,
            &self.b_h,
            &self.u.data,
            &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.emb.data,
            &mut self.w_hh.data,
            &mut self.w_xh.data,
            &mut self.b_h,
            &mut self.u.data,
            &mut self.b_o,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.n_codes, self.d_emb(), self.d_hid())
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn check_input(&self, code: CodeId) -> Result<()> {
        if code.index() > self.n_codes {
            return Err(Error::arg(format!(
                "code {code} outside dictionary of {} (+ sentence start)",
                self.n_codes
            )));
        }
        Ok(())
    }

    /// Hidden update for one input code, written into `out`.
    fn recur(&self, h: &[f64], code: CodeId, out: &mut [f64]) {
        self.w_hh.matvec(h, out);
        let x = self.emb.row(code.index());
        self.w_xh.matvec_t_acc(x, out);
        for (o, b) in out.iter_mut().zip(&self.b_h) {
            *o = (*o + b).tanh();
        }
    }

    fn emit(&self, h: &[f64], logp: &mut [f64]) -> Result<()> {
        self.u.matvec(h, logp);
        for (l, b) in logp.iter_mut().zip(&self.b_o) {
            *l += b;
        }
        log_softmax_in_place(logp);
        if logp.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericOverflow("code LM step"))
        }
    }

    pub fn zero_state(&self) -> LmState {
        LmState {
            h: vec![0.0; self.d_hid()],
        }
    }

    /// One recurrence step: consumes `code`, returns the new state and the
    /// log-probabilities of the next code.
    pub fn step(&self, state: &LmState, code: CodeId) -> Result<(LmState, Vec<f64>)> {
        self.check_input(code)?;
        let mut h = vec![0.0; self.d_hid()];
        self.recur(&state.h, code, &mut h);
        let mut logp = vec![0.0; self.n_codes];
        self.emit(&h, &mut logp)?;
        Ok((LmState { h }, logp))
    }

    /// Mean per-code negative log-likelihood of `batch` and its gradient.
    pub fn loss_and_grad(&self, batch: &[Vec<CodeId>]) -> Result<(f64, CodeLmParams)> {
        self.loss_and_grad_with(batch, Parallelism::available())
    }

    pub fn loss_and_grad_with(&self, batch: &[Vec<CodeId>], mode: Parallelism) -> Result<(f64, CodeLmParams)> {
        let (per_seq, mut grad, count) = self.batch_grad(batch, mode)?;
        let inv = 1.0 / count as f64;
        grad.scale(inv);
        Ok((per_seq.iter().sum::<f64>() * inv, grad))
    }

    /// Summed NLL per sequence, summed gradient, and number of predicted codes.
    fn batch_grad(&self, batch: &[Vec<CodeId>], mode: Parallelism) -> Result<(Vec<f64>, CodeLmParams, usize)> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let count: usize = batch.iter().map(Vec::len).sum();
        if count == 0 {
            return Err(Error::arg("batch contains no codes"));
        }
        for &c in batch.iter().flatten() {
            if c.index() >= self.n_codes {
                return Err(Error::arg(format!("code {c} outside dictionary of {}", self.n_codes)));
            }
        }
        let parts = exec::map_chunks(batch, GRAD_CHUNK, mode, |_, chunk| {
            let mut grad = self.zeros_like();
            let losses: Vec<f64> = chunk.iter().map(|seq| self.sequence_grad(seq, &mut grad)).collect();
            (losses, grad)
        });
        let mut per_seq = Vec::with_capacity(batch.len());
        let mut grad = self.zeros_like();
        for (losses, g) in parts {
            per_seq.extend(losses);
            grad.add_assign(&g);
        }
        Ok((per_seq, grad, count))
    }

    /// Backpropagation through time for one sentence; adds the summed
    /// gradient into `grad` and returns the summed NLL.
    fn sequence_grad(&self, seq: &[CodeId], grad: &mut CodeLmParams) -> f64 {
        let t_len = seq.len();
        if t_len == 0 {
            return 0.0;
        }
        let d_hid = self.d_hid();
        let n = self.n_codes;
        let inputs: Vec<CodeId> = std::iter::once(self.bos())
            .chain(seq[..t_len - 1].iter().copied())
            .collect();

        // hs[t] is the state after consuming inputs[t - 1]; hs[0] = 0.
        let mut hs = Mat::zeros(t_len + 1, d_hid);
        let mut probs = Mat::zeros(t_len, n);
        let mut loss = 0.0;
        let mut buf = vec![0.0; d_hid];
        for t in 0..t_len {
            self.recur(hs.row(t), inputs[t], &mut buf);
            hs.row_mut(t + 1).copy_from_slice(&buf);
            let logp = probs.row_mut(t);
            self.u.matvec(&buf, logp);
            for (l, b) in logp.iter_mut().zip(&self.b_o) {
                *l += b;
            }
            log_softmax_in_place(logp);
            loss -= logp[seq[t].index()];
            for l in logp.iter_mut() {
                *l = l.exp();
            }
        }

        let mut dh_next = vec![0.0; d_hid];
        let mut dh = vec![0.0; d_hid];
        let mut da = vec![0.0; d_hid];
        let mut dx = vec![0.0; self.d_emb()];
        for t in (0..t_len).rev() {
            let h = hs.row(t + 1);
            let dz = probs.row_mut(t);
            dz[seq[t].index()] -= 1.0;
            grad.u.add_outer(dz, h);
            for (g, d) in grad.b_o.iter_mut().zip(dz.iter()) {
                *g += d;
            }
            dh.copy_from_slice(&dh_next);
            self.u.matvec_t_acc(dz, &mut dh);
            for ((a, &g), &hv) in da.iter_mut().zip(&dh).zip(h) {
                *a = g * (1.0 - hv * hv);
            }
            grad.w_hh.add_outer(&da, hs.row(t));
            let x = self.emb.row(inputs[t].index());
            grad.w_xh.add_outer(x, &da);
            for (g, d) in grad.b_h.iter_mut().zip(&da) {
                *g += d;
            }
            self.w_xh.matvec(&da, &mut dx);
            for (g, d) in grad.emb.row_mut(inputs[t].index()).iter_mut().zip(&dx) {
                *g += d;
            }
            dh_next.fill(0.0);
            self.w_hh.matvec_t_acc(&da, &mut dh_next);
        }
        loss
    }

    /// Mean per-code NLL over a whole corpus.
    pub fn mean_nll(&self, corpus: &EncodedCorpus, mode: Parallelism) -> Result<f64> {
        let total: usize = corpus.total_codes();
        if total == 0 {
            return Err(Error::arg("corpus contains no codes"));
        }
        let parts = exec::map_chunks(&corpus.streams, GRAD_CHUNK, mode, |_, chunk| -> Result<f64> {
            let mut logp = vec![0.0; self.n_codes];
            let mut sum = 0.0;
            for seq in chunk {
                let mut state = self.start(&mut logp)?;
                for &c in seq {
                    sum -= logp[c.index()];
                    CodeModel::step(self, &mut state, c, &mut logp)?;
                }
            }
            Ok(sum)
        });
        let mut sum = 0.0;
        for p in parts {
            sum += p?;
        }
        Ok(sum / total as f64)
    }

    /// Writes the `#codelm-v1` checkpoint: one matrix row per line.
    pub fn write<W: Write>(&self, seed: Option<u64>, mut out: W) -> std::io::Result<()> {
        write!(out, "{MAGIC} {} {} {}", self.n_codes, self.d_emb(), self.d_hid())?;
        if let Some(seed) = seed {
            write!(out, " seed={seed}")?;
        }
        writeln!(out)?;
        for (tensor, width) in self.tensors().into_iter().zip(self.row_widths()) {
            for row in tensor.chunks(width.max(1)) {
                let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    fn row_widths(&self) -> [usize; 6] {
        let (e, h, n) = (self.d_emb(), self.d_hid(), self.n_codes);
        [e, h, h, h, h, n]
    }

    pub fn read<R: BufRead>(input: R) -> Result<(Self, Option<u64>)> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing header"))?
            .map_err(|e| Error::parse(1, e.to_string()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.first() != Some(&MAGIC) || !(4..=5).contains(&fields.len()) {
            return Err(Error::parse(
                1,
                format!("expected `{MAGIC} n_codes d_emb d_hid [seed=N]`"),
            ));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(1, format!("bad field {s:?}")))
        };
        let mut p = Self::zeros(num(fields[1])?, num(fields[2])?, num(fields[3])?);
        let seed = match fields.get(4) {
            None => None,
            Some(f) => Some(
                f.strip_prefix("seed=")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::parse(1, format!("bad seed field {f:?}")))?,
            ),
        };
        let widths = p.row_widths();
        let mut lineno = 1;
        for (tensor, width) in p.tensors_mut().into_iter().zip(widths) {
            for row in tensor.chunks_mut(width.max(1)) {
                lineno += 1;
                let line = lines
                    .next()
                    .ok_or_else(|| Error::parse(lineno, "checkpoint truncated"))?
                    .map_err(|e| Error::parse(lineno, e.to_string()))?;
                let values: Vec<f64> = line
                    .split(' ')
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| Error::parse(lineno, "bad float"))?;
                if values.len() != row.len() {
                    return Err(Error::parse(
                        lineno,
                        format!("expected {} values, got {}", row.len(), values.len()),
                    ));
                }
                row.copy_from_slice(&values);
            }
        }
        if lines.next().is_some() {
            return Err(Error::parse(lineno + 1, "trailing data after checkpoint"));
        }
        if !p.is_finite() {
            return Err(Error::parse(0, "non-finite parameter"));
        }
        Ok((p, seed))
    }
}

impl CodeModel for CodeLmParams {
    type State = LmState;

    fn n_codes(&self) -> usize {
        self.n_codes
    }

    fn start(&self, logp: &mut [f64]) -> Result<LmState> {
        let mut state = self.zero_state();
        CodeModel::step(self, &mut state, self.bos(), logp)?;
        Ok(state)
    }

    fn step(&self, state: &mut LmState, code: CodeId, logp: &mut [f64]) -> Result<()> {
        self.check_input(code)?;
        let mut h = vec![0.0; self.d_hid()];
        self.recur(&state.h, code, &mut h);
        state.h = h;
        self.emit(&state.h, logp)
    }
}

/// Result of [`train_lm`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub params: CodeLmParams,
    /// Mean per-code NLL of each epoch, accumulated while training.
    pub history: Vec<f64>,
}

/// Plain minibatch SGD with global gradient-norm clipping.
pub fn train_lm(params: CodeLmParams, corpus: &EncodedCorpus, cfg: &TrainConfig, mode: Parallelism) -> Result<Trained> {
    cfg.validate()?;
    let n_seqs = corpus.streams.len();
    let total = corpus.total_codes();
    if n_seqs == 0 || total == 0 {
        return Err(Error::arg("training corpus is empty"));
    }
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_seqs).collect();
    let mut seq_loss = vec![0.0; n_seqs];
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch_ids in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<CodeId>> = batch_ids.iter().map(|&i| corpus.streams[i].clone()).collect();
            let count: usize = batch.iter().map(Vec::len).sum();
            if count == 0 {
                for &i in batch_ids {
                    seq_loss[i] = 0.0;
                }
                continue;
            }
            let (losses, mut grad, _) = params.batch_grad(&batch, mode)?;
            for (&i, l) in batch_ids.iter().zip(losses) {
                seq_loss[i] = l;
            }
            grad.scale(1.0 / count as f64);
            let norm = grad.norm();
            if !norm.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            if norm > cfg.clip_norm {
                grad.scale(cfg.clip_norm / norm);
            }
            if cfg.learning_rate > 0.0 {
                for (p, g) in params.tensors_mut().into_iter().zip(grad.tensors()) {
                    for (x, d) in p.iter_mut().zip(g) {
                        *x -= cfg.learning_rate * d;
                    }
                }
            }
        }
        // Summed in sequence order so the value does not depend on the shuffle.
        let loss = seq_loss.iter().sum::<f64>() / total as f64;
        if !loss.is_finite() || !params.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!("lm epoch {epoch}: mean nll {loss:.6}");
        history.push(loss);
    }
    Ok(Trained { params, history })
}
