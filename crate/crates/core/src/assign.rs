//! Word-to-cell assignment for the dense part of a code table.
//!
//! Rows of a [`CostMatrix`] are the dense in-vocabulary words followed by
//! padding rows; columns are every table cell except the one reserved for
//! the out-of-vocabulary word. Entry `(i, s)` is the summed surprisal the
//! current model assigns to the row and column codes of cell `s` at every
//! occurrence of word `i`, with contexts taken from the current encoding.

use crate::codelm::{train_lm, CodeLmParams, TrainConfig};
use crate::codetable::{CodeModel, CodeSeq, CodeTable};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};

/// Default problem size above which [`solve_exact`] refuses to run.
pub const DEFAULT_EXACT_CAP: usize = 256;

/// Square cost matrix in nats, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
    /// Word id per row, `None` for padding.
    row_words: Vec<Option<usize>>,
    /// Table cell per column.
    col_cells: Vec<usize>,
}

impl CostMatrix {
    /// Plain square matrix with no table attached.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::arg("cost matrix must be square"));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("cost matrix entries must be finite"));
        }
        Ok(CostMatrix {
            n,
            data,
            row_words: (0..n).map(Some).collect(),
            col_cells: (0..n).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n..(row + 1) * self.n]
    }

    pub fn row_words(&self) -> &[Option<usize>] {
        &self.row_words
    }

    pub fn col_cells(&self) -> &[usize] {
        &self.col_cells
    }

    /// Total cost of a row → column permutation.
    pub fn objective(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(r, &c)| self.get(r, c)).sum()
    }

    /// The permutation that reproduces `table`'s current placement: each
    /// word row goes to its current cell, padding rows fill the free cells
    /// in order.
    pub fn identity_perm(&self, table: &CodeTable) -> Vec<usize> {
        let mut col_of_cell = vec![usize::MAX; table.n_cells()];
        for (c, &cell) in self.col_cells.iter().enumerate() {
            col_of_cell[cell] = c;
        }
        let mut used = vec![false; self.n];
        let mut perm = vec![usize::MAX; self.n];
        for (r, w) in self.row_words.iter().enumerate() {
            if let Some(w) = w {
                let c = col_of_cell[table.cell_of(*w).expect("dense word")];
                perm[r] = c;
                used[c] = true;
            }
        }
        let mut free = (0..self.n).filter(|&c| !used[c]);
        for p in perm.iter_mut().filter(|p| **p == usize::MAX) {
            *p = free.next().expect("square matrix");
        }
        perm
    }
}

/// A row → column permutation and its total cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub objective: f64,
}

impl Assignment {
    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        self.perm
            .iter()
            .all(|&c| c < seen.len() && !std::mem::replace(&mut seen[c], true))
    }
}

/// Accumulates assignment costs in one pass over the corpus.
///
/// For every occurrence of a dense word, the model's distributions at the
/// word's first and second code positions (under the current encoding) give
/// the cost of every row code and every column code; a cell's cost is the
/// sum of its row and column terms. Padding rows and words that never occur
/// cost nothing.
pub fn build_cost_matrix<M: CodeModel>(
    lm: &M,
    table: &CodeTable,
    corpus: &[Vec<usize>],
    mode: Parallelism,
) -> Result<CostMatrix> {
    if lm.n_codes() != table.n_codes() {
        return Err(Error::Contract(format!(
            "model predicts {} codes but the table dictionary has {}",
            lm.n_codes(),
            table.n_codes()
        )));
    }
    let (k, d1, d2) = (table.k_freq(), table.rows(), table.cols());
    let n_dense = table.vocab_size() - k;
    let n = table.n_cells() - 1;
    let unk = table.unk_id();
    for &w in corpus.iter().flatten() {
        if w > unk {
            return Err(Error::arg(format!("word id {w} out of range")));
        }
    }

    // Per dense word: summed surprisal of each row code and each column code.
    let partials = exec::map_chunks(corpus, 32, mode, |_, chunk| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut row_cost = vec![0.0; n_dense * d1];
        let mut col_cost = vec![0.0; n_dense * d2];
        let mut logp = vec![0.0; lm.n_codes()];
        for sentence in chunk {
            let mut state = lm.start(&mut logp)?;
            for &w in sentence {
                match table.encode_unchecked(w) {
                    CodeSeq::Single(c) => lm.step(&mut state, c, &mut logp)?,
                    CodeSeq::Pair(r, c) => {
                        let dense = (w != unk).then(|| w - k);
                        if let Some(i) = dense {
                            for (acc, lp) in row_cost[i * d1..(i + 1) * d1].iter_mut().zip(&logp[k..k + d1]) {
                                *acc -= lp;
                            }
                        }
                        lm.step(&mut state, r, &mut logp)?;
                        if let Some(i) = dense {
                            for (acc, lp) in col_cost[i * d2..(i + 1) * d2].iter_mut().zip(&logp[k + d1..]) {
                                *acc -= lp;
                            }
                        }
                        lm.step(&mut state, c, &mut logp)?;
                    }
                }
            }
        }
        Ok((row_cost, col_cost))
    });
    let mut row_cost = vec![0.0; n_dense * d1];
    let mut col_cost = vec![0.0; n_dense * d2];
    for part in partials {
        let (r, c) = part?;
        for (a, b) in row_cost.iter_mut().zip(r) {
            *a += b;
        }
        for (a, b) in col_cost.iter_mut().zip(c) {
            *a += b;
        }
    }

    let mut data = vec![0.0; n * n];
    for i in 0..n_dense {
        let out = &mut data[i * n..(i + 1) * n];
        for (cell, x) in out.iter_mut().enumerate() {
            *x = row_cost[i * d1 + cell / d2] + col_cost[i * d2 + cell % d2];
        }
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericOverflow("assignment cost matrix"));
    }
    let mut row_words: Vec<Option<usize>> = (k..k + n_dense).map(Some).collect();
    row_words.resize(n, None);
    Ok(CostMatrix {
        n,
        data,
        row_words,
        col_cells: (0..n).collect(),
    })
}

/// Minimum-cost perfect assignment (shortest augmenting paths with
/// potentials, O(n³)).
pub fn solve_exact(cost: &CostMatrix) -> Result<Assignment> {
    solve_exact_capped(cost, DEFAULT_EXACT_CAP)
}

pub fn solve_exact_capped(cost: &CostMatrix, cap: usize) -> Result<Assignment> {
    let n = cost.n;
    if n > cap {
        return Err(Error::Size { n, cap });
    }
    if n == 0 {
        return Ok(Assignment {
            perm: vec![],
            objective: 0.0,
        });
    }
    // 1-based arrays; row 0 / column 0 are the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[row_of_col[j] - 1] = j - 1;
    }
    let objective = cost.objective(&perm);
    Ok(Assignment { perm, objective })
}

/// Greedy result plus the number of edge weights inspected.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyOutcome {
    pub assignment: Assignment,
    pub inspections: u64,
}

/// Half-approximate maximum-weight assignment on weights `max(C) - C`.
pub fn solve_greedy(cost: &CostMatrix) -> Assignment {
    solve_greedy_counted(cost).assignment
}

/// Locally dominant edge matching.
///
/// Edges are totally ordered by weight, then by smaller row, then by smaller
/// column. A path is grown from a free vertex, always stepping to the
/// heaviest edge at the current end among free vertices. When the end's
/// heaviest edge points back along the path, that edge is heaviest for both
/// endpoints; it is matched and both vertices leave the graph. Weights
/// increase strictly along the path, so each vertex is pushed once and the
/// number of edge inspections is at most about `1.5 n²`.
pub fn solve_greedy_counted(cost: &CostMatrix) -> GreedyOutcome {
    let n = cost.n;
    if n == 0 {
        return GreedyOutcome {
            assignment: Assignment {
                perm: vec![],
                objective: 0.0,
            },
            inspections: 0,
        };
    }
    let c_max = cost.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weight = |r: usize, c: usize| c_max - cost.get(r, c);
    // Heavier edge first: larger weight, then smaller (row, col).
    let heavier = |a: (f64, usize, usize), b: (f64, usize, usize)| a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2));

    // Vertices: rows are 0..n, columns n..2n. Free lists with O(1) removal.
    let mut free_rows = FreeList::new(n);
    let mut free_cols = FreeList::new(n);
    let mut perm = vec![usize::MAX; n];
    let mut inspections = 0u64;
    let mut stack: Vec<usize> = Vec::new();

    // Heaviest free neighbour of vertex v.
    let best = |v: usize, free_rows: &FreeList, free_cols: &FreeList, inspections: &mut u64| -> usize {
        let mut top: Option<(f64, usize, usize)> = None;
        let mut arg = usize::MAX;
        if v < n {
            for &c in free_cols.items() {
                *inspections += 1;
                let e = (weight(v, c), v, c);
                if top.is_none_or(|t| heavier(e, t)) {
                    top = Some(e);
                    arg = n + c;
                }
            }
        } else {
            let c = v - n;
            for &r in free_rows.items() {
                *inspections += 1;
                let e = (weight(r, c), r, c);
                if top.is_none_or(|t| heavier(e, t)) {
                    top = Some(e);
                    arg = r;
                }
            }
        }
        arg
    };

    let mut next_start = 0;
    let mut candidate: Vec<usize> = vec![usize::MAX; 2 * n];
    loop {
        if stack.is_empty() {
            while next_start < n && perm[next_start] != usize::MAX {
                next_start += 1;
            }
            if next_start == n {
                break;
            }
            let v = next_start;
            candidate[v] = best(v, &free_rows, &free_cols, &mut inspections);
            stack.push(v);
        }
        let top = *stack.last().expect("nonempty");
        let target = candidate[top];
        if stack.len() >= 2 && stack[stack.len() - 2] == target {
            // Mutual best: match and drop both from the graph.
            stack.pop();
            stack.pop();
            let (r, c) = if top < n { (top, target - n) } else { (target, top - n) };
            perm[r] = c;
            free_rows.remove(r);
            free_cols.remove(c);
            if let Some(&below) = stack.last() {
                candidate[below] = best(below, &free_rows, &free_cols, &mut inspections);
            }
        } else {
            candidate[target] = best(target, &free_rows, &free_cols, &mut inspections);
            stack.push(target);
        }
    }
    let objective = cost.objective(&perm);
    GreedyOutcome {
        assignment: Assignment { perm, objective },
        inspections,
    }
}

struct FreeList {
    items: Vec<usize>,
    pos: Vec<usize>,
}

impl FreeList {
    fn new(n: usize) -> Self {
        FreeList {
            items: (0..n).collect(),
            pos: (0..n).collect(),
        }
    }

    fn items(&self) -> &[usize] {
        &self.items
    }

    fn remove(&mut self, x: usize) {
        let i = self.pos[x];
        let last = *self.items.last().expect("nonempty");
        self.items.swap_remove(i);
        if last != x {
            self.pos[last] = i;
        }
        self.pos[x] = usize::MAX;
    }
}

/// Configuration of the alternating table-learning loop.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridConfig {
    pub k_freq: usize,
    pub d1: usize,
    pub d2: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub train: TrainConfig,
    pub rounds: usize,
    pub exact_cap: usize,
    pub mode: Parallelism,
}

/// Which solver produced a round's assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Exact,
    Greedy,
}

/// One round of the alternating loop, all values in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundTrace {
    pub round: usize,
    /// Corpus NLL after training the model, before reassignment.
    pub nll_before: f64,
    /// Corpus NLL with the same model and the new table.
    pub nll_after: f64,
    /// Transport objective of the current placement.
    pub ot_before: f64,
    /// Transport objective of the installed placement.
    pub ot_after: f64,
    pub solver: Solver,
}

impl RoundTrace {
    /// `round<TAB>nll_before<TAB>nll_after<TAB>ot_before<TAB>ot_after`
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.round, self.nll_before, self.nll_after, self.ot_before, self.ot_after
        )
    }
}

#[derive(Clone, Debug)]
pub struct HybridOutcome {
    pub table: CodeTable,
    pub lm: CodeLmParams,
    pub trace: Vec<RoundTrace>,
    pub lm_history: Vec<f64>,
}

/// Alternates model training and table reassignment for `cfg.rounds` rounds.
///
/// Each round trains the model on the corpus under the current table, builds
/// the cost matrix, solves it (exactly when within `exact_cap`, greedily
/// otherwise), and installs the new placement of dense words. A greedy
/// placement that costs more than the current one is discarded, so the
/// transport objective never increases. Frequent-word codes never change.
pub fn train_hybrid_lightrnn(corpus: &[Vec<usize>], vocab_size: usize, cfg: &HybridConfig) -> Result<HybridOutcome> {
    if cfg.rounds == 0 {
        return Err(Error::arg("rounds must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(Error::arg("corpus is empty"));
    }
    let mut table = CodeTable::init(vocab_size, cfg.k_freq, cfg.d1, cfg.d2)?;
    let mut lm = CodeLmParams::init(table.n_codes(), cfg.d_emb, cfg.d_hid, cfg.train.seed);
    let mut trace = Vec::with_capacity(cfg.rounds);
    let mut lm_history = Vec::new();
    for round in 0..cfg.rounds {
        let encoded = table.encode_corpus(corpus)?;
        let mut train = cfg.train.clone();
        train.seed = cfg.train.seed.wrapping_add(round as u64 + 1);
        let trained = train_lm(lm, &encoded, &train, cfg.mode)?;
        lm = trained.params;
        lm_history.extend(trained.history);

        let contributions = crate::codetable::word_nll_contributions(&table, &lm, corpus, cfg.mode)?;
        let nll_before: f64 = contributions.iter().sum();
        let cost = build_cost_matrix(&lm, &table, corpus, cfg.mode)?;
        let identity = cost.identity_perm(&table);
        let ot_before = cost.objective(&identity);

        let (mut solved, solver) = if cost.n() <= cfg.exact_cap {
            (solve_exact_capped(&cost, cfg.exact_cap)?, Solver::Exact)
        } else {
            (solve_greedy(&cost), Solver::Greedy)
        };
        if solved.objective > ot_before {
            solved = Assignment {
                perm: identity,
                objective: ot_before,
            };
        }
        let mut cells = table.cells().to_vec();
        for (r, w) in cost.row_words().iter().enumerate() {
            if let Some(w) = w {
                cells[w - cfg.k_freq] = cost.col_cells()[solved.perm[r]];
            }
        }
        let next = table.with_cells(cells)?;
        let nll_after = crate::codetable::corpus_log_likelihood(&next, &lm, corpus)?;
        let entry = RoundTrace {
            round,
            nll_before,
            nll_after,
            ot_before,
            ot_after: solved.objective,
            solver,
        };
        log::info!(
            "round {round}: nll {:.4} -> {:.4}, transport {:.4} -> {:.4} ({solver:?})",
            entry.nll_before,
            entry.nll_after,
            entry.ot_before,
            entry.ot_after
        );
        trace.push(entry);
        table = next;
    }
    Ok(HybridOutcome {
        table,
        lm,
        trace,
        lm_history,
    })
}
