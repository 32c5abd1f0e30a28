//! Hybrid frequent-word / two-dimensional code table.
//!
//! The unified code dictionary has three consecutive ranges:
//!
//! ```text
//! [0, k_freq)                   frequent codes, one per frequent word
//! [k_freq, k_freq + d1)         row codes
//! [k_freq + d1, k_freq+d1+d2)   column codes
//! ```
//!
//! Word `i < k_freq` is encoded as the single code `(i)`. Every other word,
//! including the out-of-vocabulary slot, occupies one cell of a `d1 × d2`
//! table and is encoded as `(row, column)`. The out-of-vocabulary word always
//! sits in the last cell. A frequent code ends a word and a row code is always
//! followed by exactly one column code, so streams decode without separators.

use std::fmt;
use std::io::{BufRead, Write};

use crate::corpus::{Token, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};

const MAGIC: &str = "#hlr-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CodeId(pub u32);

impl CodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A word's code sequence: one frequent code or a (row, column) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CodeSeq {
    Single(CodeId),
    Pair(CodeId, CodeId),
}

impl CodeSeq {
    pub fn len(&self) -> usize {
        match self {
            CodeSeq::Single(_) => 1,
            CodeSeq::Pair(..) => 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<CodeId> {
        match *self {
            CodeSeq::Single(c) => vec![c],
            CodeSeq::Pair(r, c) => vec![r, c],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodeRole {
    Frequent(usize),
    Row(usize),
    Column(usize),
}

/// Bijective map between words `0..=vocab_size` (the last id is the
/// out-of-vocabulary word) and code sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTable {
    k_freq: usize,
    d1: usize,
    d2: usize,
    vocab_size: usize,
    /// Cell of each dense word, indexed by `word - k_freq`.
    cell_of: Vec<usize>,
    /// Word occupying each cell, if any.
    word_at: Vec<Option<usize>>,
}

impl CodeTable {
    /// Frequent words get exclusive codes; the rest fill the table row-major
    /// in frequency order, with the out-of-vocabulary word in the last cell.
    pub fn init(vocab_size: usize, k_freq: usize, d1: usize, d2: usize) -> Result<Self> {
        check_capacity(vocab_size, k_freq, d1, d2)?;
        let cells = d1 * d2;
        let dense = vocab_size - k_freq;
        let mut cell_of: Vec<usize> = (0..dense).collect();
        cell_of.push(cells - 1);
        Self::from_cells(vocab_size, k_freq, d1, d2, cell_of)
    }

    /// Builds a table from explicit cells for the dense words
    /// `k_freq..=vocab_size` (the last entry is the out-of-vocabulary word).
    pub fn from_cells(vocab_size: usize, k_freq: usize, d1: usize, d2: usize, cell_of: Vec<usize>) -> Result<Self> {
        check_capacity(vocab_size, k_freq, d1, d2)?;
        let cells = d1 * d2;
        if cell_of.len() != vocab_size - k_freq + 1 {
            return Err(Error::arg(format!(
                "expected {} dense cells, got {}",
                vocab_size - k_freq + 1,
                cell_of.len()
            )));
        }
        if *cell_of.last().expect("nonempty") != cells - 1 {
            return Err(Error::arg("the out-of-vocabulary word must occupy the last cell"));
        }
        let mut word_at = vec![None; cells];
        for (i, &cell) in cell_of.iter().enumerate() {
            let slot = word_at
                .get_mut(cell)
                .ok_or_else(|| Error::arg(format!("cell {cell} outside a {d1}x{d2} table")))?;
            if slot.is_some() {
                return Err(Error::arg(format!("cell {cell} assigned twice")));
            }
            *slot = Some(k_freq + i);
        }
        Ok(CodeTable {
            k_freq,
            d1,
            d2,
            vocab_size,
            cell_of,
            word_at,
        })
    }

    pub fn k_freq(&self) -> usize {
        self.k_freq
    }

    pub fn rows(&self) -> usize {
        self.d1
    }

    pub fn cols(&self) -> usize {
        self.d2
    }

    /// Number of in-vocabulary words; word id `vocab_size` is the OOV word.
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn unk_id(&self) -> usize {
        self.vocab_size
    }

    /// Total words the table encodes, OOV included.
    pub fn n_words(&self) -> usize {
        self.vocab_size + 1
    }

    /// Size of the unified code dictionary.
    pub fn n_codes(&self) -> usize {
        self.k_freq + self.d1 + self.d2
    }

    pub fn n_cells(&self) -> usize {
        self.d1 * self.d2
    }

    pub fn row_code(&self, row: usize) -> CodeId {
        CodeId((self.k_freq + row) as u32)
    }

    pub fn col_code(&self, col: usize) -> CodeId {
        CodeId((self.k_freq + self.d1 + col) as u32)
    }

    pub fn role(&self, code: CodeId) -> Option<CodeRole> {
        let c = code.index();
        if c < self.k_freq {
            Some(CodeRole::Frequent(c))
        } else if c < self.k_freq + self.d1 {
            Some(CodeRole::Row(c - self.k_freq))
        } else if c < self.n_codes() {
            Some(CodeRole::Column(c - self.k_freq - self.d1))
        } else {
            None
        }
    }

    /// Cell index of a dense word.
    pub fn cell_of(&self, word: usize) -> Option<usize> {
        word.checked_sub(self.k_freq).and_then(|i| self.cell_of.get(i).copied())
    }

    pub fn word_at(&self, cell: usize) -> Option<usize> {
        self.word_at.get(cell).copied().flatten()
    }

    /// Dense-word cells, `k_freq..=vocab_size` in order.
    pub fn cells(&self) -> &[usize] {
        &self.cell_of
    }

    pub fn encode_word(&self, word: usize) -> Result<CodeSeq> {
        if word > self.vocab_size {
            return Err(Error::arg(format!(
                "word id {word} out of range (vocabulary {} + OOV)",
                self.vocab_size
            )));
        }
        Ok(self.encode_unchecked(word))
    }

    #[inline]
    pub(crate) fn encode_unchecked(&self, word: usize) -> CodeSeq {
        if word < self.k_freq {
            CodeSeq::Single(CodeId(word as u32))
        } else {
            let cell = self.cell_of[word - self.k_freq];
            CodeSeq::Pair(self.row_code(cell / self.d2), self.col_code(cell % self.d2))
        }
    }

    /// Concatenated code stream of a sentence of word ids.
    pub fn encode_sentence(&self, words: &[usize]) -> Result<Vec<CodeId>> {
        let mut out = Vec::with_capacity(words.len() * 2);
        for &w in words {
            match self.encode_word(w)? {
                CodeSeq::Single(c) => out.push(c),
                CodeSeq::Pair(r, c) => out.extend([r, c]),
            }
        }
        Ok(out)
    }

    pub fn encode_corpus(&self, corpus: &[Vec<usize>]) -> Result<EncodedCorpus> {
        let streams = corpus.iter().map(|s| self.encode_sentence(s)).collect::<Result<_>>()?;
        Ok(EncodedCorpus { streams })
    }

    /// Parses a code stream back into word ids.
    pub fn decode_sequence(&self, codes: &[CodeId]) -> Result<Vec<usize>> {
        let mut words = Vec::new();
        let mut i = 0;
        while i < codes.len() {
            match self.role(codes[i]) {
                Some(CodeRole::Frequent(w)) => {
                    words.push(w);
                    i += 1;
                }
                Some(CodeRole::Row(r)) => {
                    let Some(&next) = codes.get(i + 1) else {
                        return Err(Error::malformed(i + 1, "stream ends after a row code"));
                    };
                    let Some(CodeRole::Column(c)) = self.role(next) else {
                        return Err(Error::malformed(
                            i + 1,
                            format!("row code followed by non-column code {next}"),
                        ));
                    };
                    let w = self
                        .word_at(r * self.d2 + c)
                        .ok_or_else(|| Error::malformed(i, format!("cell ({r}, {c}) holds no word")))?;
                    words.push(w);
                    i += 2;
                }
                Some(CodeRole::Column(_)) => {
                    return Err(Error::malformed(i, "column code at the start of a word"));
                }
                None => {
                    return Err(Error::malformed(
                        i,
                        format!("code {} outside dictionary of {}", codes[i], self.n_codes()),
                    ));
                }
            }
        }
        Ok(words)
    }

    /// Returns a copy with the dense words moved to `cell_of`. Frequent codes
    /// and the OOV cell stay put.
    pub fn with_cells(&self, cell_of: Vec<usize>) -> Result<Self> {
        Self::from_cells(self.vocab_size, self.k_freq, self.d1, self.d2, cell_of)
    }

    /// Writes the `#hlr-v1` table file. `words` are the vocabulary words in id
    /// order; `seed` is recorded in the header when given.
    pub fn write<W: Write, S: AsRef<str>>(&self, words: &[S], seed: Option<u64>, mut out: W) -> Result<()> {
        if words.len() != self.vocab_size {
            return Err(Error::arg(format!(
                "table covers {} words but {} were given",
                self.vocab_size,
                words.len()
            )));
        }
        let io = |e| Error::io("<table output>", e);
        write!(
            out,
            "{MAGIC} {} {} {} {}",
            self.k_freq, self.d1, self.d2, self.vocab_size
        )
        .map_err(io)?;
        if let Some(seed) = seed {
            write!(out, " seed={seed}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
        for (id, w) in words.iter().enumerate() {
            match self.encode_unchecked(id) {
                CodeSeq::Single(c) => writeln!(out, "{}\t{c}", w.as_ref()),
                CodeSeq::Pair(r, c) => writeln!(out, "{}\t{r},{c}", w.as_ref()),
            }
            .map_err(io)?;
        }
        Ok(())
    }

    /// Reads a `#hlr-v1` table file.
    pub fn read<R: BufRead>(input: R) -> Result<TableFile> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing header"))?
            .map_err(|e| Error::parse(1, e.to_string()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.first() != Some(&MAGIC) || !(5..=6).contains(&fields.len()) {
            return Err(Error::parse(
                1,
                format!("expected `{MAGIC} K_freq d1 d2 vocab_size [seed=N]`"),
            ));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(1, format!("bad header field {s:?}")))
        };
        let (k_freq, d1, d2, vocab_size) = (num(fields[1])?, num(fields[2])?, num(fields[3])?, num(fields[4])?);
        let seed = match fields.get(5) {
            None => None,
            Some(f) => Some(
                f.strip_prefix("seed=")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::parse(1, format!("bad seed field {f:?}")))?,
            ),
        };
        check_capacity(vocab_size, k_freq, d1, d2).map_err(|e| Error::parse(1, e.to_string()))?;
        let n_codes = k_freq + d1 + d2;
        let mut words = Vec::with_capacity(vocab_size);
        let mut cell_of = Vec::with_capacity(vocab_size - k_freq + 1);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
            let (word, codes) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(lineno, "expected word<TAB>codes"))?;
            let word = Token::new(word).map_err(|e| Error::parse(lineno, e.to_string()))?;
            let codes: Vec<usize> = codes
                .split(',')
                .map(|c| c.parse::<usize>().ok().filter(|&c| c < n_codes))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::parse(lineno, format!("bad code list {codes:?}")))?;
            let id = words.len();
            match codes[..] {
                [c] if id < k_freq && c == id => {}
                [r, c] if id >= k_freq && (k_freq..k_freq + d1).contains(&r) && (k_freq + d1..n_codes).contains(&c) => {
                    cell_of.push((r - k_freq) * d2 + (c - k_freq - d1));
                }
                _ => {
                    return Err(Error::parse(
                        lineno,
                        format!("codes {codes:?} invalid for word id {id}"),
                    ))
                }
            }
            words.push(word);
        }
        if words.len() != vocab_size {
            return Err(Error::parse(
                0,
                format!("header says {vocab_size} words, file has {}", words.len()),
            ));
        }
        cell_of.push(d1 * d2 - 1);
        let table =
            CodeTable::from_cells(vocab_size, k_freq, d1, d2, cell_of).map_err(|e| Error::parse(0, e.to_string()))?;
        Ok(TableFile { words, table, seed })
    }
}

/// A loaded table together with the words it covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableFile {
    pub words: Vec<Token>,
    pub table: CodeTable,
    pub seed: Option<u64>,
}

impl TableFile {
    /// Word → id lookup for encoding text.
    pub fn word_index(&self) -> std::collections::HashMap<&str, usize> {
        self.words.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect()
    }
}

fn check_capacity(vocab_size: usize, k_freq: usize, d1: usize, d2: usize) -> Result<()> {
    if k_freq > vocab_size {
        return Err(Error::arg(format!(
            "K_freq {k_freq} exceeds vocabulary size {vocab_size}"
        )));
    }
    let capacity = d1.checked_mul(d2).and_then(|c| c.checked_add(k_freq));
    // The OOV word needs a cell of its own.
    match capacity {
        Some(cap) if d1 > 0 && d2 > 0 && cap > vocab_size => Ok(()),
        _ => Err(Error::arg(format!(
            "capacity K_freq + d1*d2 = {k_freq} + {d1}*{d2} is below |V| = {} (vocabulary {vocab_size} + OOV)",
            vocab_size + 1
        ))),
    }
}

/// Convenience constructor from a vocabulary.
pub fn init_table(vocab: &Vocabulary, k_freq: usize, d1: usize, d2: usize) -> Result<CodeTable> {
    CodeTable::init(vocab.len(), k_freq, d1, d2)
}

/// Per-sentence code streams.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub streams: Vec<Vec<CodeId>>,
}

impl EncodedCorpus {
    pub fn total_codes(&self) -> usize {
        self.streams.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }
}

/// An autoregressive model over code streams.
///
/// `start` returns the state after the sentence-start symbol and fills
/// `logp` with log-probabilities of the first code; `step` consumes one code
/// and fills `logp` for the next position.
pub trait CodeModel: Sync {
    type State: Clone + Send;

    fn n_codes(&self) -> usize;

    fn start(&self, logp: &mut [f64]) -> Result<Self::State>;

    fn step(&self, state: &mut Self::State, code: CodeId, logp: &mut [f64]) -> Result<()>;
}

/// Uniform distribution over `n` codes.
#[derive(Clone, Copy, Debug)]
pub struct UniformModel(pub usize);

impl CodeModel for UniformModel {
    type State = ();

    fn n_codes(&self) -> usize {
        self.0
    }

    fn start(&self, logp: &mut [f64]) -> Result<()> {
        logp.fill(-(self.0 as f64).ln());
        Ok(())
    }

    fn step(&self, _: &mut (), _: CodeId, logp: &mut [f64]) -> Result<()> {
        logp.fill(-(self.0 as f64).ln());
        Ok(())
    }
}

fn check_model<M: CodeModel>(table: &CodeTable, lm: &M) -> Result<()> {
    if lm.n_codes() != table.n_codes() {
        return Err(Error::Contract(format!(
            "model predicts {} codes but the table dictionary has {}",
            lm.n_codes(),
            table.n_codes()
        )));
    }
    Ok(())
}

/// Total negative log-likelihood (nats) of the corpus encoded with `table`.
pub fn corpus_log_likelihood<M: CodeModel>(table: &CodeTable, lm: &M, corpus: &[Vec<usize>]) -> Result<f64> {
    Ok(word_nll(table, table, lm, corpus, Parallelism::Sequential)?
        .iter()
        .sum())
}

/// Negative log-likelihood per word id (`0..=vocab_size`), summed over all
/// of the word's code positions in the corpus.
pub fn word_nll_contributions<M: CodeModel>(
    table: &CodeTable,
    lm: &M,
    corpus: &[Vec<usize>],
    mode: Parallelism,
) -> Result<Vec<f64>> {
    word_nll(table, table, lm, corpus, mode)
}

/// Scores the codes of `scored` while the model's history is built from
/// `context`. Each word's contribution then depends only on its own codes in
/// `scored`, which is the independence assumption behind the assignment costs.
pub fn frozen_context_nll<M: CodeModel>(
    context: &CodeTable,
    scored: &CodeTable,
    lm: &M,
    corpus: &[Vec<usize>],
) -> Result<f64> {
    Ok(word_nll(context, scored, lm, corpus, Parallelism::Sequential)?
        .iter()
        .sum())
}

fn word_nll<M: CodeModel>(
    context: &CodeTable,
    scored: &CodeTable,
    lm: &M,
    corpus: &[Vec<usize>],
    mode: Parallelism,
) -> Result<Vec<f64>> {
    check_model(context, lm)?;
    if (context.n_words(), context.n_codes()) != (scored.n_words(), scored.n_codes()) {
        return Err(Error::Contract("context and scored tables differ in shape".into()));
    }
    let n_words = context.n_words();
    for &w in corpus.iter().flatten() {
        if w >= n_words {
            return Err(Error::arg(format!("word id {w} out of range")));
        }
    }
    let partials = exec::map_chunks(corpus, 32, mode, |_, chunk| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; n_words];
        let mut logp = vec![0.0; lm.n_codes()];
        for sentence in chunk {
            let mut state = lm.start(&mut logp)?;
            for &w in sentence {
                let ctx = context.encode_unchecked(w);
                let seq = scored.encode_unchecked(w);
                match (ctx, seq) {
                    (CodeSeq::Single(c), CodeSeq::Single(s)) => {
                        acc[w] -= logp[s.index()];
                        lm.step(&mut state, c, &mut logp)?;
                    }
                    (CodeSeq::Pair(r, c), CodeSeq::Pair(sr, sc)) => {
                        acc[w] -= logp[sr.index()];
                        lm.step(&mut state, r, &mut logp)?;
                        acc[w] -= logp[sc.index()];
                        lm.step(&mut state, c, &mut logp)?;
                    }
                    _ => unreachable!("tables share k_freq"),
                }
            }
        }
        Ok(acc)
    });
    let mut total = vec![0.0; n_words];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part?) {
            *t += p;
        }
    }
    Ok(total)
}
