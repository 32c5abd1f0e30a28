//! Whitespace tokenization and frequency-ordered vocabularies.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// End-of-word marker reserved by the subword coder. Tokens never contain it.
pub const EOW: &str = "</w>";

/// A single whitespace-free, nonempty word.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(String);

impl Token {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::arg("empty token"));
        }
        if text.chars().any(char::is_whitespace) {
            return Err(Error::arg(format!("token {text:?} contains whitespace")));
        }
        if text.contains(EOW) {
            return Err(Error::arg(format!(
                "token {text:?} contains the reserved end-of-word marker {EOW}"
            )));
        }
        Ok(Token(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

pub type Sentence = Vec<Token>;

/// Splits text on Unicode whitespace. No normalization is applied.
pub fn tokenize(text: &str) -> Result<Sentence> {
    text.split_whitespace().map(Token::new).collect()
}

/// Like [`tokenize`], but validates UTF-8 first.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<Sentence> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Decode {
        offset: e.valid_up_to(),
    })?;
    tokenize(text)
}

/// Reads a corpus file: UTF-8 text, one sentence per line.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&bytes)
}

/// Parses corpus bytes. Invalid UTF-8 is reported with its absolute byte offset.
pub fn parse_corpus(bytes: &[u8]) -> Result<Vec<Sentence>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Decode {
        offset: e.valid_up_to(),
    })?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            tokenize(line).map_err(|e| match e {
                Error::Argument(detail) => Error::parse(i + 1, detail),
                other => other,
            })
        })
        .collect()
}

/// Word list sorted by count descending, ties by word. Ids are positions in
/// that order; the id `len()` is reserved for out-of-vocabulary words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<(Token, u64)>,
    ids: HashMap<Token, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from `(word, count)` pairs, sorting them canonically.
    pub fn from_counts(counts: impl IntoIterator<Item = (Token, u64)>) -> Result<Self> {
        let mut entries: Vec<(Token, u64)> = Vec::new();
        let mut seen = HashMap::new();
        for (word, count) in counts {
            if count == 0 {
                return Err(Error::arg(format!("word {word} has zero count")));
            }
            if seen.insert(word.clone(), ()).is_some() {
                return Err(Error::arg(format!("duplicate word {word}")));
            }
            entries.push((word, count));
        }
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_sorted(entries))
    }

    fn from_sorted(entries: Vec<(Token, u64)>) -> Self {
        let ids = entries.iter().enumerate().map(|(i, (w, _))| (w.clone(), i)).collect();
        Vocabulary { entries, ids }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Id reserved for words outside the vocabulary.
    pub fn unk_id(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(Token, u64)] {
        &self.entries
    }

    pub fn word(&self, id: usize) -> Option<&Token> {
        self.entries.get(id).map(|(w, _)| w)
    }

    pub fn count(&self, id: usize) -> Option<u64> {
        self.entries.get(id).map(|(_, c)| *c)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        // Token hashes like its inner string; build a probe without validation.
        self.ids.get(&Token(word.to_owned())).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(self.unk_id())
    }

    pub fn total_count(&self) -> u64 {
        self.entries.iter().map(|(_, c)| c).sum()
    }

    /// Maps a sentence to word ids, sending unknown words to [`Self::unk_id`].
    pub fn encode_sentence(&self, sentence: &[Token]) -> Vec<usize> {
        sentence.iter().map(|t| self.id_or_unk(t.as_str())).collect()
    }

    pub fn encode_corpus(&self, corpus: &[Sentence]) -> Vec<Vec<usize>> {
        corpus.iter().map(|s| self.encode_sentence(s)).collect()
    }

    /// Writes `word<TAB>count` lines in canonical order.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (w, c) in &self.entries {
            writeln!(out, "{w}\t{c}")?;
        }
        Ok(())
    }

    /// Reads `word<TAB>count` lines. The file must already be in canonical order.
    pub fn read_tsv<R: BufRead>(input: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::parse(i + 1, e.to_string()))?;
            let (word, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(i + 1, "expected word<TAB>count"))?;
            let word = Token::new(word).map_err(|e| Error::parse(i + 1, e.to_string()))?;
            let count: u64 = count
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("bad count {count:?}")))?;
            entries.push((word, count));
        }
        let vocab = Self::from_counts(entries.clone())?;
        if vocab.entries != entries {
            return Err(Error::parse(0, "vocabulary file is not in canonical order"));
        }
        Ok(vocab)
    }
}

/// Counts words in `corpus` and keeps the `max_size` most frequent.
pub fn build_vocab(corpus: &[Sentence], max_size: usize) -> Result<Vocabulary> {
    if max_size == 0 {
        return Err(Error::arg("max_size must be positive"));
    }
    if corpus.is_empty() {
        return Err(Error::arg("corpus is empty"));
    }
    let mut counts: HashMap<&Token, u64> = HashMap::new();
    for tok in corpus.iter().flatten() {
        *counts.entry(tok).or_default() += 1;
    }
    let mut entries: Vec<(Token, u64)> = counts.into_iter().map(|(w, c)| (w.clone(), c)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(max_size);
    Ok(Vocabulary::from_sorted(entries))
}
