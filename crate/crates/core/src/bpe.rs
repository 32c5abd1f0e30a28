//! Byte pair encoding over characters with an explicit end-of-word code.
//!
//! Training starts from the character alphabet of the vocabulary plus the
//! end-of-word marker and repeatedly merges the most frequent adjacent pair
//! of codes, counting pairs per word type weighted by word frequency. Pair
//! ties go to the lexicographically smallest `(left, right)`. Training stops
//! when the dictionary reaches its target size or the best pair occurs fewer
//! than two times.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::io::{BufRead, Write};

use crate::corpus::{Token, Vocabulary, EOW};
use crate::error::{Error, Result};

const MAGIC: &str = "#bpe-v1";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MergeRule {
    pub left: String,
    pub right: String,
    pub merged: String,
}

impl MergeRule {
    pub fn new(left: impl Into<String>, right: impl Into<String>) -> Self {
        let left = left.into();
        let right = right.into();
        let merged = format!("{left}{right}");
        MergeRule { left, right, merged }
    }
}

/// Ordered merge rules plus the initial alphabet and end-of-word marker.
#[derive(Clone, Debug)]
pub struct MergeList {
    rules: Vec<MergeRule>,
    alphabet: BTreeSet<String>,
    eow: String,
    ranks: HashMap<String, HashMap<String, usize>>,
}

impl PartialEq for MergeList {
    fn eq(&self, other: &Self) -> bool {
        self.rules == other.rules && self.alphabet == other.alphabet && self.eow == other.eow
    }
}

impl MergeList {
    /// Validates and indexes a rule list.
    pub fn new(rules: Vec<MergeRule>, alphabet: BTreeSet<String>, eow: impl Into<String>) -> Result<Self> {
        let eow = eow.into();
        if eow.is_empty() || eow.chars().any(char::is_whitespace) {
            return Err(Error::arg(format!("bad end-of-word marker {eow:?}")));
        }
        let mut known: HashSet<&str> = alphabet.iter().map(String::as_str).collect();
        known.insert(&eow);
        let mut ranks: HashMap<String, HashMap<String, usize>> = HashMap::new();
        for (i, rule) in rules.iter().enumerate() {
            if rule.merged != format!("{}{}", rule.left, rule.right) {
                return Err(Error::arg(format!("rule {i}: merged code is not left+right")));
            }
            for side in [&rule.left, &rule.right] {
                if !known.contains(side.as_str()) {
                    return Err(Error::arg(format!("rule {i}: unknown code {side:?}")));
                }
            }
            let slot = ranks.entry(rule.left.clone()).or_default();
            if slot.insert(rule.right.clone(), i).is_some() {
                return Err(Error::arg(format!(
                    "rule {i}: duplicate rule ({}, {})",
                    rule.left, rule.right
                )));
            }
            known.insert(&rule.merged);
        }
        Ok(MergeList {
            rules,
            alphabet,
            eow,
            ranks,
        })
    }

    pub fn rules(&self) -> &[MergeRule] {
        &self.rules
    }

    pub fn alphabet(&self) -> &BTreeSet<String> {
        &self.alphabet
    }

    pub fn eow(&self) -> &str {
        &self.eow
    }

    /// Alphabet, end-of-word marker, and one code per merge.
    pub fn dictionary_size(&self) -> usize {
        self.alphabet.len() + 1 + self.rules.len()
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(left)?.get(right).copied()
    }

    /// Segments one word. Rules are applied in training order, each one
    /// exhaustively left to right.
    pub fn encode(&self, word: &Token) -> Vec<String> {
        let mut codes = initial_codes(word.as_str(), &self.eow);
        let mut last: Option<usize> = None;
        loop {
            // Earliest rule after `last` that matches somewhere. Rules in
            // between match nowhere, so skipping them changes nothing.
            let next = codes
                .windows(2)
                .filter_map(|p| self.rank(&p[0], &p[1]))
                .filter(|&r| last.is_none_or(|l| r > l))
                .min();
            let Some(r) = next else { break };
            apply_rule(&mut codes, &self.rules[r]);
            last = Some(r);
        }
        codes
    }

    /// Concatenates codes back into words, splitting after each code that ends
    /// with the end-of-word marker.
    pub fn decode<S: AsRef<str>>(&self, codes: &[S]) -> Result<Vec<Token>> {
        decode_with(codes, &self.eow)
    }

    /// Writes the `#bpe-v1` merge file.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{MAGIC} {}", self.eow)?;
        for rule in &self.rules {
            writeln!(out, "{} {}", rule.left, rule.right)?;
        }
        Ok(())
    }

    /// Reads a `#bpe-v1` merge file. The file does not list the alphabet, so
    /// it is rebuilt from the single characters the rules start from.
    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing header"))?
            .map_err(|e| Error::parse(1, e.to_string()))?;
        let eow = header
            .strip_prefix(MAGIC)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| Error::parse(1, format!("expected `{MAGIC} <eow>`")))?
            .to_owned();
        let mut rules = Vec::new();
        let mut produced: HashSet<String> = HashSet::new();
        let mut alphabet = BTreeSet::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
            let (left, right) = line
                .split_once(' ')
                .filter(|(l, r)| !l.is_empty() && !r.is_empty() && !r.contains(' '))
                .ok_or_else(|| Error::parse(lineno, "expected `left right`"))?;
            for side in [left, right] {
                if side != eow && !produced.contains(side) {
                    let mut chars = side.chars();
                    match (chars.next(), chars.next()) {
                        (Some(_), None) => {
                            alphabet.insert(side.to_owned());
                        }
                        _ => {
                            return Err(Error::parse(
                                lineno,
                                format!("code {side:?} is neither a character nor an earlier merge"),
                            ))
                        }
                    }
                }
            }
            let rule = MergeRule::new(left, right);
            produced.insert(rule.merged.clone());
            rules.push(rule);
        }
        MergeList::new(rules, alphabet, eow).map_err(|e| Error::parse(0, e.to_string()))
    }
}

fn initial_codes(word: &str, eow: &str) -> Vec<String> {
    word.chars()
        .map(String::from)
        .chain(std::iter::once(eow.to_owned()))
        .collect()
}

fn apply_rule(codes: &mut Vec<String>, rule: &MergeRule) {
    let mut i = 0;
    while i + 1 < codes.len() {
        if codes[i] == rule.left && codes[i + 1] == rule.right {
            codes[i] = rule.merged.clone();
            codes.remove(i + 1);
        }
        i += 1;
    }
}

fn decode_with<S: AsRef<str>>(codes: &[S], eow: &str) -> Result<Vec<Token>> {
    let mut words = Vec::new();
    let mut buf = String::new();
    for (pos, code) in codes.iter().enumerate() {
        let code = code.as_ref();
        match code.find(eow) {
            Some(at) if at + eow.len() == code.len() => {
                buf.push_str(&code[..at]);
                let word = Token::new(std::mem::take(&mut buf)).map_err(|e| Error::malformed(pos, e.to_string()))?;
                words.push(word);
            }
            Some(_) => {
                return Err(Error::malformed(
                    pos,
                    format!("end-of-word marker inside code {code:?}"),
                ))
            }
            None => buf.push_str(code),
        }
    }
    if !buf.is_empty() {
        return Err(Error::malformed(
            codes.len(),
            format!("dangling suffix {buf:?} without end-of-word marker"),
        ));
    }
    Ok(words)
}

/// Trains merges with the default end-of-word marker.
pub fn train_bpe(vocab: &Vocabulary, target_dict_size: usize) -> Result<MergeList> {
    train_bpe_with_eow(vocab, target_dict_size, EOW)
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    // Max-heap: higher count first, then the smaller (left, right).
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| (&other.left, &other.right).cmp(&(&self.left, &self.right)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Trainer {
    symbols: Vec<String>,
    words: Vec<(Vec<u32>, u64)>,
    counts: HashMap<(u32, u32), u64>,
    occurs_in: HashMap<(u32, u32), BTreeSet<usize>>,
    heap: BinaryHeap<Candidate>,
}

impl Trainer {
    fn candidate(&self, pair: (u32, u32)) -> Candidate {
        Candidate {
            count: self.counts.get(&pair).copied().unwrap_or(0),
            left: self.symbols[pair.0 as usize].clone(),
            right: self.symbols[pair.1 as usize].clone(),
            pair,
        }
    }

    fn add_word_pairs(&mut self, w: usize, touched: &mut HashSet<(u32, u32)>) {
        let (codes, count) = &self.words[w];
        for p in codes.windows(2) {
            let pair = (p[0], p[1]);
            *self.counts.entry(pair).or_default() += count;
            self.occurs_in.entry(pair).or_default().insert(w);
            touched.insert(pair);
        }
    }

    fn remove_word_pairs(&mut self, w: usize) {
        let (codes, count) = &self.words[w];
        for p in codes.windows(2) {
            let c = self.counts.get_mut(&(p[0], p[1])).expect("pair was counted");
            *c -= count;
        }
    }

    /// Highest-count pair, discarding heap entries whose count went stale.
    fn best(&mut self) -> Option<Candidate> {
        while let Some(top) = self.heap.pop() {
            let current = self.counts.get(&top.pair).copied().unwrap_or(0);
            if current == top.count {
                return Some(top);
            }
            if current > 0 && current < top.count {
                self.heap.push(Candidate { count: current, ..top });
            }
        }
        None
    }
}

/// Trains merges until the dictionary (alphabet + marker + merges) reaches
/// `target_dict_size` or no pair occurs at least twice.
pub fn train_bpe_with_eow(vocab: &Vocabulary, target_dict_size: usize, eow: &str) -> Result<MergeList> {
    let alphabet: BTreeSet<String> = vocab
        .entries()
        .iter()
        .flat_map(|(w, _)| w.as_str().chars().map(String::from))
        .collect();
    let base = alphabet.len() + 1;
    if target_dict_size < base {
        return Err(Error::arg(format!(
            "target dictionary size {target_dict_size} is below the alphabet size {base} (characters + end-of-word)"
        )));
    }
    if let Some((w, _)) = vocab.entries().iter().find(|(w, _)| w.as_str().contains(eow)) {
        return Err(Error::arg(format!("word {w} contains the end-of-word marker {eow}")));
    }

    let mut symbols: Vec<String> = Vec::new();
    let mut ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: &str, symbols: &mut Vec<String>| -> u32 {
        *ids.entry(s.to_owned()).or_insert_with(|| {
            symbols.push(s.to_owned());
            (symbols.len() - 1) as u32
        })
    };
    let mut words = Vec::with_capacity(vocab.len());
    for (w, c) in vocab.entries() {
        let codes = initial_codes(w.as_str(), eow)
            .iter()
            .map(|s| intern(s, &mut symbols))
            .collect();
        words.push((codes, *c));
    }

    let mut t = Trainer {
        symbols,
        words,
        counts: HashMap::new(),
        occurs_in: HashMap::new(),
        heap: BinaryHeap::new(),
    };
    let mut touched = HashSet::new();
    for w in 0..t.words.len() {
        t.add_word_pairs(w, &mut touched);
    }
    for pair in touched.drain() {
        let cand = t.candidate(pair);
        t.heap.push(cand);
    }

    let mut rules = Vec::new();
    while base + rules.len() < target_dict_size {
        let Some(best) = t.best() else { break };
        if best.count < 2 {
            break;
        }
        let rule = MergeRule::new(best.left, best.right);
        let merged_id = intern(&rule.merged, &mut t.symbols);
        let (l, r) = best.pair;
        let affected: Vec<usize> = t.occurs_in.remove(&best.pair).into_iter().flatten().collect();
        for w in affected {
            t.remove_word_pairs(w);
            let codes = &mut t.words[w].0;
            let mut i = 0;
            while i + 1 < codes.len() {
                if codes[i] == l && codes[i + 1] == r {
                    codes[i] = merged_id;
                    codes.remove(i + 1);
                }
                i += 1;
            }
            t.add_word_pairs(w, &mut touched);
        }
        let mut fresh: Vec<(u32, u32)> = touched.drain().collect();
        fresh.sort_unstable();
        for pair in fresh {
            let cand = t.candidate(pair);
            if cand.count > 0 {
                t.heap.push(cand);
            }
        }
        log::trace!(
            "merge {} ({} + {}) count {}",
            rules.len(),
            rule.left,
            rule.right,
            best.count
        );
        rules.push(rule);
    }
    MergeList::new(rules, alphabet, eow)
}

/// Total number of codes needed to encode every vocabulary word, weighted by count.
pub fn encoded_length(vocab: &Vocabulary, merges: &MergeList) -> u64 {
    vocab
        .entries()
        .iter()
        .map(|(w, c)| merges.encode(w).len() as u64 * c)
        .sum()
}
