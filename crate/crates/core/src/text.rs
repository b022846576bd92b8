//! Text primitives shared by the reward and metric code.
//!
//! Everything here works on lowercase word tokens: punctuation is dropped,
//! runs of digits form single number tokens, and an apostrophe inside a word
//! splits it into a base and a clitic (`I'm` becomes `i`, `'m`).

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered lowercase word tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn new(tokens: Vec<String>) -> Self {
        TokenSeq(tokens)
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().map(Into::into).collect())
    }
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Splits text into word tokens while preserving the original casing.
///
/// The casing is needed by the proper-noun heuristic; everything else should
/// go through [`tokenize`].
pub fn tokenize_cased(text: &str) -> Vec<String> {
    #[derive(PartialEq, Clone, Copy)]
    enum Run {
        None,
        Word,
        Digits,
    }

    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut run = Run::None;

    let flush = |current: &mut String, tokens: &mut Vec<String>| {
        if !current.is_empty() {
            tokens.push(std::mem::take(current));
        }
    };

    for (idx, &c) in chars.iter().enumerate() {
        if c.is_ascii_digit() {
            if run != Run::Digits {
                flush(&mut current, &mut tokens);
                run = Run::Digits;
            }
            current.push(c);
        } else if c.is_alphanumeric() {
            if run != Run::Word {
                flush(&mut current, &mut tokens);
                run = Run::Word;
            }
            current.push(c);
        } else if is_apostrophe(c)
            && run == Run::Word
            && chars
                .get(idx + 1)
                .is_some_and(|next| next.is_alphabetic())
        {
            flush(&mut current, &mut tokens);
            current.push('\'');
            run = Run::Word;
        } else {
            flush(&mut current, &mut tokens);
            run = Run::None;
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

/// Lowercase word tokens of `text`.
pub fn tokenize(text: &str) -> TokenSeq {
    tokenize_cased(text)
        .into_iter()
        .map(|t| t.to_lowercase())
        .collect()
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits text at `.`, `!` or `?` followed by whitespace or end of input.
///
/// The terminal mark stays with its sentence and runs such as `?!` are kept
/// together. Whitespace-only fragments are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut current = String::new();

    for (idx, &c) in chars.iter().enumerate() {
        current.push(c);
        if is_terminal(c) {
            let boundary = match chars.get(idx + 1) {
                None => true,
                Some(next) => next.is_whitespace(),
            };
            if boundary {
                let trimmed = current.trim();
                if !trimmed.is_empty() {
                    sentences.push(trimmed.to_string());
                }
                current.clear();
            }
        }
    }
    let trimmed = current.trim();
    if !trimmed.is_empty() {
        sentences.push(trimmed.to_string());
    }
    sentences
}

/// Irregular and listed inflections, `inflected -> lemma`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InflectionTable {
    forms: HashMap<String, String>,
    // insertion order, for deterministic iteration
    order: Vec<String>,
}

impl InflectionTable {
    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut table = InflectionTable::default();
        for (inflected, lemma) in pairs {
            table.insert(inflected.into(), lemma.into());
        }
        table
    }

    fn insert(&mut self, inflected: String, lemma: String) {
        if self.forms.insert(inflected.clone(), lemma).is_none() {
            self.order.push(inflected);
        }
    }

    /// Parses the two-column CSV `inflected,lemma` (header row required).
    pub fn parse(source: &str, path: &Path) -> Result<Self> {
        let mut lines = source.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim().eq_ignore_ascii_case("inflected,lemma") => {}
            _ => return Err(Error::parse(path, 1, "expected header `inflected,lemma`")),
        }
        let mut table = InflectionTable::default();
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let (Some(inflected), Some(lemma), None) = (cols.next(), cols.next(), cols.next())
            else {
                return Err(Error::parse(path, idx + 1, "expected two columns"));
            };
            let (inflected, lemma) = (inflected.trim(), lemma.trim());
            if inflected.is_empty() || lemma.is_empty() {
                return Err(Error::parse(path, idx + 1, "empty column"));
            }
            table.insert(inflected.to_lowercase(), lemma.to_lowercase());
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let source = std::fs::read_to_string(path)?;
        Self::parse(&source, path)
    }

    pub fn get(&self, inflected: &str) -> Option<&str> {
        self.forms.get(inflected).map(String::as_str)
    }

    /// `(inflected, lemma)` pairs in file order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.order
            .iter()
            .map(move |k| (k.as_str(), self.forms[k].as_str()))
    }

    /// Every listed inflection of `lemma`.
    pub fn inflections_of<'a>(&'a self, lemma: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.iter()
            .filter(move |(_, l)| *l == lemma)
            .map(|(i, _)| i)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

/// If `stem` ends in a doubled consonant, the stem with one copy removed.
fn undouble(stem: &str) -> Option<String> {
    let mut rev = stem.chars().rev();
    let (Some(last), Some(prev)) = (rev.next(), rev.next()) else {
        return None;
    };
    if last == prev && last.is_ascii_alphabetic() && !is_vowel(last) {
        Some(stem[..stem.len() - last.len_utf8()].to_string())
    } else {
        None
    }
}

/// Closed-rule lemmatizer scoped to a known lemma set.
///
/// Lookup order: inflection table, known lemma as-is, then suffix rules. A
/// suffix rule only fires when it lands on a known lemma, so unknown words come
/// back unchanged and the function is idempotent.
#[derive(Debug, Clone, Default)]
pub struct Lemmatizer {
    table: InflectionTable,
}

impl Lemmatizer {
    pub fn new(table: InflectionTable) -> Self {
        Lemmatizer { table }
    }

    pub fn table(&self) -> &InflectionTable {
        &self.table
    }

    pub fn lemmatize<F>(&self, token: &str, is_known: F) -> String
    where
        F: Fn(&str) -> bool,
    {
        if let Some(lemma) = self.table.get(token) {
            return lemma.to_string();
        }
        if is_known(token) {
            return token.to_string();
        }
        Self::suffix_candidates(token)
            .into_iter()
            .find(|c| is_known(c))
            .unwrap_or_else(|| token.to_string())
    }

    fn suffix_candidates(token: &str) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(stem) = token.strip_suffix("ies").filter(|s| s.len() >= 2) {
            out.push(format!("{stem}y"));
        }
        if let Some(stem) = token.strip_suffix("es").filter(|s| !s.is_empty()) {
            out.push(stem.to_string());
        }
        if let Some(stem) = token
            .strip_suffix('s')
            .filter(|s| !s.is_empty() && !s.ends_with('s'))
        {
            out.push(stem.to_string());
        }
        if let Some(stem) = token.strip_suffix("ied").filter(|s| s.len() >= 2) {
            out.push(format!("{stem}y"));
        }
        if let Some(stem) = token.strip_suffix("ed").filter(|s| !s.is_empty()) {
            out.extend(undouble(stem));
            out.push(stem.to_string());
            out.push(format!("{stem}e"));
        }
        if let Some(stem) = token.strip_suffix("ing").filter(|s| s.len() >= 2) {
            out.extend(undouble(stem));
            out.push(stem.to_string());
            out.push(format!("{stem}e"));
        }
        out
    }
}

/// Length of the longest common subsequence, two-row dynamic program.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Rouge-L F1 between two token sequences; 0 when either is empty.
pub fn rouge_l_f1<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / candidate.len() as f64;
    let recall = lcs as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `|unique(a) ∩ unique(b)| / |unique(a)|`.
pub fn overlap_ratio<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64> {
    let left: HashSet<&T> = a.iter().collect();
    if left.is_empty() {
        return Err(Error::DegenerateResponse);
    }
    let right: HashSet<&T> = b.iter().collect();
    let shared = left.intersection(&right).count();
    Ok(shared as f64 / left.len() as f64)
}

/// Mean Rouge-L F1 over all unordered pairs; 0 for fewer than two items.
pub fn mean_pairwise_rouge_l<T: PartialEq>(seqs: &[&[T]]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..seqs.len() {
        for j in (i + 1)..seqs.len() {
            total += rouge_l_f1(seqs[i], seqs[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}
