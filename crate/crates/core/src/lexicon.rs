//! Graded vocabulary (L1–L4), exemptions, and the vocabulary-violation check.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{split_sentences, tokenize_cased, InflectionTable, Lemmatizer};

/// Proficiency tier. `L1 < L2 < L3 < L4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
    L4,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::L1, Level::L2, Level::L3, Level::L4];

    pub fn rank(self) -> u8 {
        self as u8 + 1
    }

    /// Zero-based index, used as a feature id.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_rank(rank: u8) -> Option<Level> {
        Level::ALL.get((rank as usize).checked_sub(1)?).copied()
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.rank())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let rank = s
            .strip_prefix('L')
            .or_else(|| s.strip_prefix('l'))
            .and_then(|r| r.parse::<u8>().ok());
        rank.and_then(Level::from_rank)
            .ok_or_else(|| format!("unknown level `{s}` (expected L1..L4)"))
    }
}

/// Why a token was skipped by the vocabulary check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exemption {
    ProperNoun,
    Number,
    Filler,
    HistoryIntroduced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemptToken {
    pub token: String,
    pub reason: Exemption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub violating_lemmas: BTreeSet<String>,
    pub exempt_tokens: Vec<ExemptToken>,
    pub violated: bool,
}

/// A word token with its original casing and index inside its sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionedToken {
    pub cased: String,
    pub lower: String,
    pub position: usize,
}

/// Word tokens of `text`, positioned per sentence.
pub fn positioned_tokens(text: &str) -> Vec<PositionedToken> {
    split_sentences(text)
        .iter()
        .flat_map(|sentence| {
            tokenize_cased(sentence)
                .into_iter()
                .enumerate()
                .map(|(position, cased)| PositionedToken {
                    lower: cased.to_lowercase(),
                    cased,
                    position,
                })
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct GradedLexicon {
    entries: HashMap<String, Level>,
    fillers: HashSet<String>,
    proper_allowlist: HashSet<String>,
    lemmatizer: Lemmatizer,
}

enum Section {
    Entries,
    Fillers,
    Proper,
}

impl GradedLexicon {
    /// Parses the lexicon CSV: `lemma,level` rows, then optional `#fillers`
    /// and `#proper` sections with one token per line.
    pub fn parse(source: &str, path: &Path) -> Result<Self> {
        let mut lexicon = GradedLexicon::default();
        let mut first_seen: HashMap<String, usize> = HashMap::new();
        let mut section = Section::Entries;

        for (idx, raw) in source.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            match line.to_ascii_lowercase().as_str() {
                "#fillers" => {
                    section = Section::Fillers;
                    continue;
                }
                "#proper" => {
                    section = Section::Proper;
                    continue;
                }
                "lemma,level" if line_no == 1 => continue,
                _ => {}
            }
            match section {
                Section::Entries => {
                    let mut cols = line.split(',');
                    let (Some(lemma), Some(level), None) = (cols.next(), cols.next(), cols.next())
                    else {
                        return Err(Error::parse(path, line_no, "expected `lemma,level`"));
                    };
                    let lemma = lemma.trim().to_lowercase();
                    if lemma.is_empty() {
                        return Err(Error::parse(path, line_no, "empty lemma"));
                    }
                    let level: Level = level
                        .parse()
                        .map_err(|msg: String| Error::parse(path, line_no, msg))?;
                    if let Some(prev) = lexicon.entries.get(&lemma) {
                        if *prev != level {
                            return Err(Error::DuplicateLemma {
                                lemma,
                                first: prev.to_string(),
                                second: level.to_string(),
                                line: line_no,
                            });
                        }
                        continue;
                    }
                    first_seen.insert(lemma.clone(), line_no);
                    lexicon.entries.insert(lemma, level);
                }
                Section::Fillers => {
                    lexicon.fillers.insert(line.to_lowercase());
                }
                Section::Proper => {
                    lexicon.proper_allowlist.insert(line.to_lowercase());
                }
            }
        }

        for token in lexicon.fillers.iter().chain(&lexicon.proper_allowlist) {
            if lexicon.entries.contains_key(token) {
                return Err(Error::parse(
                    path,
                    first_seen[token],
                    format!("`{token}` is both graded and listed as filler/proper"),
                ));
            }
        }
        Ok(lexicon)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let source = std::fs::read_to_string(path)?;
        Self::parse(&source, path)
    }

    /// Attaches the inflection table used for lemmatization.
    pub fn with_inflections(mut self, table: InflectionTable) -> Self {
        self.lemmatizer = Lemmatizer::new(table);
        self
    }

    pub fn inflections(&self) -> &InflectionTable {
        self.lemmatizer.table()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn level_of(&self, lemma: &str) -> Option<Level> {
        self.entries.get(lemma).copied()
    }

    pub fn level_counts(&self) -> BTreeMap<Level, usize> {
        let mut counts = BTreeMap::new();
        for level in self.entries.values() {
            *counts.entry(*level).or_insert(0) += 1;
        }
        counts
    }

    /// Lemmas at or below `level`, sorted.
    pub fn lemmas_up_to(&self, level: Level) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .entries
            .iter()
            .filter(|(_, l)| **l <= level)
            .map(|(w, _)| w.as_str())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn is_filler(&self, token: &str) -> bool {
        self.fillers.contains(token)
    }

    pub fn is_allowlisted_proper(&self, token: &str) -> bool {
        self.proper_allowlist.contains(token)
    }

    pub fn lemmatize(&self, token: &str) -> String {
        self.lemmatizer
            .lemmatize(token, |w| self.entries.contains_key(w))
    }

    /// True when `lemma` is out of list or graded above `level`.
    pub fn exceeds(&self, lemma: &str, level: Level) -> bool {
        self.level_of(lemma).is_none_or(|l| l > level)
    }

    /// Exemptions that do not depend on dialogue history: proper nouns,
    /// numbers and fillers.
    pub fn intrinsic_exemption(&self, cased: &str, position: usize) -> Option<Exemption> {
        let lower = cased.to_lowercase();
        if cased.chars().all(|c| c.is_ascii_digit()) {
            return Some(Exemption::Number);
        }
        if self.is_filler(&lower) {
            return Some(Exemption::Filler);
        }
        if self.is_allowlisted_proper(&lower) {
            return Some(Exemption::ProperNoun);
        }
        // the pronoun "I" is capitalized everywhere
        let capitalized = cased.chars().next().is_some_and(char::is_uppercase);
        if capitalized && position > 0 && lower != "i" {
            return Some(Exemption::ProperNoun);
        }
        None
    }

    pub fn classify_exemption(
        &self,
        cased: &str,
        position: usize,
        history_oov: &HashSet<String>,
    ) -> Option<Exemption> {
        self.intrinsic_exemption(cased, position).or_else(|| {
            let lemma = self.lemmatize(&cased.to_lowercase());
            history_oov
                .contains(&lemma)
                .then_some(Exemption::HistoryIntroduced)
        })
    }

    /// Non-exempt lemmas in `turns` that would violate `level`.
    pub fn history_oov<S: AsRef<str>>(&self, turns: &[S], level: Level) -> HashSet<String> {
        let mut oov = HashSet::new();
        for turn in turns {
            for tok in positioned_tokens(turn.as_ref()) {
                if self.intrinsic_exemption(&tok.cased, tok.position).is_some() {
                    continue;
                }
                let lemma = self.lemmatize(&tok.lower);
                if self.exceeds(&lemma, level) {
                    oov.insert(lemma);
                }
            }
        }
        oov
    }

    /// Flags every non-exempt lemma that is out of list or above `level`.
    ///
    /// `history` holds the prior turns of both speakers, oldest first.
    pub fn violation_check<S: AsRef<str>>(
        &self,
        response: &str,
        level: Level,
        history: &[S],
    ) -> ViolationReport {
        let history_oov = self.history_oov(history, level);
        let mut violating_lemmas = BTreeSet::new();
        let mut exempt_tokens = Vec::new();
        for tok in positioned_tokens(response) {
            if let Some(reason) = self.classify_exemption(&tok.cased, tok.position, &history_oov) {
                exempt_tokens.push(ExemptToken {
                    token: tok.cased,
                    reason,
                });
                continue;
            }
            let lemma = self.lemmatize(&tok.lower);
            if self.exceeds(&lemma, level) {
                violating_lemmas.insert(lemma);
            }
        }
        ViolationReport {
            violated: !violating_lemmas.is_empty(),
            violating_lemmas,
            exempt_tokens,
        }
    }
}

/// The lexicon, inflection table and world shipped with the crate.
pub mod bundled {
    use std::path::Path;

    use super::GradedLexicon;
    use crate::text::InflectionTable;

    pub const LEXICON_CSV: &str = include_str!("../data/lexicon.csv");
    pub const INFLECTIONS_CSV: &str = include_str!("../data/inflections.csv");

    pub fn inflections() -> InflectionTable {
        InflectionTable::parse(INFLECTIONS_CSV, Path::new("bundled/inflections.csv"))
            .expect("bundled inflection table parses")
    }

    pub fn lexicon() -> GradedLexicon {
        GradedLexicon::parse(LEXICON_CSV, Path::new("bundled/lexicon.csv"))
            .expect("bundled lexicon parses")
            .with_inflections(inflections())
    }
}
