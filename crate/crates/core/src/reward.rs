//! Reward components and their weighted composition.
//!
//! - quality: rule-based vocabulary-constraint score of a single response
//! - single-turn diversity: clipped negative mean Rouge-L of a first-turn
//!   response against the rest of its group
//! - multi-turn diversity: negative token-overlap of a later response with the
//!   current user turn and the previous assistant turn

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{positioned_tokens, GradedLexicon, Level};
use crate::text::{overlap_ratio, rouge_l_f1, split_sentences, tokenize, TokenSeq};

/// Inclusive word-count window for a level.
pub fn length_range(level: Level) -> (usize, usize) {
    match level {
        Level::L1 => (10, 15),
        Level::L2 => (10, 20),
        Level::L3 | Level::L4 => (20, 30),
    }
}

const TARGET_BONUS: f64 = 0.15;
const TARGET_BONUS_CAP: f64 = 2.0;

/// Intermediate counts of the quality score, useful for debugging rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityTrace {
    pub n_words: usize,
    pub n_target: usize,
    pub violation: bool,
    pub gated: bool,
    pub score: f64,
}

fn has_non_english(text: &str) -> bool {
    text.chars()
        .any(|c| c.is_alphabetic() && !c.is_ascii_alphabetic())
}

pub fn quality_trace(response: &str, level: Level, lexicon: &GradedLexicon) -> QualityTrace {
    let mut n_words = 0;
    let mut n_target = 0;
    let mut violation = false;

    for tok in positioned_tokens(response) {
        if lexicon.intrinsic_exemption(&tok.cased, tok.position).is_some() {
            continue;
        }
        let lemma = lexicon.lemmatize(&tok.lower);
        n_words += 1;
        let graded = lexicon.level_of(&lemma);
        if graded.is_none_or(|l| l > level) {
            violation = true;
        }
        if graded == Some(level) {
            n_target += 1;
        }
    }

    let questions = response.matches('?').count();
    let gated = split_sentences(response).len() <= 1
        || questions != 1
        || has_non_english(response);

    let score = if gated {
        0.0
    } else {
        let (lo, hi) = length_range(level);
        if (lo..=hi).contains(&n_words) && !violation {
            if level == Level::L1 {
                0.8
            } else {
                0.5 + (n_target as f64 * TARGET_BONUS).min(TARGET_BONUS_CAP)
            }
        } else {
            0.2
        }
    };

    QualityTrace {
        n_words,
        n_target,
        violation,
        gated,
        score,
    }
}

/// Vocabulary-constraint quality score: 0.0, 0.2, 0.8, or `0.5 + min(0.15·N, 2)`.
pub fn quality_reward(response: &str, level: Level, lexicon: &GradedLexicon) -> f64 {
    quality_trace(response, level, lexicon).score
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::Config(format!("gamma must lie in [0, 1), got {gamma}")))
    }
}

/// Single-turn diversity of every member of a first-turn group.
///
/// Computes the pairwise Rouge-L matrix once and returns
/// `-max(mean_{j≠i} RougeL(a_i, a_j), gamma)` for each `i`.
pub fn group_single_turn_diversity(group: &[TokenSeq], gamma: f64) -> Result<Vec<f64>> {
    let g = group.len();
    if g < 2 {
        return Err(Error::Config(format!("group size must be at least 2, got {g}")));
    }
    check_gamma(gamma)?;
    let mut sums = vec![0.0; g];
    for i in 0..g {
        for j in (i + 1)..g {
            let r = rouge_l_f1(&group[i], &group[j]);
            sums[i] += r;
            sums[j] += r;
        }
    }
    Ok(sums
        .into_iter()
        .map(|s| -(s / (g - 1) as f64).max(gamma))
        .collect())
}

pub fn single_turn_diversity(group: &[TokenSeq], i: usize, gamma: f64) -> Result<f64> {
    if group.len() < 2 {
        return Err(Error::Config(format!(
            "group size must be at least 2, got {}",
            group.len()
        )));
    }
    check_gamma(gamma)?;
    let me = group
        .get(i)
        .ok_or_else(|| Error::Config(format!("group index {i} out of range")))?;
    let total: f64 = group
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, other)| rouge_l_f1(me, other))
        .sum();
    Ok(-(total / (group.len() - 1) as f64).max(gamma))
}

/// `-(overlap(a_k, u_k) + overlap(a_k, a_{k-1}))`, defined for turns after the first.
pub fn multi_turn_diversity(response: &str, user: &str, previous: &str) -> Result<f64> {
    let a = tokenize(response);
    let with_user = overlap_ratio(&a, &tokenize(user))?;
    let with_prev = overlap_ratio(&a, &tokenize(previous))?;
    Ok(-(with_user + with_prev))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub qual: f64,
    pub sgl: f64,
    pub mul: f64,
}

impl Weights {
    pub const QUALITY_ONLY: Weights = Weights {
        qual: 1.0,
        sgl: 0.0,
        mul: 0.0,
    };

    pub fn new(qual: f64, sgl: f64, mul: f64) -> Self {
        Weights { qual, sgl, mul }
    }
}

impl Default for Weights {
    fn default() -> Self {
        Weights::new(1.0, 0.5, 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub step: u64,
    pub qual: f64,
    pub sgl: f64,
    pub mul: f64,
}

impl Breakpoint {
    fn weights(&self) -> Weights {
        Weights::new(self.qual, self.sgl, self.mul)
    }
}

/// Piecewise-linear weights over the global step, constant past either end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Breakpoint>", into = "Vec<Breakpoint>")]
pub struct WeightSchedule {
    breakpoints: Vec<Breakpoint>,
}

impl WeightSchedule {
    pub fn new(mut breakpoints: Vec<Breakpoint>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(Error::Config("schedule needs at least one breakpoint".into()));
        }
        breakpoints.sort_by_key(|b| b.step);
        for pair in breakpoints.windows(2) {
            if pair[0].step == pair[1].step {
                return Err(Error::Config(format!(
                    "schedule has two breakpoints at step {}",
                    pair[0].step
                )));
            }
        }
        for b in &breakpoints {
            let w = [b.qual, b.sgl, b.mul];
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Config(format!(
                    "schedule weights must be finite and non-negative at step {}",
                    b.step
                )));
            }
        }
        Ok(WeightSchedule { breakpoints })
    }

    pub fn constant(weights: Weights) -> Self {
        WeightSchedule {
            breakpoints: vec![Breakpoint {
                step: 0,
                qual: weights.qual,
                sgl: weights.sgl,
                mul: weights.mul,
            }],
        }
    }

    pub fn breakpoints(&self) -> &[Breakpoint] {
        &self.breakpoints
    }

    pub fn weights_at(&self, step: u64) -> Weights {
        let bps = &self.breakpoints;
        let first = bps[0];
        let last = bps[bps.len() - 1];
        if step <= first.step {
            return first.weights();
        }
        if step >= last.step {
            return last.weights();
        }
        let idx = bps.partition_point(|b| b.step <= step);
        let (lo, hi) = (bps[idx - 1], bps[idx]);
        let t = (step - lo.step) as f64 / (hi.step - lo.step) as f64;
        let lerp = |a: f64, b: f64| a + (b - a) * t;
        Weights::new(lerp(lo.qual, hi.qual), lerp(lo.sgl, hi.sgl), lerp(lo.mul, hi.mul))
    }
}

impl Default for WeightSchedule {
    fn default() -> Self {
        WeightSchedule::constant(Weights::default())
    }
}

impl TryFrom<Vec<Breakpoint>> for WeightSchedule {
    type Error = Error;

    fn try_from(value: Vec<Breakpoint>) -> Result<Self> {
        WeightSchedule::new(value)
    }
}

impl From<WeightSchedule> for Vec<Breakpoint> {
    fn from(value: WeightSchedule) -> Self {
        value.breakpoints
    }
}

/// Per-turn reward components and their weighted total.
///
/// Components that do not apply at a turn are stored as 0 so that
/// `total == qual·λq + sgl·λs + mul·λm` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub qual: f64,
    pub sgl: f64,
    pub mul: f64,
    pub total: f64,
    pub weights: Weights,
}

/// Combines reward components for 1-based turn `turn`.
///
/// The multi-turn term is dropped at turn 1. The first-turn single-turn term
/// is carried into later turns unless `sgl_every_turn` is false.
pub fn compose(
    qual: f64,
    sgl: f64,
    mul: f64,
    weights: Weights,
    turn: usize,
    sgl_every_turn: bool,
) -> RewardBreakdown {
    let mul = if turn <= 1 { 0.0 } else { mul };
    let sgl = if turn > 1 && !sgl_every_turn { 0.0 } else { sgl };
    RewardBreakdown {
        qual,
        sgl,
        mul,
        total: weights.qual * qual + weights.sgl * sgl + weights.mul * mul,
        weights,
    }
}
