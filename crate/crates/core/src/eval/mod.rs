//! Evaluation: violation rate, two-axis diversity, collapse probe, corpus
//! statistics, and an optional external judge client.

pub mod judge;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::GradedLexicon;
use crate::optim::MetricRow;
use crate::policy::PolicyParams;
use crate::simenv::{sample_group, Dialogue, Role, Scenario, Trajectory, World};
use crate::text::{mean_pairwise_rouge_l, rouge_l_f1, tokenize, TokenSeq};

/// Inter-sample Rouge-L at or above this marks a collapsed policy.
pub const COLLAPSE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_samples: usize,
    pub temperature: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_samples: 8,
            temperature: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub inter_sample: f64,
    pub intra_session: f64,
    pub div: f64,
}

/// Mean Rouge-L over all unordered pairs of `texts`.
pub fn inter_sample_rouge<S: AsRef<str>>(texts: &[S]) -> f64 {
    let seqs: Vec<TokenSeq> = texts.iter().map(|t| tokenize(t.as_ref())).collect();
    let refs: Vec<&[String]> = seqs.iter().map(|s| &s[..]).collect();
    mean_pairwise_rouge_l(&refs)
}

/// Mean Rouge-L between consecutive assistant turns; 0 with fewer than two.
pub fn intra_session_rouge<S: AsRef<str>>(turns: &[S]) -> f64 {
    if turns.len() < 2 {
        return 0.0;
    }
    let seqs: Vec<TokenSeq> = turns.iter().map(|t| tokenize(t.as_ref())).collect();
    let total: f64 = seqs.windows(2).map(|w| rouge_l_f1(&w[1], &w[0])).sum();
    total / (seqs.len() - 1) as f64
}

/// Diversity of a set of sessions, each given as its assistant turns.
pub fn diversity_of_sessions<S: AsRef<str>>(sessions: &[Vec<S>]) -> Result<DiversityReport> {
    if sessions.len() < 2 {
        return Err(Error::Config(format!(
            "diversity needs at least 2 sessions, got {}",
            sessions.len()
        )));
    }
    let firsts: Vec<&str> = sessions
        .iter()
        .map(|s| s.first().map_or("", |t| t.as_ref()))
        .collect();
    let inter_sample = inter_sample_rouge(&firsts);
    let intra_session =
        sessions.iter().map(|s| intra_session_rouge(s)).sum::<f64>() / sessions.len() as f64;
    Ok(DiversityReport {
        inter_sample,
        intra_session,
        div: 1.0 - (0.5 * inter_sample + 0.5 * intra_session),
    })
}

pub fn diversity_of_trajectories(trajectories: &[Trajectory]) -> Result<DiversityReport> {
    let sessions: Vec<Vec<&str>> = trajectories
        .iter()
        .map(|t| t.turns.iter().map(|turn| turn.text.as_str()).collect())
        .collect();
    diversity_of_sessions(&sessions)
}

/// Samples `settings.n_samples` sessions of `scenario` and scores them.
pub fn diversity_score<R: Rng + ?Sized>(
    world: &World,
    scenario: &Scenario,
    params: &PolicyParams,
    lexicon: &GradedLexicon,
    settings: EvalSettings,
    rng: &mut R,
) -> Result<(DiversityReport, Vec<Trajectory>)> {
    let group = sample_group(
        world,
        scenario,
        settings.n_samples,
        params,
        lexicon,
        settings.temperature,
        rng,
    )?;
    Ok((diversity_of_trajectories(&group)?, group))
}

/// Violated and total assistant turns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationTally {
    pub violated: usize,
    pub turns: usize,
}

impl ViolationTally {
    pub fn rate(&self) -> f64 {
        if self.turns == 0 {
            0.0
        } else {
            100.0 * self.violated as f64 / self.turns as f64
        }
    }

    pub fn merge(self, other: ViolationTally) -> ViolationTally {
        ViolationTally {
            violated: self.violated + other.violated,
            turns: self.turns + other.turns,
        }
    }
}

/// Checks every assistant turn against its dialogue level with the running
/// history of both speakers.
pub fn violation_tally(dialogues: &[Dialogue], lexicon: &GradedLexicon) -> ViolationTally {
    let mut tally = ViolationTally::default();
    for d in dialogues {
        for (i, turn) in d.turns.iter().enumerate() {
            if turn.role != Role::Assistant {
                continue;
            }
            let history: Vec<&str> = d.turns[..i].iter().map(|t| t.text.as_str()).collect();
            if lexicon.violation_check(&turn.text, d.level, &history).violated {
                tally.violated += 1;
            }
            tally.turns += 1;
        }
    }
    tally
}

/// Percentage of assistant turns with a violation.
pub fn violation_rate(dialogues: &[Dialogue], lexicon: &GradedLexicon) -> f64 {
    violation_tally(dialogues, lexicon).rate()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseSummary {
    pub final_entropy: f64,
    /// Least-squares slope of entropy against step over the last quarter.
    pub entropy_slope: f64,
    pub final_inter_sample: f64,
    pub collapsed: bool,
}

fn slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

pub fn collapse_probe(history: &[MetricRow]) -> Result<CollapseSummary> {
    let last = history
        .last()
        .ok_or_else(|| Error::Config("collapse probe needs at least one metric row".into()))?;
    let quarter = history.len().div_ceil(4);
    let tail: Vec<(f64, f64)> = history[history.len() - quarter..]
        .iter()
        .map(|r| (r.step as f64, r.mean_entropy))
        .collect();
    Ok(CollapseSummary {
        final_entropy: last.mean_entropy,
        entropy_slope: slope(&tail),
        final_inter_sample: last.first_turn_rouge_l,
        collapsed: last.first_turn_rouge_l >= COLLAPSE_THRESHOLD,
    })
}

/// Dialogue-level counts for a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub turns: usize,
    pub topics: usize,
    pub words: usize,
    pub avg_turns_per_topic: f64,
    pub turns_by_topic: BTreeMap<String, usize>,
}

pub fn corpus_stats(dialogues: &[Dialogue]) -> CorpusStats {
    let mut turns_by_topic: BTreeMap<String, usize> = BTreeMap::new();
    let mut turns = 0;
    let mut words = 0;
    for d in dialogues {
        *turns_by_topic.entry(d.topic.clone()).or_default() += d.turns.len();
        turns += d.turns.len();
        words += d.word_count();
    }
    let topics = turns_by_topic.len();
    CorpusStats {
        dialogues: dialogues.len(),
        turns,
        topics,
        words,
        avg_turns_per_topic: if topics == 0 {
            0.0
        } else {
            turns as f64 / topics as f64
        },
        turns_by_topic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{bundled, Level};
    use crate::simenv::DialogueTurn;
    use proptest::prelude::*;

    /// Brute-force LCS by enumerating subsequences of the shorter input.
    fn lcs_brute(a: &[String], b: &[String]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let mut best = 0;
        for mask in 0u32..(1 << short.len()) {
            let sub: Vec<&String> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| &short[i]).collect();
            let mut it = long.iter();
            if sub.iter().all(|s| it.any(|x| x == *s)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    fn f1(a: &str, b: &str) -> f64 {
        let (a, b) = (tokenize(a), tokenize(b));
        let l = lcs_brute(&a, &b) as f64;
        if l == 0.0 {
            return 0.0;
        }
        let (p, r) = (l / a.len() as f64, l / b.len() as f64);
        2.0 * p * r / (p + r)
    }

    #[test]
    fn fixture_three_samples() {
        let sessions = vec![
            vec!["I like cats.", "Do you like cats?"],
            vec!["I like dogs.", "Dogs are big."],
            vec!["We eat rice.", "I eat rice too."],
        ];
        let r = diversity_of_sessions(&sessions).unwrap();
        let firsts = ["I like cats.", "I like dogs.", "We eat rice."];
        let inter = (f1(firsts[0], firsts[1]) + f1(firsts[0], firsts[2]) + f1(firsts[1], firsts[2])) / 3.0;
        let intra = sessions.iter().map(|s| f1(s[1], s[0])).sum::<f64>() / 3.0;
        assert!((r.inter_sample - inter).abs() < 1e-12);
        assert!((r.intra_session - intra).abs() < 1e-12);
        assert!((r.div - (1.0 - 0.5 * inter - 0.5 * intra)).abs() < 1e-12);
        // 2/3 for the first pair, 0 for the others
        assert!((r.inter_sample - 2.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn total_collapse_and_perfect_diversity() {
        let same = vec![vec!["I like cats.", "I like cats."]; 8];
        let r = diversity_of_sessions(&same).unwrap();
        assert_eq!((r.inter_sample, r.intra_session, r.div), (1.0, 1.0, 0.0));
        let words = ["cat", "dog", "rice", "water", "book", "friend", "lunch", "play"];
        let disjoint: Vec<Vec<String>> = words
            .iter()
            .map(|w| vec![w.to_string(), format!("{w}s {w}s")])
            .collect();
        let r = diversity_of_sessions(&disjoint).unwrap();
        assert_eq!(r.div, 1.0);
    }

    #[test]
    fn single_turn_sessions_have_zero_intra() {
        let r = diversity_of_sessions(&[vec!["a b"], vec!["a c"]]).unwrap();
        assert_eq!(r.intra_session, 0.0);
        assert!(diversity_of_sessions(&[vec!["a"]]).is_err());
    }

    fn dialogue(level: Level, turns: &[(&str, &str)]) -> Dialogue {
        Dialogue {
            topic: "food".into(),
            level,
            turns: turns
                .iter()
                .flat_map(|(u, a)| {
                    [
                        DialogueTurn { role: Role::User, text: u.to_string() },
                        DialogueTurn { role: Role::Assistant, text: a.to_string() },
                    ]
                })
                .collect(),
        }
    }

    #[test]
    fn violation_rate_examples() {
        let lex = bundled::lexicon();
        let clean = dialogue(Level::L1, &[("Hi.", "I like rice."), ("Yes.", "Do you like water?")]);
        assert_eq!(violation_rate(std::slice::from_ref(&clean), &lex), 0.0);
        let mixed = dialogue(
            Level::L1,
            &[("Hi.", "I analyze rice."), ("Yes.", "I like cats."), ("Ok.", "Good."), ("Ok.", "We eat.")],
        );
        assert_eq!(violation_rate(&[mixed], &lex), 25.0);
        // user-introduced word is exempt in the reply
        let echoed = dialogue(Level::L1, &[("I saw a dinosaur.", "Do you like the dinosaur?")]);
        assert_eq!(violation_rate(&[echoed], &lex), 0.0);
    }

    #[test]
    fn collapse_probe_examples() {
        let rows: Vec<MetricRow> = (1..=8)
            .map(|step| MetricRow {
                step,
                mean_qual: 0.0,
                mean_sgl: 0.0,
                mean_mul: 0.0,
                mean_entropy: 2.5,
                first_turn_rouge_l: 0.85,
                intra_session_rouge_l: 0.5,
                violation_rate: 0.0,
            })
            .collect();
        let c = collapse_probe(&rows).unwrap();
        assert_eq!(c.entropy_slope, 0.0);
        assert!(c.collapsed);
        let mut falling = rows.clone();
        for r in &mut falling {
            r.mean_entropy = 10.0 - r.step as f64;
            r.first_turn_rouge_l = 0.3;
        }
        let c = collapse_probe(&falling).unwrap();
        assert!((c.entropy_slope + 1.0).abs() < 1e-12);
        assert!(!c.collapsed);
        assert!(collapse_probe(&[]).is_err());
    }

    #[test]
    fn corpus_counts() {
        let a = dialogue(Level::L1, &[("Hi.", "I like rice."), ("Yes.", "Good.")]);
        let mut b = dialogue(Level::L2, &[("Hello.", "We swim.")]);
        b.topic = "hobbies".into();
        let s = corpus_stats(&[a, b]);
        assert_eq!((s.dialogues, s.turns, s.topics, s.words), (2, 6, 2, 9));
        assert_eq!(s.avg_turns_per_topic, 3.0);
    }

    fn arb_dialogue() -> impl Strategy<Value = Dialogue> {
        let words = prop::sample::select(vec!["cat", "analyze", "rice", "dinosaur", "good", "habitat"]);
        prop::collection::vec((prop::collection::vec(words.clone(), 1..4), prop::collection::vec(words, 1..4)), 1..4)
            .prop_map(|pairs| Dialogue {
                topic: "t".into(),
                level: Level::L1,
                turns: pairs
                    .into_iter()
                    .flat_map(|(u, a)| {
                        [
                            DialogueTurn { role: Role::User, text: u.join(" ") + "." },
                            DialogueTurn { role: Role::Assistant, text: a.join(" ") + "." },
                        ]
                    })
                    .collect(),
            })
    }

    proptest! {
        #[test]
        fn rate_of_concatenation_is_turn_weighted(
            a in prop::collection::vec(arb_dialogue(), 1..4),
            b in prop::collection::vec(arb_dialogue(), 1..4),
        ) {
            let lex = bundled::lexicon();
            let (ta, tb) = (violation_tally(&a, &lex), violation_tally(&b, &lex));
            let joined: Vec<Dialogue> = a.iter().chain(&b).cloned().collect();
            let whole = violation_rate(&joined, &lex);
            let weighted = (ta.rate() * ta.turns as f64 + tb.rate() * tb.turns as f64) / (ta.turns + tb.turns) as f64;
            prop_assert!((whole - weighted).abs() < 1e-9);
        }

        #[test]
        fn div_is_permutation_invariant(
            sessions in prop::collection::vec(prop::collection::vec("[abc]( [abc]){0,4}", 1..4), 2..6),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let base = diversity_of_sessions(&sessions).unwrap();
            let mut shuffled = sessions.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let other = diversity_of_sessions(&shuffled).unwrap();
            prop_assert!((base.div - other.div).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base.div));
        }
    }
}
