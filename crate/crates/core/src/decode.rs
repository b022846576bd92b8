//! Trie-masked sampling: every step may only extend an admissible word.
//!
//! Edges are vocabulary token ids. With the word-level vocabulary every
//! admissible word is a single edge from the root, but the walk works the
//! same for words spelled by several pieces.

use std::collections::BTreeMap;

use rand::Rng;

use crate::lexicon::{GradedLexicon, Level};
use crate::policy::{is_punctuation, PolicyParams, ResponseContext, ResponseSample, Vocabulary};
use crate::simenv::{sample_group_with, Scenario, Trajectory, World};
use crate::text::InflectionTable;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Node {
    children: BTreeMap<usize, usize>,
    terminal: bool,
}

/// Position inside the trie. [`TrieState::ROOT`] is a word boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrieState(usize);

impl TrieState {
    pub const ROOT: TrieState = TrieState(0);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabTrie {
    level: Level,
    nodes: Vec<Node>,
    /// END and sentence punctuation.
    boundary: Vec<usize>,
    n_outputs: usize,
    words: Vec<String>,
}

impl VocabTrie {
    /// Empty trie that admits only `boundary` tokens.
    pub fn new(level: Level, boundary: Vec<usize>, n_outputs: usize) -> Self {
        VocabTrie {
            level,
            nodes: vec![Node::default()],
            boundary,
            n_outputs,
            words: Vec::new(),
        }
    }

    pub fn level(&self) -> Level {
        self.level
    }

    /// Admissible words in insertion order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn boundary_tokens(&self) -> &[usize] {
        &self.boundary
    }

    /// Inserts one word spelled as a token path.
    pub fn insert(&mut self, word: &str, pieces: &[usize]) {
        if pieces.is_empty() {
            return;
        }
        let mut at = 0;
        for &p in pieces {
            at = match self.nodes[at].children.get(&p) {
                Some(&next) => next,
                None => {
                    let next = self.nodes.len();
                    self.nodes.push(Node::default());
                    self.nodes[at].children.insert(p, next);
                    next
                }
            };
        }
        if !self.nodes[at].terminal {
            self.nodes[at].terminal = true;
            self.words.push(word.to_string());
        }
    }

    fn at_boundary(&self, state: TrieState) -> bool {
        state == TrieState::ROOT || self.nodes[state.0].terminal
    }

    /// Tokens that extend `state` inside the trie, plus boundary tokens at a
    /// word boundary. Sorted.
    pub fn allowed_mask(&self, state: TrieState) -> Vec<usize> {
        let node = &self.nodes[state.0];
        let mut out: Vec<usize> = node.children.keys().copied().collect();
        if self.at_boundary(state) {
            out.extend(&self.boundary);
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// State after emitting `token`. A completed word with no longer
    /// continuation returns to the root; boundary tokens stay at the root.
    ///
    /// Panics if `token` is not in `allowed_mask(state)`.
    pub fn advance(&self, state: TrieState, token: usize) -> TrieState {
        if let Some(&next) = self.nodes[state.0].children.get(&token) {
            let node = &self.nodes[next];
            if node.terminal && node.children.is_empty() {
                TrieState::ROOT
            } else {
                TrieState(next)
            }
        } else {
            assert!(
                self.at_boundary(state) && self.boundary.contains(&token),
                "token {token} is not admissible here"
            );
            TrieState::ROOT
        }
    }
}

/// Admissible words for `level`: every lemma at or below it plus its table
/// inflections, restricted to spellings the vocabulary can emit and whose
/// lemmatization stays within the level.
pub fn build_trie(
    lexicon: &GradedLexicon,
    level: Level,
    inflections: &InflectionTable,
    vocabulary: &Vocabulary,
) -> VocabTrie {
    let mut boundary: Vec<usize> = vocabulary
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, t)| is_punctuation(t))
        .map(|(i, _)| i)
        .collect();
    boundary.push(vocabulary.end_id());
    let mut trie = VocabTrie::new(level, boundary, vocabulary.len() + 1);

    for lemma in lexicon.lemmas_up_to(level) {
        let forms = std::iter::once(lemma).chain(inflections.inflections_of(lemma));
        for word in forms {
            if lexicon.exceeds(&lexicon.lemmatize(word), level) {
                continue;
            }
            if let Some(id) = vocabulary.id(word) {
                trie.insert(word, &[id]);
            }
        }
    }
    trie
}

/// Zeros entries outside `allowed` and renormalizes.
pub fn apply_mask(probs: &mut [f64], allowed: &[usize]) {
    let mut keep = vec![false; probs.len()];
    for &a in allowed {
        keep[a] = true;
    }
    for (p, k) in probs.iter_mut().zip(&keep) {
        if !k {
            *p = 0.0;
        }
    }
    let sum: f64 = probs.iter().sum();
    assert!(sum > 0.0, "empty admissible set");
    probs.iter_mut().for_each(|p| *p /= sum);
}

/// Samples a response whose every step lies inside the trie.
pub fn constrained_sample<R: Rng + ?Sized>(
    params: &PolicyParams,
    rc: ResponseContext,
    trie: &VocabTrie,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> crate::Result<ResponseSample> {
    assert_eq!(
        trie.n_outputs,
        params.n_outputs(),
        "trie built for a different vocabulary"
    );
    let mut state = TrieState::ROOT;
    params.sample_masked(rc, max_len, temperature, rng, |tokens, probs| {
        if let Some(&last) = tokens.last() {
            state = trie.advance(state, last);
        }
        apply_mask(probs, &trie.allowed_mask(state));
    })
}

/// A group of sessions whose assistant turns are all trie-constrained.
#[allow(clippy::too_many_arguments)]
pub fn constrained_group<R: Rng + ?Sized>(
    world: &World,
    scenario: &Scenario,
    group_size: usize,
    params: &PolicyParams,
    lexicon: &GradedLexicon,
    trie: &VocabTrie,
    temperature: f64,
    rng: &mut R,
) -> crate::Result<Vec<Trajectory>> {
    sample_group_with(world, scenario, group_size, lexicon, rng, |rc, budget, r| {
        constrained_sample(params, rc, trie, budget, temperature, r)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::bundled;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::Path;

    fn l1_trie(world: &World) -> VocabTrie {
        let lex = bundled::lexicon();
        build_trie(&lex, Level::L1, lex.inflections(), &world.vocabulary)
    }

    #[test]
    fn l1_admits_cat_and_cats_not_analyze() {
        let world = World::bundled();
        let trie = l1_trie(&world);
        let root = trie.allowed_mask(TrieState::ROOT);
        let v = &world.vocabulary;
        assert!(root.contains(&v.id("cat").unwrap()));
        assert!(root.contains(&v.id("cats").unwrap()));
        assert!(root.contains(&v.id("is").unwrap()));
        assert!(!root.contains(&v.id("analyze").unwrap()));
        assert!(!root.contains(&v.id("dinosaur").unwrap()));
        assert!(!root.contains(&v.id("fruit").unwrap()));
        assert!(root.contains(&v.end_id()));
        assert!(root.contains(&v.id("?").unwrap()));
    }

    #[test]
    fn empty_lexicon_admits_boundaries_only() {
        let world = World::bundled();
        let lex = GradedLexicon::parse("lemma,level\n", Path::new("empty.csv")).unwrap();
        let trie = build_trie(&lex, Level::L4, &InflectionTable::default(), &world.vocabulary);
        let mut expect: Vec<usize> = [".", "?", "!"]
            .iter()
            .map(|t| world.vocabulary.id(t).unwrap())
            .collect();
        expect.push(world.vocabulary.end_id());
        expect.sort_unstable();
        assert_eq!(trie.allowed_mask(TrieState::ROOT), expect);
    }

    #[test]
    fn multi_piece_paths() {
        // pieces 0 1 spell one word, 0 alone another, 2 3 a third
        let mut trie = VocabTrie::new(Level::L1, vec![9], 10);
        trie.insert("ab", &[0, 1]);
        trie.insert("a", &[0]);
        trie.insert("cd", &[2, 3]);
        assert_eq!(trie.allowed_mask(TrieState::ROOT), vec![0, 2, 9]);
        let s = trie.advance(TrieState::ROOT, 0);
        // terminal with a continuation: extension or boundary
        assert_eq!(trie.allowed_mask(s), vec![1, 9]);
        let leaf = trie.advance(s, 1);
        assert_eq!(leaf, TrieState::ROOT);
        let mid = trie.advance(TrieState::ROOT, 2);
        assert_eq!(trie.allowed_mask(mid), vec![3]);
        // a terminal leaf reached directly offers boundary tokens only
        let leaf_node = TrieState(trie.nodes[mid.0].children[&3]);
        assert_eq!(trie.allowed_mask(leaf_node), vec![9]);
    }

    #[test]
    fn mask_on_uniform_is_uniform_over_allowed() {
        let mut p = vec![0.1; 10];
        apply_mask(&mut p, &[1, 4, 7, 8]);
        for (i, x) in p.iter().enumerate() {
            if [1, 4, 7, 8].contains(&i) {
                assert!((x - 0.25).abs() < 1e-15);
            } else {
                assert_eq!(*x, 0.0);
            }
        }
    }

    #[test]
    fn mask_preserves_ratios() {
        let mut p = vec![0.05, 0.2, 0.1, 0.4, 0.25];
        let before = p[1] / p[3];
        apply_mask(&mut p, &[1, 3, 4]);
        assert!((p[1] / p[3] - before).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_word_trie_repeats_word() {
        let world = World::bundled();
        let v = &world.vocabulary;
        let cat = v.id("cat").unwrap();
        let mut trie = VocabTrie::new(Level::L1, vec![v.end_id()], v.len() + 1);
        trie.insert("cat", &[cat]);
        let params = world.initial_params();
        let rc = ResponseContext { level: Level::L1, topic: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = constrained_sample(&params, rc, &trie, 10, 1.0, &mut rng).unwrap();
            let body = if s.terminated { &s.tokens[..s.tokens.len() - 1] } else { &s.tokens[..] };
            assert!(body.iter().all(|t| *t == cat));
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let world = World::bundled();
        let trie = l1_trie(&world);
        let params = world.initial_params();
        let rc = ResponseContext { level: Level::L1, topic: 2 };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            constrained_sample(&params, rc, &trie, 20, 0.7, &mut rng).unwrap()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn outputs_never_violate() {
        let world = World::bundled();
        let lex = bundled::lexicon();
        let mut params = world.initial_params();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for w in params.weights_mut() {
            *w = rng.random_range(-3.0..3.0);
        }
        for level in Level::ALL {
            let trie = build_trie(&lex, level, lex.inflections(), &world.vocabulary);
            let rc = ResponseContext { level, topic: 1 };
            for _ in 0..200 {
                let s = constrained_sample(&params, rc, &trie, 30, 1.0, &mut rng).unwrap();
                let text = world.vocabulary.render(&s.tokens);
                let report = lex.violation_check(&text, level, &[] as &[&str]);
                assert!(!report.violated, "{level} {text:?} {report:?}");
            }
        }
    }
}
