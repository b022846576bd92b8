//! Toy dialogue world: topics, scripted user simulator, group rollouts.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{positioned_tokens, GradedLexicon, Level};
use crate::policy::{FeatureMap, PolicyParams, ResponseContext, ResponseSample, Vocabulary};
use crate::reward::length_range;

/// Phase of the dialogue a user utterance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Opening,
    Middle,
    Closing,
}

impl Bucket {
    /// Bucket for the user utterance of 1-based turn `turn` out of `turns`.
    pub fn for_turn(turn: usize, turns: usize) -> Bucket {
        if turn >= turns {
            Bucket::Closing
        } else if turn <= 2 {
            Bucket::Opening
        } else {
            Bucket::Middle
        }
    }
}

/// Token budget of a response at `level`: the longest admissible length plus 5.
pub fn response_budget(level: Level) -> usize {
    length_range(level).1 + 5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub topic: usize,
    pub level: Level,
    pub prompt: String,
    pub turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub topic: String,
    pub level: Level,
    pub bucket: Bucket,
    pub text: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScenarioSpec {
    topic: String,
    level: Level,
    prompt: String,
    turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorldFile {
    topics: Vec<String>,
    levels: Vec<Level>,
    vocabulary: Vocabulary,
    #[serde(default)]
    echo_probability: f64,
    bank: Vec<BankEntry>,
    scenarios: Vec<ScenarioSpec>,
}

/// Weighted utterance bank with optional echo of the teacher's words.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSimulator {
    bank: HashMap<(usize, Level, Bucket), Vec<(String, f64)>>,
    echo_probability: f64,
}

impl UserSimulator {
    pub fn new(
        entries: impl IntoIterator<Item = ((usize, Level, Bucket), String, f64)>,
        echo_probability: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&echo_probability) {
            return Err(Error::Config(format!(
                "echo probability must lie in [0, 1], got {echo_probability}"
            )));
        }
        let mut bank: HashMap<_, Vec<(String, f64)>> = HashMap::new();
        for (key, text, weight) in entries {
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(Error::Config(format!(
                    "bank weight must be positive, got {weight} for `{text}`"
                )));
            }
            if text.trim().is_empty() {
                return Err(Error::Config("bank utterance is empty".into()));
            }
            bank.entry(key).or_default().push((text, weight));
        }
        Ok(UserSimulator {
            bank,
            echo_probability,
        })
    }

    pub fn echo_probability(&self) -> f64 {
        self.echo_probability
    }

    pub fn covers(&self, topic: usize, level: Level, bucket: Bucket) -> bool {
        self.bank.contains_key(&(topic, level, bucket))
    }

    /// Draws the next learner utterance.
    ///
    /// With the echo probability, one content word of `last_response` (an
    /// alphabetic, non-exempt token of three or more letters) is appended.
    pub fn simulate_user<R: Rng + ?Sized>(
        &self,
        lexicon: &GradedLexicon,
        topic: usize,
        level: Level,
        bucket: Bucket,
        last_response: &str,
        rng: &mut R,
    ) -> Result<String> {
        let candidates = self.bank.get(&(topic, level, bucket)).ok_or_else(|| {
            Error::Config(format!(
                "user bank has no entry for topic {topic}, {level}, {bucket:?}"
            ))
        })?;
        let total: f64 = candidates.iter().map(|(_, w)| w).sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = &candidates[candidates.len() - 1].0;
        for (text, weight) in candidates {
            if u < *weight {
                chosen = text;
                break;
            }
            u -= weight;
        }

        let echo = rng.random::<f64>() < self.echo_probability;
        if echo {
            let content: Vec<String> = positioned_tokens(last_response)
                .into_iter()
                .filter(|t| {
                    t.lower.len() >= 3
                        && t.lower.chars().all(|c| c.is_ascii_alphabetic())
                        && lexicon.intrinsic_exemption(&t.cased, t.position).is_none()
                })
                .map(|t| t.lower)
                .collect();
            if !content.is_empty() {
                let pick = &content[rng.random_range(0..content.len())];
                return Ok(format!("{chosen} {pick}"));
            }
        }
        Ok(chosen.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub response: ResponseSample,
    pub text: String,
}

/// One multi-turn session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub topic: usize,
    pub level: Level,
    pub turns: Vec<Turn>,
}

impl Trajectory {
    /// History before the assistant speaks at 0-based turn `k`: all prior
    /// (user, assistant) pairs then the current user utterance.
    pub fn history_before(&self, k: usize) -> Vec<&str> {
        let mut h = Vec::with_capacity(2 * k + 1);
        for turn in &self.turns[..k] {
            h.push(turn.user.as_str());
            h.push(turn.text.as_str());
        }
        h.push(self.turns[k].user.as_str());
        h
    }

    pub fn to_dialogue(&self, world: &World) -> Dialogue {
        let mut turns = Vec::with_capacity(self.turns.len() * 2);
        for t in &self.turns {
            turns.push(DialogueTurn {
                role: Role::User,
                text: t.user.clone(),
            });
            turns.push(DialogueTurn {
                role: Role::Assistant,
                text: t.text.clone(),
            });
        }
        Dialogue {
            topic: world.topics[self.topic].clone(),
            level: self.level,
            turns,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub topics: Vec<String>,
    pub vocabulary: Vocabulary,
    pub simulator: UserSimulator,
    pub scenarios: Vec<Scenario>,
}

pub const BUNDLED_WORLD_JSON: &str = include_str!("../data/world.json");

impl World {
    pub fn from_json(source: &str) -> Result<Self> {
        let file: WorldFile = serde_json::from_str(source)?;
        let topic_id = |name: &str| {
            file.topics
                .iter()
                .position(|t| t == name)
                .ok_or_else(|| Error::Config(format!("unknown topic `{name}`")))
        };
        let check_level = |level: Level| {
            if file.levels.contains(&level) {
                Ok(())
            } else {
                Err(Error::Config(format!("level {level} is not declared by the world")))
            }
        };

        let mut entries = Vec::with_capacity(file.bank.len());
        for e in &file.bank {
            check_level(e.level)?;
            entries.push(((topic_id(&e.topic)?, e.level, e.bucket), e.text.clone(), e.weight));
        }
        let simulator = UserSimulator::new(entries, file.echo_probability)?;

        let mut scenarios = Vec::with_capacity(file.scenarios.len());
        for s in &file.scenarios {
            check_level(s.level)?;
            if s.prompt.trim().is_empty() {
                return Err(Error::Config("scenario prompt is empty".into()));
            }
            if s.turns == 0 {
                return Err(Error::Config("scenario turn budget must be at least 1".into()));
            }
            let topic = topic_id(&s.topic)?;
            for turn in 2..=s.turns {
                let bucket = Bucket::for_turn(turn, s.turns);
                if !simulator.covers(topic, s.level, bucket) {
                    return Err(Error::Config(format!(
                        "user bank lacks ({}, {}, {bucket:?}) needed by a scenario",
                        s.topic, s.level
                    )));
                }
            }
            scenarios.push(Scenario {
                topic,
                level: s.level,
                prompt: s.prompt.clone(),
                turns: s.turns,
            });
        }
        Ok(World {
            topics: file.topics,
            vocabulary: file.vocabulary,
            simulator,
            scenarios,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_WORLD_JSON).expect("bundled world parses")
    }

    /// Feature layout for policies acting in this world.
    pub fn feature_map(&self) -> FeatureMap {
        let max_len = Level::ALL.into_iter().map(response_budget).max().unwrap_or(1);
        FeatureMap::new(self.vocabulary.len(), self.topics.len(), max_len)
    }

    pub fn initial_params(&self) -> PolicyParams {
        PolicyParams::zeros(self.feature_map())
    }

    /// Checks that `params` were built for this world's vocabulary and topics.
    pub fn check_params(&self, params: &PolicyParams) -> Result<()> {
        let want = self.feature_map();
        let have = params.feature_map();
        if *have != want {
            return Err(Error::Dimension(format!(
                "params feature map {have:?} does not match world {want:?}"
            )));
        }
        Ok(())
    }
}

/// Rolls out one session with its own rng stream.
pub fn rollout(
    world: &World,
    scenario: &Scenario,
    params: &PolicyParams,
    lexicon: &GradedLexicon,
    temperature: f64,
    seed: u64,
) -> Result<Trajectory> {
    rollout_with(world, scenario, lexicon, seed, |rc, budget, rng| {
        params.sample_response(rc, budget, temperature, rng)
    })
}

/// [`rollout`] with a caller-supplied responder, e.g. a masked sampler.
pub fn rollout_with<F>(
    world: &World,
    scenario: &Scenario,
    lexicon: &GradedLexicon,
    seed: u64,
    mut respond: F,
) -> Result<Trajectory>
where
    F: FnMut(ResponseContext, usize, &mut ChaCha8Rng) -> Result<ResponseSample>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rc = ResponseContext {
        level: scenario.level,
        topic: scenario.topic,
    };
    let budget = response_budget(scenario.level);
    let mut turns: Vec<Turn> = Vec::with_capacity(scenario.turns);
    for k in 1..=scenario.turns {
        let user = match turns.last() {
            None => scenario.prompt.clone(),
            Some(prev) => world.simulator.simulate_user(
                lexicon,
                scenario.topic,
                scenario.level,
                Bucket::for_turn(k, scenario.turns),
                &prev.text,
                &mut rng,
            )?,
        };
        let response = respond(rc, budget, &mut rng)?;
        let text = world.vocabulary.render(&response.tokens);
        turns.push(Turn {
            user,
            response,
            text,
        });
    }
    Ok(Trajectory {
        topic: scenario.topic,
        level: scenario.level,
        turns,
    })
}

/// Per-trajectory seeds split off the master generator.
pub fn split_seeds<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.random()).collect()
}

/// `group_size` independent sessions from the shared scenario prompt.
pub fn sample_group<R: Rng + ?Sized>(
    world: &World,
    scenario: &Scenario,
    group_size: usize,
    params: &PolicyParams,
    lexicon: &GradedLexicon,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    sample_group_with(world, scenario, group_size, lexicon, rng, |rc, budget, r| {
        params.sample_response(rc, budget, temperature, r)
    })
}

/// [`sample_group`] with a caller-supplied responder.
pub fn sample_group_with<R, F>(
    world: &World,
    scenario: &Scenario,
    group_size: usize,
    lexicon: &GradedLexicon,
    rng: &mut R,
    respond: F,
) -> Result<Vec<Trajectory>>
where
    R: Rng + ?Sized,
    F: Fn(ResponseContext, usize, &mut ChaCha8Rng) -> Result<ResponseSample> + Sync,
{
    if group_size < 2 {
        return Err(Error::Config(format!(
            "group size must be at least 2, got {group_size}"
        )));
    }
    split_seeds(rng, group_size)
        .into_par_iter()
        .map(|seed| rollout_with(world, scenario, lexicon, seed, &respond))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub role: Role,
    pub text: String,
}

/// Corpus record: one dialogue per JSON line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub topic: String,
    pub level: Level,
    pub turns: Vec<DialogueTurn>,
}

impl Dialogue {
    pub fn word_count(&self) -> usize {
        self.turns
            .iter()
            .map(|t| crate::text::tokenize(&t.text).len())
            .sum()
    }
}

pub fn write_corpus<W: Write>(mut out: W, dialogues: &[Dialogue]) -> Result<()> {
    for d in dialogues {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON Lines corpus, reporting the line of the first bad record.
pub fn read_corpus<R: BufRead>(input: R, path: &Path) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        out.push(d);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::bundled;

    fn sim(echo: f64) -> UserSimulator {
        UserSimulator::new(
            [
                ((0, Level::L1, Bucket::Opening), "I like rice.".to_string(), 1.0),
                ((0, Level::L1, Bucket::Opening), "I like water.".to_string(), 1.0),
                ((0, Level::L1, Bucket::Opening), "I like my dog.".to_string(), 2.0),
            ],
            echo,
        )
        .unwrap()
    }

    #[test]
    fn no_echo_is_verbatim() {
        let lex = bundled::lexicon();
        let s = sim(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let u = s
                .simulate_user(&lex, 0, Level::L1, Bucket::Opening, "Cat cat!", &mut rng)
                .unwrap();
            assert!(["I like rice.", "I like water.", "I like my dog."].contains(&u.as_str()));
        }
    }

    #[test]
    fn forced_echo() {
        let lex = bundled::lexicon();
        let s = sim(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let u = s
                .simulate_user(&lex, 0, Level::L1, Bucket::Opening, "A cat.", &mut rng)
                .unwrap();
            assert!(u.ends_with("cat"), "{u}");
        }
    }

    #[test]
    fn weighted_frequencies() {
        let lex = bundled::lexicon();
        let s = sim(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = HashMap::new();
        let n = 10_000;
        for _ in 0..n {
            let u = s
                .simulate_user(&lex, 0, Level::L1, Bucket::Opening, "", &mut rng)
                .unwrap();
            *counts.entry(u).or_insert(0usize) += 1;
        }
        let freq = |k: &str| counts[k] as f64 / n as f64;
        assert!((freq("I like rice.") - 0.25).abs() < 0.03);
        assert!((freq("I like water.") - 0.25).abs() < 0.03);
        assert!((freq("I like my dog.") - 0.50).abs() < 0.03);
    }

    #[test]
    fn missing_bank_entry() {
        let lex = bundled::lexicon();
        let err = sim(0.0)
            .simulate_user(&lex, 0, Level::L2, Bucket::Closing, "", &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(UserSimulator::new([((0, Level::L1, Bucket::Opening), "x".to_string(), 0.0)], 0.0).is_err());
    }

    #[test]
    fn buckets() {
        assert_eq!(Bucket::for_turn(2, 3), Bucket::Opening);
        assert_eq!(Bucket::for_turn(3, 3), Bucket::Closing);
        assert_eq!(Bucket::for_turn(3, 5), Bucket::Middle);
        assert_eq!(Bucket::for_turn(2, 2), Bucket::Closing);
    }

    #[test]
    fn bundled_world_shape() {
        let w = World::bundled();
        assert_eq!(w.topics.len(), 4);
        assert_eq!(w.scenarios.len(), 16);
        for t in 0..4 {
            for level in Level::ALL {
                for b in [Bucket::Opening, Bucket::Middle, Bucket::Closing] {
                    assert!(w.simulator.bank[&(t, level, b)].len() >= 5);
                }
            }
        }
    }

    #[test]
    fn group_shape_and_determinism() {
        let w = World::bundled();
        let lex = bundled::lexicon();
        let p = w.initial_params();
        let sc = Scenario {
            turns: 3,
            ..w.scenarios[0].clone()
        };
        let g = sample_group(&w, &sc, 4, &p, &lex, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(g.len(), 4);
        for t in &g {
            assert_eq!(t.turns.len(), 3);
            assert_eq!(t.turns[0].user, sc.prompt);
        }
        let again = sample_group(&w, &sc, 4, &p, &lex, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(
            serde_json::to_string(&g).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        assert!(sample_group(&w, &sc, 1, &p, &lex, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).is_err());

        let one = Scenario { turns: 1, ..sc.clone() };
        let g = sample_group(&w, &one, 2, &p, &lex, 1.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(g.iter().all(|t| t.turns.len() == 1 && t.turns[0].user == one.prompt));
    }

    #[test]
    fn rollout_order_independent() {
        let w = World::bundled();
        let lex = bundled::lexicon();
        let p = w.initial_params();
        let sc = &w.scenarios[3];
        let seeds = split_seeds(&mut ChaCha8Rng::seed_from_u64(11), 4);
        let forward: Vec<_> = seeds.iter().map(|s| rollout(&w, sc, &p, &lex, 1.0, *s).unwrap()).collect();
        let mut backward: Vec<_> = seeds.iter().rev().map(|s| rollout(&w, sc, &p, &lex, 1.0, *s).unwrap()).collect();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    #[test]
    fn history_layout() {
        let w = World::bundled();
        let lex = bundled::lexicon();
        let p = w.initial_params();
        let t = rollout(&w, &w.scenarios[0], &p, &lex, 1.0, 1).unwrap();
        let h = t.history_before(2);
        assert_eq!(h.len(), 5);
        assert_eq!(h[0], t.turns[0].user);
        assert_eq!(h[1], t.turns[0].text);
        assert_eq!(h[4], t.turns[2].user);
    }

    #[test]
    fn corpus_roundtrip_and_errors() {
        let w = World::bundled();
        let lex = bundled::lexicon();
        let p = w.initial_params();
        let d = rollout(&w, &w.scenarios[0], &p, &lex, 1.0, 1).unwrap().to_dialogue(&w);
        let mut buf = Vec::new();
        write_corpus(&mut buf, std::slice::from_ref(&d)).unwrap();
        let back = read_corpus(&buf[..], Path::new("c.jsonl")).unwrap();
        assert_eq!(back, vec![d]);
        let bad = b"{\"topic\":\"food\",\"level\":\"L1\",\"turns\":[]}\nnot json\n";
        let err = read_corpus(&bad[..], Path::new("c.jsonl")).unwrap_err();
        assert!(err.to_string().starts_with("c.jsonl:2:"), "{err}");
    }
}
