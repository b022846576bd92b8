//! Log-linear autoregressive policy over a word-level vocabulary.
//!
//! The logit of token `v` is the sum of `w[f, v]` over four active indicator
//! features: previous token (or BOS), position bucket, level, and topic. The
//! last output index is the END token.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::Level;

/// Word-level token inventory. Output id `len()` is END.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub fn is_punctuation(token: &str) -> bool {
    matches!(token, "." | "?" | "!")
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let ok = is_punctuation(t)
                || (!t.is_empty() && t.chars().all(|c| c.is_ascii_lowercase()));
            if !ok {
                return Err(Error::Config(format!(
                    "vocabulary token `{t}` must be lowercase ascii letters or . ? !"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Number of ordinary tokens, excluding END.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn end_id(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| Error::UnknownToken(w.as_ref().to_string()))
            })
            .collect()
    }

    /// Renders ids as text: words space-separated, punctuation attached, each
    /// sentence capitalized. END is skipped.
    pub fn render(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut sentence_start = true;
        for &id in ids {
            let Some(tok) = self.token(id) else { continue };
            if is_punctuation(tok) {
                out.push_str(tok);
                sentence_start = true;
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            if sentence_start {
                let mut chars = tok.chars();
                if let Some(first) = chars.next() {
                    out.extend(first.to_uppercase());
                    out.push_str(chars.as_str());
                }
            } else {
                out.push_str(tok);
            }
            sentence_start = false;
        }
        out
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(value: Vec<String>) -> Result<Self> {
        Vocabulary::new(value)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(value: Vocabulary) -> Self {
        value.tokens
    }
}

pub const FEATURE_MAP_VERSION: &str = "loglinear-v1";
pub const POSITION_BUCKET_WIDTH: usize = 3;

/// Layout of the indicator features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n_tokens: usize,
    pub position_buckets: usize,
    pub n_levels: usize,
    pub n_topics: usize,
}

impl FeatureMap {
    pub fn new(n_tokens: usize, n_topics: usize, max_len: usize) -> Self {
        FeatureMap {
            n_tokens,
            position_buckets: max_len.div_ceil(POSITION_BUCKET_WIDTH).max(1),
            n_levels: Level::ALL.len(),
            n_topics: n_topics.max(1),
        }
    }

    /// Output width: every token plus END.
    pub fn n_outputs(&self) -> usize {
        self.n_tokens + 1
    }

    pub fn n_features(&self) -> usize {
        (self.n_tokens + 1) + self.position_buckets + self.n_levels + self.n_topics
    }

    pub fn active(&self, ctx: &Context) -> [usize; 4] {
        let prev = ctx.prev.unwrap_or(self.n_tokens);
        let pos_offset = self.n_tokens + 1;
        let bucket = (ctx.position / POSITION_BUCKET_WIDTH).min(self.position_buckets - 1);
        let level_offset = pos_offset + self.position_buckets;
        let topic_offset = level_offset + self.n_levels;
        [
            prev,
            pos_offset + bucket,
            level_offset + ctx.level.index(),
            topic_offset + ctx.topic.min(self.n_topics - 1),
        ]
    }
}

/// Decision context for one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Context {
    pub prev: Option<usize>,
    pub position: usize,
    pub level: Level,
    pub topic: usize,
}

/// What a whole response is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseContext {
    pub level: Level,
    pub topic: usize,
}

impl ResponseContext {
    pub fn at(&self, prev: Option<usize>, position: usize) -> Context {
        Context {
            prev,
            position,
            level: self.level,
            topic: self.topic,
        }
    }

    /// Contexts seen while emitting `tokens` one by one.
    pub fn contexts<'a>(&'a self, tokens: &'a [usize]) -> impl Iterator<Item = Context> + 'a {
        (0..tokens.len()).map(move |t| self.at(t.checked_sub(1).map(|p| tokens[p]), t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSample {
    /// Output ids; a trailing END is included when it was drawn.
    pub tokens: Vec<usize>,
    /// Temperature-1 log-probabilities of each entry of `tokens`.
    pub logprobs: Vec<f64>,
    pub terminated: bool,
}

/// Gradient of one log-probability: a dense output row per active feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl SparseGrad {
    pub fn get(&self, feature: usize, token: usize) -> f64 {
        self.rows
            .iter()
            .find(|(f, _)| *f == feature)
            .map_or(0.0, |(_, row)| row[token])
    }
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[idx] - lse
}

/// Draws an index from a normalized distribution.
pub fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    map: FeatureMap,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(map: FeatureMap) -> Self {
        PolicyParams {
            weights: vec![0.0; map.n_features() * map.n_outputs()],
            map,
        }
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn n_outputs(&self) -> usize {
        self.map.n_outputs()
    }

    pub fn weight(&self, feature: usize, token: usize) -> f64 {
        self.weights[feature * self.map.n_outputs() + token]
    }

    pub fn set_weight(&mut self, feature: usize, token: usize, value: f64) {
        let n = self.map.n_outputs();
        self.weights[feature * n + token] = value;
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    /// Frozen copy for importance ratios.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    pub fn logits_into(&self, ctx: &Context, out: &mut [f64]) {
        let n = self.map.n_outputs();
        out.fill(0.0);
        for f in self.map.active(ctx) {
            let row = &self.weights[f * n..(f + 1) * n];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w;
            }
        }
    }

    pub fn logits(&self, ctx: &Context) -> Vec<f64> {
        let mut out = vec![0.0; self.map.n_outputs()];
        self.logits_into(ctx, &mut out);
        out
    }

    /// Softmax of the summed active weights divided by `temperature`.
    pub fn next_token_distribution(&self, ctx: &Context, temperature: f64) -> Result<Vec<f64>> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Temperature(temperature));
        }
        let mut probs = self.logits(ctx);
        if temperature != 1.0 {
            probs.iter_mut().for_each(|l| *l /= temperature);
        }
        softmax_in_place(&mut probs);
        Ok(probs)
    }

    /// Entropy in nats of the temperature-1 next-token distribution.
    pub fn entropy(&self, ctx: &Context) -> f64 {
        let mut probs = self.logits(ctx);
        softmax_in_place(&mut probs);
        -probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Ancestral sampling until END or `max_len` tokens.
    pub fn sample_response<R: Rng + ?Sized>(
        &self,
        rc: ResponseContext,
        max_len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<ResponseSample> {
        self.sample_masked(rc, max_len, temperature, rng, |_, _| {})
    }

    /// Sampling with a hook that may zero out entries of the tempered
    /// distribution before the draw. Stored logprobs are unmasked and at
    /// temperature 1.
    pub(crate) fn sample_masked<R, M>(
        &self,
        rc: ResponseContext,
        max_len: usize,
        temperature: f64,
        rng: &mut R,
        mut mask: M,
    ) -> Result<ResponseSample>
    where
        R: Rng + ?Sized,
        M: FnMut(&[usize], &mut [f64]),
    {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Temperature(temperature));
        }
        let n = self.map.n_outputs();
        let end = self.map.n_tokens;
        let mut logits = vec![0.0; n];
        let mut probs = vec![0.0; n];
        let mut tokens = Vec::with_capacity(max_len);
        let mut logprobs = Vec::with_capacity(max_len);
        let mut terminated = false;

        for position in 0..max_len {
            let ctx = rc.at(tokens.last().copied(), position);
            self.logits_into(&ctx, &mut logits);
            probs
                .iter_mut()
                .zip(&logits)
                .for_each(|(p, l)| *p = l / temperature);
            softmax_in_place(&mut probs);
            mask(&tokens, &mut probs);
            let sum: f64 = probs.iter().sum();
            assert!(sum > 0.0, "mask removed every token");
            probs.iter_mut().for_each(|p| *p /= sum);

            let token = draw(&probs, rng);
            tokens.push(token);
            logprobs.push(log_softmax_at(&logits, token));
            if token == end {
                terminated = true;
                break;
            }
        }
        Ok(ResponseSample {
            tokens,
            logprobs,
            terminated,
        })
    }

    /// Teacher-forced temperature-1 log-probabilities of `tokens`.
    pub fn log_prob(&self, rc: ResponseContext, tokens: &[usize]) -> Result<Vec<f64>> {
        let n = self.map.n_outputs();
        let mut logits = vec![0.0; n];
        let mut out = Vec::with_capacity(tokens.len());
        for (ctx, &tok) in rc.contexts(tokens).zip(tokens) {
            if tok >= n {
                return Err(Error::TokenOutOfRange(tok));
            }
            self.logits_into(&ctx, &mut logits);
            out.push(log_softmax_at(&logits, tok));
        }
        Ok(out)
    }

    /// `∂ log π(token | ctx) / ∂ w[f, v] = 1{v = token} − π(v | ctx)` for
    /// each active feature `f`; zero elsewhere.
    pub fn grad_log_prob(&self, ctx: &Context, token: usize) -> Result<SparseGrad> {
        let n = self.map.n_outputs();
        if token >= n {
            return Err(Error::TokenOutOfRange(token));
        }
        let mut row = self.logits(ctx);
        softmax_in_place(&mut row);
        row.iter_mut().for_each(|p| *p = -*p);
        row[token] += 1.0;
        Ok(SparseGrad {
            rows: self
                .map
                .active(ctx)
                .into_iter()
                .map(|f| (f, row.clone()))
                .collect(),
        })
    }

    /// Adds `scale · ∇ log π(token | ctx)` into a dense gradient buffer.
    pub(crate) fn accumulate_grad_log_prob(
        &self,
        ctx: &Context,
        token: usize,
        scale: f64,
        probs_scratch: &mut [f64],
        grad: &mut [f64],
    ) {
        let n = self.map.n_outputs();
        self.logits_into(ctx, probs_scratch);
        softmax_in_place(probs_scratch);
        for f in self.map.active(ctx) {
            let row = &mut grad[f * n..(f + 1) * n];
            for (g, p) in row.iter_mut().zip(probs_scratch.iter()) {
                *g -= scale * p;
            }
            row[token] += scale;
        }
    }

    /// Text serialization: a header then one `feature,token,weight` row per
    /// non-zero weight.
    pub fn to_text(&self) -> String {
        let m = &self.map;
        let mut out = String::new();
        let _ = writeln!(out, "ddpo-params 1");
        let _ = writeln!(out, "feature_map {FEATURE_MAP_VERSION}");
        let _ = writeln!(out, "tokens {}", m.n_tokens);
        let _ = writeln!(out, "position_buckets {}", m.position_buckets);
        let _ = writeln!(out, "levels {}", m.n_levels);
        let _ = writeln!(out, "topics {}", m.n_topics);
        let _ = writeln!(out, "feature,token,weight");
        let n = m.n_outputs();
        for (i, w) in self.weights.iter().enumerate() {
            if *w != 0.0 {
                let _ = writeln!(out, "{},{},{}", i / n, i % n, w);
            }
        }
        out
    }

    /// Inverse of [`to_text`](Self::to_text). Lines starting with `#` are
    /// ignored.
    pub fn from_text(source: &str, path: &Path) -> Result<Self> {
        let mut lines = source
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.starts_with('#'));
        let mut header = |key: &str| -> Result<String> {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("missing `{key}` header")))?;
            let rest = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| Error::parse(path, idx + 1, format!("expected `{key} ...`")))?;
            Ok(rest.trim().to_string())
        };
        let num = |s: String, key: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::parse(path, 0, format!("`{key}` must be an integer")))
        };

        if header("ddpo-params")? != "1" {
            return Err(Error::parse(path, 1, "unsupported params version"));
        }
        let version = header("feature_map")?;
        if version != FEATURE_MAP_VERSION {
            return Err(Error::Dimension(format!(
                "feature map `{version}` is not `{FEATURE_MAP_VERSION}`"
            )));
        }
        let map = FeatureMap {
            n_tokens: num(header("tokens")?, "tokens")?,
            position_buckets: num(header("position_buckets")?, "position_buckets")?,
            n_levels: num(header("levels")?, "levels")?,
            n_topics: num(header("topics")?, "topics")?,
        };
        if map.n_levels != Level::ALL.len() {
            return Err(Error::Dimension(format!(
                "params carry {} levels, lexicon grades {}",
                map.n_levels,
                Level::ALL.len()
            )));
        }
        if map.position_buckets == 0 || map.n_topics == 0 {
            return Err(Error::parse(path, 0, "zero-sized feature block"));
        }
        match lines.next() {
            Some((_, l)) if l.trim() == "feature,token,weight" => {}
            Some((idx, _)) => return Err(Error::parse(path, idx + 1, "expected column header")),
            None => return Err(Error::parse(path, 0, "missing column header")),
        }

        let mut params = PolicyParams::zeros(map);
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::parse(path, idx + 1, msg.to_string());
            let mut cols = line.split(',');
            let (Some(f), Some(t), Some(w), None) = (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad("expected `feature,token,weight`"));
            };
            let f: usize = f.parse().map_err(|_| bad("bad feature index"))?;
            let t: usize = t.parse().map_err(|_| bad("bad token index"))?;
            let w: f64 = w.parse().map_err(|_| bad("bad weight"))?;
            if f >= map.n_features() || t >= map.n_outputs() {
                return Err(bad("index outside declared dimensions"));
            }
            if !w.is_finite() {
                return Err(bad("non-finite weight"));
            }
            params.set_weight(f, t, w);
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path)?, path)
    }
}
