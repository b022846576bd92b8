//! Group-relative policy optimization with diversity rewards.
//!
//! One outer step snapshots the live policy, rolls out one group per scenario
//! under the snapshot, scores every turn, standardizes the rewards per turn
//! across the group, then ascends the token-averaged clipped surrogate.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::GradedLexicon;
use crate::policy::{PolicyParams, ResponseContext};
use crate::reward::{
    compose, group_single_turn_diversity, multi_turn_diversity, quality_reward, RewardBreakdown,
    WeightSchedule, Weights,
};
use crate::simenv::{sample_group, split_seeds, Scenario, Trajectory, World};
use crate::text::{mean_pairwise_rouge_l, tokenize, TokenSeq};

/// Multi-turn penalty assigned to a response with no word tokens.
pub const DEGENERATE_MUL: f64 = -2.0;

/// Weight magnitude beyond which training is aborted.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Quality reward only: weights pinned to (1, 0, 0).
    Grpo,
    /// Quality plus both diversity rewards under the schedule.
    Ddpo,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "grpo" => Ok(Mode::Grpo),
            "ddpo" => Ok(Mode::Ddpo),
            other => Err(format!("unknown mode `{other}` (expected grpo or ddpo)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Grpo => "grpo",
            Mode::Ddpo => "ddpo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub group_size: usize,
    pub turns: usize,
    pub clip_epsilon: f64,
    pub delta: f64,
    pub gamma: f64,
    pub schedule: WeightSchedule,
    pub learning_rate: f64,
    pub steps: usize,
    pub inner_epochs: usize,
    pub seed: u64,
    /// Rollout temperature during training.
    pub temperature: f64,
    /// Carry the first-turn diversity reward into later turns.
    pub sgl_every_turn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Ddpo,
            group_size: 8,
            turns: 3,
            clip_epsilon: 0.2,
            delta: 1e-4,
            gamma: 0.2,
            schedule: WeightSchedule::default(),
            learning_rate: 100.0,
            steps: 300,
            inner_epochs: 1,
            seed: 1,
            temperature: 1.0,
            sgl_every_turn: true,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            out.push(format!("clip_epsilon must lie in (0, 1), got {}", self.clip_epsilon));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            out.push(format!("delta must be positive, got {}", self.delta));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            out.push(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.group_size < 2 {
            out.push(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.turns < 1 {
            out.push("turns must be at least 1".to_string());
        }
        if !(1..=4).contains(&self.inner_epochs) {
            out.push(format!("inner_epochs must lie in 1..=4, got {}", self.inner_epochs));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            out.push(format!("temperature must be positive, got {}", self.temperature));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn weights_at(&self, step: u64) -> Weights {
        match self.mode {
            Mode::Grpo => Weights::QUALITY_ONLY,
            Mode::Ddpo => self.schedule.weights_at(step),
        }
    }
}

/// `(R_i − μ) / (σ + δ)` with the population standard deviation.
///
/// Rewards are first taken relative to the first member, which leaves the
/// result unchanged under any shift that is exact in floating point.
pub fn turn_advantages(rewards: &[f64], delta: f64) -> Vec<f64> {
    let Some(&anchor) = rewards.first() else {
        return Vec::new();
    };
    let n = rewards.len() as f64;
    let centered: Vec<f64> = rewards.iter().map(|r| r - anchor).collect();
    let mean = centered.iter().sum::<f64>() / n;
    let var = centered.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt() + delta;
    centered.iter().map(|c| (c - mean) / scale).collect()
}

pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// `min(ρÂ, clip(ρ, 1−ε, 1+ε)Â)`.
pub fn clipped_token_loss(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage;
    unclipped.min(clipped)
}

/// One scored group: trajectories, per-turn rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub level: crate::lexicon::Level,
    pub topic: usize,
    pub trajectories: Vec<Trajectory>,
    /// `rewards[i][k]`
    pub rewards: Vec<Vec<RewardBreakdown>>,
    /// `advantages[i][k]`, shaped like `rewards`
    pub advantages: Vec<Vec<f64>>,
    /// Total sampled tokens `Z`.
    pub token_count: usize,
}

impl GroupBatch {
    /// Standardizes the reward totals turn by turn.
    pub fn new(
        trajectories: Vec<Trajectory>,
        rewards: Vec<Vec<RewardBreakdown>>,
        delta: f64,
    ) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Config("empty group".into()))?;
        let (level, topic) = (first.level, first.topic);
        let turns = first.turns.len();
        if rewards.len() != trajectories.len()
            || trajectories
                .iter()
                .zip(&rewards)
                .any(|(t, r)| t.turns.len() != turns || r.len() != turns)
        {
            return Err(Error::Dimension("rewards do not match trajectories".into()));
        }
        let mut advantages = vec![vec![0.0; turns]; trajectories.len()];
        for k in 0..turns {
            let totals: Vec<f64> = rewards.iter().map(|r| r[k].total).collect();
            for (i, a) in turn_advantages(&totals, delta).into_iter().enumerate() {
                advantages[i][k] = a;
            }
        }
        let token_count = trajectories
            .iter()
            .flat_map(|t| &t.turns)
            .map(|turn| turn.response.tokens.len())
            .sum();
        if token_count == 0 {
            return Err(Error::Config("group has no sampled tokens".into()));
        }
        Ok(GroupBatch {
            level,
            topic,
            trajectories,
            rewards,
            advantages,
            token_count,
        })
    }

    pub fn context(&self) -> ResponseContext {
        ResponseContext {
            level: self.level,
            topic: self.topic,
        }
    }

    fn responses(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.trajectories
            .iter()
            .zip(&self.advantages)
            .flat_map(|(traj, adv)| {
                traj.turns
                    .iter()
                    .zip(adv)
                    .map(|(turn, a)| (turn.response.tokens.as_slice(), *a))
            })
    }
}

/// Token-averaged clipped surrogate `J`.
pub fn batch_objective(
    batch: &GroupBatch,
    live: &PolicyParams,
    snapshot: &PolicyParams,
    epsilon: f64,
) -> Result<f64> {
    let rc = batch.context();
    let mut total = 0.0;
    for (tokens, adv) in batch.responses() {
        let new = live.log_prob(rc, tokens)?;
        let old = snapshot.log_prob(rc, tokens)?;
        for (n, o) in new.iter().zip(&old) {
            total += clipped_token_loss((n - o).exp(), adv, epsilon);
        }
    }
    Ok(total / batch.token_count as f64)
}

/// Analytic gradient of [`batch_objective`] with respect to the live weights.
///
/// A token contributes `Â·ρ·∇log π` while the unclipped product is the
/// minimum (ties included) and nothing on the clip plateau.
pub fn objective_gradient(
    batch: &GroupBatch,
    live: &PolicyParams,
    snapshot: &PolicyParams,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let rc = batch.context();
    let mut grad = vec![0.0; live.weights().len()];
    let mut scratch = vec![0.0; live.n_outputs()];
    let z = batch.token_count as f64;
    for (tokens, adv) in batch.responses() {
        if adv == 0.0 {
            continue;
        }
        let new = live.log_prob(rc, tokens)?;
        let old = snapshot.log_prob(rc, tokens)?;
        for ((ctx, &tok), (n, o)) in rc.contexts(tokens).zip(tokens).zip(new.iter().zip(&old)) {
            let ratio = (n - o).exp();
            let unclipped = ratio * adv;
            let clipped = clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv;
            if unclipped <= clipped {
                live.accumulate_grad_log_prob(&ctx, tok, adv * ratio / z, &mut scratch, &mut grad);
            }
        }
    }
    Ok(grad)
}

/// Per-group numbers that feed a metrics row.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct GroupStats {
    qual_sum: f64,
    qual_n: usize,
    sgl_sum: f64,
    sgl_n: usize,
    mul_sum: f64,
    mul_n: usize,
    first_turn_rouge: f64,
    intra_sum: f64,
    violated: usize,
    assistant_turns: usize,
    entropy_sum: f64,
    entropy_n: usize,
}

/// Scores every turn of a group and builds its batch.
pub fn score_group(
    trajectories: Vec<Trajectory>,
    lexicon: &GradedLexicon,
    weights: Weights,
    config: &TrainConfig,
) -> Result<GroupBatch> {
    score_group_with_stats(trajectories, lexicon, weights, config, None).map(|(b, _)| b)
}

fn score_group_with_stats(
    trajectories: Vec<Trajectory>,
    lexicon: &GradedLexicon,
    weights: Weights,
    config: &TrainConfig,
    entropy_policy: Option<&PolicyParams>,
) -> Result<(GroupBatch, GroupStats)> {
    let mut stats = GroupStats::default();
    let first_turns: Vec<TokenSeq> = trajectories
        .iter()
        .map(|t| tokenize(&t.turns[0].text))
        .collect();
    let sgl = group_single_turn_diversity(&first_turns, config.gamma)?;
    let refs: Vec<&[String]> = first_turns.iter().map(|s| &s[..]).collect();
    stats.first_turn_rouge = mean_pairwise_rouge_l(&refs);
    stats.sgl_sum = sgl.iter().sum();
    stats.sgl_n = sgl.len();

    let mut rewards = Vec::with_capacity(trajectories.len());
    for (traj, sgl_i) in trajectories.iter().zip(&sgl) {
        let texts: Vec<&str> = traj.turns.iter().map(|t| t.text.as_str()).collect();
        stats.intra_sum += crate::eval::intra_session_rouge(&texts);
        let mut row = Vec::with_capacity(traj.turns.len());
        for (k, turn) in traj.turns.iter().enumerate() {
            let qual = quality_reward(&turn.text, traj.level, lexicon);
            let mul = if k == 0 {
                0.0
            } else {
                let m = match multi_turn_diversity(&turn.text, &turn.user, &traj.turns[k - 1].text)
                {
                    Ok(m) => m,
                    Err(Error::DegenerateResponse) => DEGENERATE_MUL,
                    Err(e) => return Err(e),
                };
                stats.mul_sum += m;
                stats.mul_n += 1;
                m
            };
            stats.qual_sum += qual;
            stats.qual_n += 1;
            row.push(compose(qual, *sgl_i, mul, weights, k + 1, config.sgl_every_turn));

            let history = traj.history_before(k);
            if lexicon.violation_check(&turn.text, traj.level, &history).violated {
                stats.violated += 1;
            }
            stats.assistant_turns += 1;

            if let Some(policy) = entropy_policy {
                let rc = ResponseContext {
                    level: traj.level,
                    topic: traj.topic,
                };
                for ctx in rc.contexts(&turn.response.tokens) {
                    stats.entropy_sum += policy.entropy(&ctx);
                    stats.entropy_n += 1;
                }
            }
        }
        rewards.push(row);
    }
    let batch = GroupBatch::new(trajectories, rewards, config.delta)?;
    Ok((batch, stats))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub mean_qual: f64,
    pub mean_sgl: f64,
    pub mean_mul: f64,
    pub mean_entropy: f64,
    pub first_turn_rouge_l: f64,
    /// Mean Rouge-L between consecutive assistant turns of a session.
    pub intra_session_rouge_l: f64,
    /// Percentage of assistant turns with a vocabulary violation.
    pub violation_rate: f64,
}

pub const METRIC_COLUMNS: &str = "step,mean_qual,mean_sgl,mean_mul,mean_entropy,first_turn_rouge_l,intra_session_rouge_l,violation_rate";

fn ratio(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricRow {
    fn from_stats(step: usize, groups: &[GroupStats]) -> Self {
        let mut t = GroupStats::default();
        let mut rouge = 0.0;
        let mut intra = 0.0;
        for g in groups {
            intra += g.intra_sum;
            t.qual_sum += g.qual_sum;
            t.qual_n += g.qual_n;
            t.sgl_sum += g.sgl_sum;
            t.sgl_n += g.sgl_n;
            t.mul_sum += g.mul_sum;
            t.mul_n += g.mul_n;
            t.violated += g.violated;
            t.assistant_turns += g.assistant_turns;
            t.entropy_sum += g.entropy_sum;
            t.entropy_n += g.entropy_n;
            rouge += g.first_turn_rouge;
        }
        MetricRow {
            step,
            mean_qual: ratio(t.qual_sum, t.qual_n),
            mean_sgl: ratio(t.sgl_sum, t.sgl_n),
            mean_mul: ratio(t.mul_sum, t.mul_n),
            mean_entropy: ratio(t.entropy_sum, t.entropy_n),
            first_turn_rouge_l: ratio(rouge, groups.len()),
            intra_session_rouge_l: ratio(intra, t.sgl_n),
            violation_rate: 100.0 * ratio(t.violated as f64, t.assistant_turns),
        }
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(out, "{METRIC_COLUMNS}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.mean_qual,
            r.mean_sgl,
            r.mean_mul,
            r.mean_entropy,
            r.first_turn_rouge_l,
            r.intra_session_rouge_l,
            r.violation_rate
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub history: Vec<MetricRow>,
}

/// Runs `config.steps` outer steps starting from `initial`.
///
/// Rows are recorded from the groups sampled at each step, before that
/// step's update, so row 1 describes the starting policy.
pub fn train(
    config: &TrainConfig,
    world: &World,
    lexicon: &GradedLexicon,
    initial: PolicyParams,
) -> Result<TrainOutcome> {
    config.validate()?;
    world.check_params(&initial)?;
    if world.scenarios.is_empty() {
        return Err(Error::Config("world has no scenarios".into()));
    }
    let scenarios: Vec<Scenario> = world
        .scenarios
        .iter()
        .map(|s| Scenario {
            turns: config.turns,
            ..s.clone()
        })
        .collect();

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut live = initial;
    let mut history = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let snapshot = live.snapshot();
        let weights = config.weights_at(step as u64);
        let seeds = split_seeds(&mut master, scenarios.len());

        let scored: Vec<(GroupBatch, GroupStats)> = scenarios
            .par_iter()
            .zip(seeds)
            .map(|(scenario, seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let group = sample_group(
                    world,
                    scenario,
                    config.group_size,
                    &snapshot,
                    lexicon,
                    config.temperature,
                    &mut rng,
                )?;
                score_group_with_stats(group, lexicon, weights, config, Some(&snapshot))
            })
            .collect::<Result<_>>()?;

        let stats: Vec<GroupStats> = scored.iter().map(|(_, s)| *s).collect();
        history.push(MetricRow::from_stats(step, &stats));

        let scale = config.learning_rate / scored.len() as f64;
        for _ in 0..config.inner_epochs {
            let grads: Vec<Vec<f64>> = scored
                .par_iter()
                .map(|(batch, _)| objective_gradient(batch, &live, &snapshot, config.clip_epsilon))
                .collect::<Result<_>>()?;
            let weights = live.weights_mut();
            for g in &grads {
                for (w, gi) in weights.iter_mut().zip(g) {
                    *w += scale * gi;
                }
            }
            let magnitude = live.max_abs_weight();
            if magnitude.is_nan() || magnitude > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { step, magnitude });
            }
        }
    }
    Ok(TrainOutcome {
        params: live,
        history,
    })
}
