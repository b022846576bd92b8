use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::Context as _;
use ddpo_core::decode::{build_trie, constrained_group};
use ddpo_core::eval::judge::{JudgeClient, JudgeConfig, JudgeRequest, DEFAULT_RUBRIC};
use ddpo_core::eval::{
    collapse_probe, corpus_stats as stats_of, diversity_of_trajectories, inter_sample_rouge,
    violation_tally, CollapseSummary, DiversityReport, ViolationTally, COLLAPSE_THRESHOLD,
};
use ddpo_core::optim::{write_metrics_csv, MetricRow};
use ddpo_core::policy::ResponseContext;
use ddpo_core::simenv::{load_corpus, sample_group, write_corpus, Dialogue, Scenario};
use ddpo_core::{GradedLexicon, Mode, PolicyParams, Trajectory, World};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Overrides};

fn hash_line(hash: &str) -> String {
    format!("# config-hash: {hash}\n")
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_metrics(path: &Path, hash: &str, rows: &[MetricRow]) -> anyhow::Result<()> {
    let mut out = create(path)?;
    out.write_all(hash_line(hash).as_bytes())?;
    write_metrics_csv(&mut out, rows)?;
    out.flush()?;
    Ok(())
}

/// Entropy and diversity per step, for plotting.
fn write_curves(path: &Path, hash: &str, rows: &[MetricRow]) -> anyhow::Result<()> {
    let mut out = create(path)?;
    out.write_all(hash_line(hash).as_bytes())?;
    writeln!(out, "step,mean_entropy,inter_sample,intra_session,div")?;
    for r in rows {
        let (inter, intra) = (r.first_turn_rouge_l, r.intra_session_rouge_l);
        let div = 1.0 - (0.5 * inter + 0.5 * intra);
        writeln!(out, "{},{},{},{},{}", r.step, r.mean_entropy, inter, intra, div)?;
    }
    out.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn save_params(path: &Path, hash: &str, params: &PolicyParams) -> anyhow::Result<()> {
    let mut text = hash_line(hash);
    text.push_str(&params.to_text());
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn train(config_path: &Path, overrides: &Overrides) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let world = cfg.world()?;
    let lexicon = cfg.lexicon()?;
    let out = cfg.prepare_output()?;
    let hash = cfg.hash();

    let start = Instant::now();
    let outcome = ddpo_core::optim::train(&cfg.file.train, &world, &lexicon, world.initial_params())?;
    let wall = start.elapsed().as_secs_f64();

    write_metrics(&out.join("metrics.csv"), &hash, &outcome.history)?;
    write_curves(&out.join("curves.csv"), &hash, &outcome.history)?;
    save_params(&out.join("params.txt"), &hash, &outcome.params)?;
    let collapse = collapse_probe(&outcome.history).ok();
    write_json(
        &out.join("summary.json"),
        &json!({
            "config_hash": hash,
            "config": cfg.file,
            "final_metrics": outcome.history.last(),
            "collapse": collapse,
            "wall_time_secs": wall,
        }),
    )?;

    println!(
        "{} run, {} steps, artifacts in {}",
        cfg.file.train.mode,
        outcome.history.len(),
        out.display()
    );
    if let Some(last) = outcome.history.last() {
        println!(
            "final: qual {:.3}  entropy {:.3}  first-turn Rouge-L {:.3}  violation {:.1}%",
            last.mean_qual, last.mean_entropy, last.first_turn_rouge_l, last.violation_rate
        );
    }
    Ok(())
}

/// Mean temperature-1 entropy over every sampled position.
fn mean_entropy(params: &PolicyParams, group: &[Trajectory]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in group {
        let rc = ResponseContext {
            level: t.level,
            topic: t.topic,
        };
        for turn in &t.turns {
            for ctx in rc.contexts(&turn.response.tokens) {
                sum += params.entropy(&ctx);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Serialize)]
struct ScenarioReport {
    scenario: usize,
    topic: String,
    level: String,
    violation_rate: f64,
    diversity: DiversityReport,
    mean_entropy: f64,
    collapsed: bool,
    /// Mean judge scores, or why there are none.
    quality: JudgeColumns,
}

#[derive(Serialize, Clone)]
#[serde(untagged)]
enum JudgeColumns {
    Scores {
        relevance: f64,
        task: f64,
        richness: f64,
        guidance: f64,
    },
    Missing(String),
}

impl JudgeColumns {
    fn cells(&self) -> [String; 4] {
        match self {
            JudgeColumns::Scores {
                relevance,
                task,
                richness,
                guidance,
            } => [relevance, task, richness, guidance].map(|x| x.to_string()),
            JudgeColumns::Missing(why) => std::array::from_fn(|_| why.clone()),
        }
    }
}

fn judge_group(client: &JudgeClient, scenario: &Scenario, group: &[Trajectory]) -> JudgeColumns {
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = group
            .iter()
            .map(|t| {
                let request = JudgeRequest {
                    context: scenario.prompt.clone(),
                    user_input: t.turns[0].user.clone(),
                    response: t.turns[0].text.clone(),
                    rubric_id: DEFAULT_RUBRIC.to_string(),
                };
                s.spawn(move || client.submit(&request))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("judge thread")).collect()
    });
    let mut sums = [0.0; 4];
    for r in &results {
        match r {
            Ok(v) => {
                for (s, x) in sums.iter_mut().zip(v.scores()) {
                    *s += f64::from(x);
                }
            }
            Err(e) => {
                eprintln!("warning: judge failed: {e}");
                return JudgeColumns::Missing("failed".into());
            }
        }
    }
    let n = results.len() as f64;
    JudgeColumns::Scores {
        relevance: sums[0] / n,
        task: sums[1] / n,
        richness: sums[2] / n,
        guidance: sums[3] / n,
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_scenario(
    world: &World,
    scenario: &Scenario,
    params: &PolicyParams,
    lexicon: &GradedLexicon,
    n: usize,
    temperature: f64,
    constrained: bool,
    rng: &mut ChaCha8Rng,
) -> ddpo_core::Result<Vec<Trajectory>> {
    if constrained {
        let trie = build_trie(lexicon, scenario.level, lexicon.inflections(), &world.vocabulary);
        constrained_group(world, scenario, n, params, lexicon, &trie, temperature, rng)
    } else {
        sample_group(world, scenario, n, params, lexicon, temperature, rng)
    }
}

pub fn eval(
    config_path: &Path,
    params_path: &Path,
    overrides: &Overrides,
    judge_endpoint: Option<String>,
    constrained: bool,
) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let world = cfg.world()?;
    let lexicon = cfg.lexicon()?;
    let params_text = std::fs::read_to_string(params_path)
        .with_context(|| format!("reading {}", params_path.display()))?;
    let params = PolicyParams::from_text(&params_text, params_path)?;
    world.check_params(&params)?;
    let out = cfg.prepare_output()?;
    let hash = cfg.hash();
    let e = &cfg.file.eval;
    let constrained = constrained || e.constrained;

    let judge = judge_endpoint
        .or_else(|| cfg.file.judge.endpoint.clone())
        .map(|url| {
            let cache = cfg
                .path(&cfg.file.judge.cache_dir)
                .unwrap_or_else(|| out.join("judge-cache"));
            JudgeClient::new(JudgeConfig {
                cache_dir: Some(cache),
                ..JudgeConfig::new(url).with_env_token()
            })
        });

    let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
    let mut reports = Vec::with_capacity(world.scenarios.len());
    let mut corpus: Vec<Dialogue> = Vec::new();
    let mut total = ViolationTally::default();
    for (idx, scenario) in world.scenarios.iter().enumerate() {
        let group = sample_scenario(
            &world,
            scenario,
            &params,
            &lexicon,
            e.n_samples,
            e.temperature,
            constrained,
            &mut rng,
        )?;
        let diversity = diversity_of_trajectories(&group)?;
        let dialogues: Vec<Dialogue> = group.iter().map(|t| t.to_dialogue(&world)).collect();
        let tally = violation_tally(&dialogues, &lexicon);
        total = total.merge(tally);
        let quality = match &judge {
            Some(client) => judge_group(client, scenario, &group),
            None => JudgeColumns::Missing("skipped".into()),
        };
        reports.push(ScenarioReport {
            scenario: idx,
            topic: world.topics[scenario.topic].clone(),
            level: scenario.level.to_string(),
            violation_rate: tally.rate(),
            diversity,
            mean_entropy: mean_entropy(&params, &group),
            collapsed: diversity.inter_sample >= COLLAPSE_THRESHOLD,
            quality,
        });
        corpus.extend(dialogues);
    }

    let n = reports.len() as f64;
    let mean = |f: fn(&ScenarioReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let overall = json!({
        "violation_rate": total.rate(),
        "inter_sample": mean(|r| r.diversity.inter_sample),
        "intra_session": mean(|r| r.diversity.intra_session),
        "div": mean(|r| r.diversity.div),
        "mean_entropy": mean(|r| r.mean_entropy),
        "collapsed_scenarios": reports.iter().filter(|r| r.collapsed).count(),
    });

    let mut csv = create(&out.join("eval.csv"))?;
    csv.write_all(hash_line(&hash).as_bytes())?;
    writeln!(
        csv,
        "scenario,topic,level,violation_rate,inter_sample,intra_session,div,mean_entropy,collapsed,relevance,task,richness,guidance"
    )?;
    for r in &reports {
        let q = r.quality.cells();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.topic,
            r.level,
            r.violation_rate,
            r.diversity.inter_sample,
            r.diversity.intra_session,
            r.diversity.div,
            r.mean_entropy,
            r.collapsed,
            q[0],
            q[1],
            q[2],
            q[3]
        )?;
    }
    csv.flush()?;

    write_json(
        &out.join("eval.json"),
        &json!({
            "config_hash": hash,
            "params_sha256": hex::encode(Sha256::digest(params_text.as_bytes())),
            "constrained": constrained,
            "settings": e,
            "overall": overall,
            "scenarios": reports,
        }),
    )?;
    let mut samples = create(&out.join("samples.jsonl"))?;
    write_corpus(&mut samples, &corpus)?;
    samples.flush()?;

    println!("scenario  topic     level  viol%   inter   intra   div     entropy");
    for r in &reports {
        println!(
            "{:<9} {:<9} {:<6} {:>5.1}   {:.3}   {:.3}   {:.3}   {:.3}",
            r.scenario,
            r.topic,
            r.level,
            r.violation_rate,
            r.diversity.inter_sample,
            r.diversity.intra_session,
            r.diversity.div,
            r.mean_entropy
        );
    }
    println!(
        "overall: violation {:.1}%  div {:.3}",
        total.rate(),
        overall["div"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn collapse_line(mode: Mode, summary: Option<&CollapseSummary>) -> String {
    match summary {
        Some(c) => format!(
            "  {:<5} final entropy {:.3}  slope {:+.5}  final inter-sample {:.3}  collapsed {}",
            mode.to_string().to_uppercase(),
            c.final_entropy,
            c.entropy_slope,
            c.final_inter_sample,
            if c.collapsed { "yes" } else { "no" }
        ),
        None => format!("  {:<5} no training steps", mode.to_string().to_uppercase()),
    }
}

pub fn demo(config_path: &Path, overrides: &Overrides) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    let world = cfg.world()?;
    let lexicon = cfg.lexicon()?;
    let out = cfg.prepare_output()?;
    let hash = cfg.hash();
    let e = &cfg.file.eval;
    let scenario = world.scenarios.get(e.demo_scenario).ok_or_else(|| {
        crate::config::ConfigError(vec![format!(
            "eval.demo_scenario {} is out of range ({} scenarios)",
            e.demo_scenario,
            world.scenarios.len()
        )])
    })?;

    let mut text = String::new();
    let _ = writeln!(
        text,
        "Scenario {}: {} at {}\nUser: {}\n",
        e.demo_scenario, world.topics[scenario.topic], scenario.level, scenario.prompt
    );
    let mut collapse_lines = Vec::new();
    for mode in [Mode::Grpo, Mode::Ddpo] {
        let train_cfg = ddpo_core::TrainConfig {
            mode,
            ..cfg.file.train.clone()
        };
        let outcome = ddpo_core::optim::train(&train_cfg, &world, &lexicon, world.initial_params())?;
        write_metrics(&out.join(format!("{mode}_metrics.csv")), &hash, &outcome.history)?;

        let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
        let group = sample_scenario(
            &world,
            scenario,
            &outcome.params,
            &lexicon,
            e.n_samples,
            e.temperature,
            false,
            &mut rng,
        )?;
        let firsts: Vec<&str> = group.iter().map(|t| t.turns[0].text.as_str()).collect();
        let _ = writeln!(
            text,
            "{} (inter-sample Rouge-L {:.3})",
            mode.to_string().to_uppercase(),
            inter_sample_rouge(&firsts)
        );
        for (i, s) in firsts.iter().enumerate() {
            let _ = writeln!(text, "  {}. {}", i + 1, s);
        }
        text.push('\n');
        collapse_lines.push(collapse_line(mode, collapse_probe(&outcome.history).ok().as_ref()));
    }
    text.push_str("Collapse summary\n");
    for l in collapse_lines {
        text.push_str(&l);
        text.push('\n');
    }

    print!("{text}");
    let mut file = hash_line(&hash);
    file.push_str(&text);
    std::fs::write(out.join("demo.txt"), file)?;
    Ok(())
}

pub fn corpus_stats(corpus: &Path, config: Option<&Path>) -> anyhow::Result<()> {
    let lexicon = match config {
        Some(p) => ExperimentConfig::load(p, &Overrides::default())?.lexicon()?,
        None => ddpo_core::lexicon::bundled::lexicon(),
    };
    let dialogues = load_corpus(corpus)?;
    let stats = stats_of(&dialogues);
    let tally = violation_tally(&dialogues, &lexicon);
    let report = json!({
        "dialogues": stats.dialogues,
        "turns": stats.turns,
        "topics": stats.topics,
        "words": stats.words,
        "avg_turns_per_topic": stats.avg_turns_per_topic,
        "turns_by_topic": stats.turns_by_topic,
        "assistant_turns": tally.turns,
        "violation_rate": tally.rate(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
