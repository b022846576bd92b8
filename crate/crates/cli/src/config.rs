//! Experiment configuration: a TOML file with `[paths]`, `[train]`, `[eval]`
//! and `[judge]` sections. Relative paths resolve against the file's
//! directory.

use std::fmt;
use std::path::{Path, PathBuf};

use ddpo_core::eval::EvalSettings;
use ddpo_core::lexicon::bundled;
use ddpo_core::text::InflectionTable;
use ddpo_core::{GradedLexicon, Mode, TrainConfig, World};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Every validation problem found, reported together.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for p in &self.0 {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// World definition; the bundled world when absent.
    pub world: Option<PathBuf>,
    /// Graded lexicon CSV; the bundled lexicon when absent.
    pub lexicon: Option<PathBuf>,
    /// Inflection table CSV; the bundled table when absent.
    pub inflections: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_samples: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Sample through the vocabulary trie.
    pub constrained: bool,
    /// Scenario index shown by `demo`.
    pub demo_scenario: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalSettings::default();
        EvalSection {
            n_samples: d.n_samples,
            temperature: d.temperature,
            seed: 7,
            constrained: false,
            demo_scenario: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeSection {
    pub endpoint: Option<String>,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub paths: PathsSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub judge: JudgeSection,
}

/// A validated configuration with paths resolved.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// As written in the file, after command-line overrides.
    pub file: FileConfig,
    pub base_dir: PathBuf,
    pub output: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub steps: Option<usize>,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::Error::new(e).context(format!("reading {}", path.display())))?;
        let mut file: FileConfig = toml::from_str(&text)
            .map_err(|e| ConfigError(vec![format!("{}: {}", path.display(), e.message())]))?;
        if let Some(mode) = overrides.mode {
            file.train.mode = mode;
        }
        if let Some(steps) = overrides.steps {
            file.train.steps = steps;
        }
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let output = match &overrides.output {
            Some(o) => o.clone(),
            None => resolve(&base_dir, &file.paths.output),
        };
        let config = ExperimentConfig {
            file,
            base_dir,
            output,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let p = &self.file.paths;
        for (field, value) in [
            ("paths.world", &p.world),
            ("paths.lexicon", &p.lexicon),
            ("paths.inflections", &p.inflections),
        ] {
            if let Some(v) = value {
                let full = resolve(&self.base_dir, v);
                if !full.is_file() {
                    problems.push(format!("{field}: no such file {}", full.display()));
                }
            }
        }
        if p.output.as_os_str().is_empty() && self.output.as_os_str().is_empty() {
            problems.push("paths.output: missing".to_string());
        }
        problems.extend(
            self.file
                .train
                .problems()
                .into_iter()
                .map(|m| format!("train: {m}")),
        );
        let e = &self.file.eval;
        if e.n_samples < 2 {
            problems.push(format!("eval.n_samples must be at least 2, got {}", e.n_samples));
        }
        if !(e.temperature > 0.0 && e.temperature.is_finite()) {
            problems.push(format!("eval.temperature must be positive, got {}", e.temperature));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(problems))
        }
    }

    /// Hash of the effective configuration. The output directory is left
    /// out so the same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut echo = self.file.clone();
        echo.paths.output = PathBuf::new();
        let json = serde_json::to_vec(&echo).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn path(&self, p: &Option<PathBuf>) -> Option<PathBuf> {
        p.as_ref().map(|v| resolve(&self.base_dir, v))
    }

    pub fn world(&self) -> ddpo_core::Result<World> {
        match self.path(&self.file.paths.world) {
            Some(p) => World::load(p),
            None => Ok(World::bundled()),
        }
    }

    pub fn lexicon(&self) -> ddpo_core::Result<GradedLexicon> {
        let table = match self.path(&self.file.paths.inflections) {
            Some(p) => InflectionTable::load(p)?,
            None => bundled::inflections(),
        };
        let lexicon = match self.path(&self.file.paths.lexicon) {
            Some(p) => GradedLexicon::load(p)?,
            None => GradedLexicon::parse(bundled::LEXICON_CSV, Path::new("lexicon.csv"))?,
        };
        Ok(lexicon.with_inflections(table))
    }

    /// Creates the output directory and checks that it is writable.
    pub fn prepare_output(&self) -> std::io::Result<&Path> {
        std::fs::create_dir_all(&self.output)?;
        let probe = self.output.join(".write-check");
        std::fs::write(&probe, b"")?;
        std::fs::remove_file(probe)?;
        Ok(&self.output)
    }
}
