//! Run configuration as flat `key = value` text.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::analysis::Expectation;
use crate::backend::LogprobAggregate;
use crate::classifier::{FeaturizerConfig, LabelFilter, TrainConfig, DEFAULT_HASH_DIM};
use crate::formats::TabularFormat;
use crate::prompting::DemoMode;
use crate::table::TaskKind;
use crate::vote::TieRule;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {message}")]
    Value { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Mock,
    Http,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Mock => "mock",
            BackendKind::Http => "http",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "http" => Ok(BackendKind::Http),
            other => Err(format!("expected mock or http, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineKind {
    Fixed,
    SelfConsistency,
    Vote,
    Single,
    Oracle,
}

impl PipelineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::Fixed => "fixed",
            PipelineKind::SelfConsistency => "self_consistency",
            PipelineKind::Vote => "vote",
            PipelineKind::Single => "single",
            PipelineKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(PipelineKind::Fixed),
            "self_consistency" | "sc" => Ok(PipelineKind::SelfConsistency),
            "vote" => Ok(PipelineKind::Vote),
            "single" => Ok(PipelineKind::Single),
            "oracle" => Ok(PipelineKind::Oracle),
            other => Err(format!(
                "expected fixed, self_consistency, vote, single or oracle, got {other:?}"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodingKind {
    Greedy,
    Sample,
}

impl fmt::Display for DecodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodingKind::Greedy => "greedy",
            DecodingKind::Sample => "sample",
        })
    }
}

impl FromStr for DecodingKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(DecodingKind::Greedy),
            "sample" => Ok(DecodingKind::Sample),
            other => Err(format!("expected greedy or sample, got {other:?}")),
        }
    }
}

/// Everything a run needs. Keys in the text form mirror the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub task: TaskKind,
    pub backend: BackendKind,
    pub mock_fixture: Option<PathBuf>,
    pub http_base_url: String,
    pub http_model: String,
    pub http_timeout_secs: u64,
    pub http_max_attempts: u32,
    pub logprob_aggregate: LogprobAggregate,
    pub formats: Vec<TabularFormat>,
    pub decoding: DecodingKind,
    pub temperature: f64,
    pub n_samples: usize,
    pub max_tokens: usize,
    pub demo_mode: DemoMode,
    pub template_dir: Option<PathBuf>,
    pub pipeline: PipelineKind,
    pub pipeline_format: Option<TabularFormat>,
    pub model_path: Option<PathBuf>,
    pub tie_rule: TieRule,
    pub exec_timeout_secs: u64,
    pub runner_cmd: Option<String>,
    pub max_executors: usize,
    pub workers: usize,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub label_filter: LabelFilter,
    pub label_threshold: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub hash_dim: u32,
    pub chi2_expectation: Expectation,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            dataset: None,
            task: TaskKind::Qa,
            backend: BackendKind::Mock,
            mock_fixture: None,
            http_base_url: "http://localhost:8000/v1".into(),
            http_model: String::new(),
            http_timeout_secs: 120,
            http_max_attempts: 3,
            logprob_aggregate: LogprobAggregate::Mean,
            formats: TabularFormat::ALL.to_vec(),
            decoding: DecodingKind::Greedy,
            temperature: 0.1,
            n_samples: 5,
            max_tokens: 512,
            demo_mode: DemoMode::PerFormat,
            template_dir: None,
            pipeline: PipelineKind::Vote,
            pipeline_format: None,
            model_path: None,
            tie_rule: TieRule::Max,
            exec_timeout_secs: 10,
            runner_cmd: None,
            max_executors: 4,
            workers: 4,
            seed: 0,
            run_dir: PathBuf::from("run"),
            label_filter: train.filter,
            label_threshold: train.max_labels,
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            l2: train.l2,
            hash_dim: DEFAULT_HASH_DIM,
            chi2_expectation: Expectation::Paper,
        }
    }
}

/// Keys whose values change what the backend and executor produce. A run
/// directory refuses to mix outcomes made under different values.
pub const OUTCOME_KEYS: &[&str] = &[
    "dataset",
    "task",
    "backend",
    "mock_fixture",
    "http_base_url",
    "http_model",
    "logprob_aggregate",
    "temperature",
    "n_samples",
    "max_tokens",
    "demo_mode",
    "template_dir",
    "exec_timeout_secs",
    "runner_cmd",
    "seed",
];

fn opt_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        message: e.to_string(),
    })
}

fn non_empty(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_string())
}

impl RunConfig {
    /// (key, value) pairs in snapshot order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let formats: Vec<&str> = self.formats.iter().map(|f| f.as_str()).collect();
        vec![
            ("dataset", opt_path(&self.dataset)),
            ("task", self.task.to_string()),
            ("backend", self.backend.to_string()),
            ("mock_fixture", opt_path(&self.mock_fixture)),
            ("http_base_url", self.http_base_url.clone()),
            ("http_model", self.http_model.clone()),
            ("http_timeout_secs", self.http_timeout_secs.to_string()),
            ("http_max_attempts", self.http_max_attempts.to_string()),
            (
                "logprob_aggregate",
                match self.logprob_aggregate {
                    LogprobAggregate::Mean => "mean".into(),
                    LogprobAggregate::Sum => "sum".into(),
                },
            ),
            ("formats", formats.join(",")),
            ("decoding", self.decoding.to_string()),
            ("temperature", self.temperature.to_string()),
            ("n_samples", self.n_samples.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("demo_mode", self.demo_mode.to_string()),
            ("template_dir", opt_path(&self.template_dir)),
            ("pipeline", self.pipeline.to_string()),
            (
                "pipeline_format",
                self.pipeline_format.map(|f| f.to_string()).unwrap_or_default(),
            ),
            ("model_path", opt_path(&self.model_path)),
            (
                "tie_rule",
                match self.tie_rule {
                    TieRule::Max => "max".into(),
                    TieRule::Mean => "mean".into(),
                },
            ),
            ("exec_timeout_secs", self.exec_timeout_secs.to_string()),
            ("runner_cmd", self.runner_cmd.clone().unwrap_or_default()),
            ("max_executors", self.max_executors.to_string()),
            ("workers", self.workers.to_string()),
            ("seed", self.seed.to_string()),
            ("run_dir", self.run_dir.display().to_string()),
            (
                "label_filter",
                match self.label_filter {
                    LabelFilter::Half => "half".into(),
                    LabelFilter::Threshold => "threshold".into(),
                },
            ),
            ("label_threshold", self.label_threshold.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("l2", self.l2.to_string()),
            ("hash_dim", self.hash_dim.to_string()),
            (
                "chi2_expectation",
                match self.chi2_expectation {
                    Expectation::Paper => "paper".into(),
                    Expectation::Contingency => "contingency".into(),
                },
            ),
        ]
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = non_empty(value).map(PathBuf::from),
            "task" => self.task = parse_value(key, value)?,
            "backend" => self.backend = parse_value(key, value)?,
            "mock_fixture" => self.mock_fixture = non_empty(value).map(PathBuf::from),
            "http_base_url" => self.http_base_url = value.to_string(),
            "http_model" => self.http_model = value.to_string(),
            "http_timeout_secs" => self.http_timeout_secs = parse_value(key, value)?,
            "http_max_attempts" => self.http_max_attempts = parse_value(key, value)?,
            "logprob_aggregate" => self.logprob_aggregate = parse_value(key, value)?,
            "formats" => {
                self.formats = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_, _>>()?
            }
            "decoding" => self.decoding = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "n_samples" => self.n_samples = parse_value(key, value)?,
            "max_tokens" => self.max_tokens = parse_value(key, value)?,
            "demo_mode" => self.demo_mode = parse_value(key, value)?,
            "template_dir" => self.template_dir = non_empty(value).map(PathBuf::from),
            "pipeline" => self.pipeline = parse_value(key, value)?,
            "pipeline_format" => {
                self.pipeline_format = match value {
                    "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "model_path" => self.model_path = non_empty(value).map(PathBuf::from),
            "tie_rule" => self.tie_rule = parse_value(key, value)?,
            "exec_timeout_secs" => self.exec_timeout_secs = parse_value(key, value)?,
            "runner_cmd" => self.runner_cmd = non_empty(value),
            "max_executors" => self.max_executors = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "run_dir" => self.run_dir = PathBuf::from(value),
            "label_filter" => self.label_filter = parse_value(key, value)?,
            "label_threshold" => self.label_threshold = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "l2" => self.l2 = parse_value(key, value)?,
            "hash_dim" => self.hash_dim = parse_value(key, value)?,
            "chi2_expectation" => self.chi2_expectation = parse_value(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Every key with its effective value, one per line.
    pub fn snapshot(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| {
                if v.is_empty() {
                    format!("{k} =\n")
                } else {
                    format!("{k} = {v}\n")
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.formats.is_empty() {
            return bad("formats must not be empty".into());
        }
        for (i, f) in self.formats.iter().enumerate() {
            if self.formats[..i].contains(f) {
                return bad(format!("format {f} listed twice"));
            }
        }
        match self.pipeline {
            PipelineKind::Fixed | PipelineKind::SelfConsistency => match self.pipeline_format {
                None => return bad(format!("pipeline {} needs pipeline_format", self.pipeline)),
                Some(f) if !self.formats.contains(&f) => {
                    return bad(format!("pipeline_format {f} is not a candidate format"))
                }
                _ => {}
            },
            _ => {}
        }
        if self.pipeline == PipelineKind::Single && self.formats.len() < 2 {
            return bad("pipeline single needs at least two candidate formats".into());
        }
        if self.backend == BackendKind::Http && self.http_model.is_empty() {
            return bad("backend http needs http_model".into());
        }
        if self.workers == 0 || self.max_executors == 0 {
            return bad("workers and max_executors must be positive".into());
        }
        if self.n_samples == 0 || self.max_tokens == 0 || self.exec_timeout_secs == 0 {
            return bad("n_samples, max_tokens and exec_timeout_secs must be positive".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be non-negative".into());
        }
        if self.hash_dim == 0 {
            return bad("hash_dim must be positive".into());
        }
        self.train_config()
            .validate(self.formats.len())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            max_labels: self.label_threshold,
            filter: self.label_filter,
            l2: self.l2,
        }
    }

    pub fn featurizer(&self) -> FeaturizerConfig {
        FeaturizerConfig {
            hash_dim: self.hash_dim,
        }
    }

    pub fn exec_timeout(&self) -> Duration {
        Duration::from_secs(self.exec_timeout_secs)
    }

    /// Decoding actually used: self-consistency always samples.
    pub fn effective_decoding(&self) -> DecodingKind {
        match self.pipeline {
            PipelineKind::SelfConsistency => DecodingKind::Sample,
            _ => self.decoding,
        }
    }

    pub fn model_file(&self) -> PathBuf {
        self.model_path
            .clone()
            .unwrap_or_else(|| self.run_dir.join("model.bin"))
    }

    /// Name under which this pipeline's answers and metrics are stored.
    pub fn pipeline_label(&self) -> String {
        let base = match (self.pipeline, self.pipeline_format) {
            (PipelineKind::Fixed | PipelineKind::SelfConsistency, Some(f)) => format!("{}_{f}", self.pipeline),
            (p, _) => p.to_string(),
        };
        match (self.pipeline, self.effective_decoding()) {
            (PipelineKind::SelfConsistency, _) | (_, DecodingKind::Greedy) => base,
            (_, DecodingKind::Sample) => format!("{base}_sampled"),
        }
    }

    /// Keys in [`OUTCOME_KEYS`] whose values differ between the two configs.
    pub fn outcome_differences(&self, other: &RunConfig) -> Vec<&'static str> {
        OUTCOME_KEYS
            .iter()
            .copied()
            .filter(|k| self.get(k) != other.get(k))
            .collect()
    }
}
