//! Stages over a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.snapshot          effective config, every key
//! instances.jsonl          ingested dataset
//! outcomes/<format>.jsonl  greedy outcomes, one line per (instance, sample)
//! outcomes/<format>.sampled.jsonl
//! answers/<pipeline>.jsonl final answer per instance
//! skipped.jsonl            requests the backend could not serve
//! labels.jsonl, model.bin, predictions.jsonl, metrics.json, report.{json,txt}
//! ```
//!
//! Outcome files are appended to while a stage runs and rewritten in dataset
//! order when it finishes, so interrupted runs resume where they stopped and
//! finished files do not depend on scheduling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalysisError, CorrectnessMatrix, Expectation, Report, ReportInputs};
use crate::answer::{exact_match, Answer, MetricError};
use crate::backend::{Backend, BackendError, GenerationRequest, HttpBackend, HttpConfig, MockBackend};
use crate::classifier::{self, ClassifierError, FormatClassifier, LabelRecord, TrainSummary};
use crate::config::{BackendKind, ConfigError, DecodingKind, PipelineKind, RunConfig};
use crate::execution::{Executor, ProgramRunner, ReasoningOutcome, SubprocessRunner};
use crate::formats::TabularFormat;
use crate::prompting::{build_prompt, load_templates, DemoSet, ShotPolicy, TemplateError};
use crate::table::{load_dataset, write_dataset, DatasetError, Instance};
use crate::vote::{self, VoteError};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const OUTCOMES_DIR: &str = "outcomes";
pub const ANSWERS_DIR: &str = "answers";
pub const SKIPPED_FILE: &str = "skipped.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("backend setup: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Vote(#[from] VoteError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("missing {artifact}; run `{stage}` first")]
    MissingStage { artifact: PathBuf, stage: &'static str },
    #[error("duplicate instance id {0:?} in dataset")]
    DuplicateId(String),
    #[error("run directory was made with different {keys:?}; use a fresh run directory")]
    ConfigMismatch { keys: Vec<&'static str> },
    #[error("{failed} backend request(s) failed (first: {first}); partial outcomes kept, rerun to resume")]
    Incomplete { failed: usize, first: String },
    #[error("{0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// files

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_at(&tmp))?;
    fs::rename(&tmp, path).map_err(io_at(path))
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(items))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reads an append-only outcome file. A final line cut short by an
/// interruption is dropped and the file truncated to its last complete line.
pub fn load_outcome_file(path: &Path) -> Result<Vec<ReasoningOutcome>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut out = Vec::new();
    let mut good_len = 0;
    let mut offset = 0;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        offset += line.len();
        let last = i + 1 == lines.len();
        if line.trim().is_empty() {
            good_len = offset;
            continue;
        }
        match serde_json::from_str::<ReasoningOutcome>(line.trim_end()) {
            Ok(o) if line.ends_with('\n') || !last => {
                out.push(o);
                good_len = offset;
            }
            Ok(_) => break,
            Err(_) if last => break,
            Err(e) => {
                return Err(PipelineError::Corrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    if good_len < text.len() {
        let f = OpenOptions::new().write(true).open(path).map_err(io_at(path))?;
        f.set_len(good_len as u64).map_err(io_at(path))?;
    }
    Ok(out)
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn outcomes(&self, format: TabularFormat, decoding: DecodingKind) -> PathBuf {
        let name = match decoding {
            DecodingKind::Greedy => format!("{format}.jsonl"),
            DecodingKind::Sample => format!("{format}.sampled.jsonl"),
        };
        self.root.join(OUTCOMES_DIR).join(name)
    }

    pub fn answers(&self, label: &str) -> PathBuf {
        self.root.join(ANSWERS_DIR).join(format!("{label}.jsonl"))
    }

    fn require(&self, name: &str, stage: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::MissingStage { artifact: p, stage })
        }
    }

    pub fn instances(&self) -> Result<Vec<Instance>> {
        let p = self.require(INSTANCES_FILE, "ingest")?;
        Ok(load_dataset(&p, crate::table::TaskKind::Qa)?)
    }

    pub fn snapshot(&self) -> Result<RunConfig> {
        let p = self.require(SNAPSHOT_FILE, "ingest")?;
        Ok(RunConfig::load(&p)?)
    }
}

/// Checks an existing snapshot for conflicting outcome settings, then writes
/// the current config as the snapshot.
fn claim_run_dir(cfg: &RunConfig) -> Result<RunDir> {
    let rd = RunDir::new(&cfg.run_dir);
    fs::create_dir_all(&rd.root).map_err(io_at(&rd.root))?;
    let snap = rd.path(SNAPSHOT_FILE);
    if snap.exists() {
        let old = RunConfig::load(&snap)?;
        let keys = old.outcome_differences(cfg);
        if !keys.is_empty() {
            return Err(PipelineError::ConfigMismatch { keys });
        }
    }
    write_atomic(&snap, cfg.snapshot().as_bytes())?;
    Ok(rd)
}

// ---------------------------------------------------------------------------
// setup helpers

pub fn backend_from_config(cfg: &RunConfig) -> Result<Box<dyn Backend>> {
    Ok(match cfg.backend {
        BackendKind::Mock => match &cfg.mock_fixture {
            Some(path) => Box::new(MockBackend::from_fixture(path, cfg.seed)?),
            None => Box::new(MockBackend::new(cfg.seed)),
        },
        BackendKind::Http => {
            let mut http = HttpConfig::new(cfg.http_base_url.clone(), cfg.http_model.clone());
            http.timeout = Duration::from_secs(cfg.http_timeout_secs);
            http.max_attempts = cfg.http_max_attempts;
            http.logprob_aggregate = cfg.logprob_aggregate;
            Box::new(HttpBackend::new(http)?)
        }
    })
}

pub fn runner_from_config(cfg: &RunConfig) -> Option<Arc<dyn ProgramRunner>> {
    let cmd = cfg.runner_cmd.as_deref()?;
    SubprocessRunner::from_command_line(cmd, cfg.max_executors).map(|r| Arc::new(r) as Arc<dyn ProgramRunner>)
}

pub fn demos_from_config(cfg: &RunConfig) -> Result<DemoSet> {
    Ok(match &cfg.template_dir {
        Some(dir) => load_templates(dir.join(cfg.demo_mode.dir_name()), cfg.demo_mode, ShotPolicy::default())?,
        None => DemoSet::bundled(cfg.demo_mode)?,
    })
}

fn id_order(instances: &[Instance]) -> HashMap<&str, usize> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| (inst.id.as_str(), i))
        .collect()
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Debug, Clone)]
pub struct IngestSummary {
    pub instances: usize,
}

pub fn ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    cfg.validate()?;
    let rd = claim_run_dir(cfg)?;
    let instances = ingest_into(cfg, &rd)?;
    Ok(IngestSummary {
        instances: instances.len(),
    })
}

fn ingest_into(cfg: &RunConfig, rd: &RunDir) -> Result<Vec<Instance>> {
    let dataset = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| PipelineError::Invalid("config key `dataset` is not set".into()))?;
    let instances = load_dataset(dataset, cfg.task)?;
    let mut seen = HashSet::new();
    if let Some(dup) = instances.iter().find(|i| !seen.insert(i.id.as_str())) {
        return Err(PipelineError::DuplicateId(dup.id.clone()));
    }
    let path = rd.path(INSTANCES_FILE);
    write_dataset(&path, &instances).map_err(io_at(&path))?;
    Ok(instances)
}

// ---------------------------------------------------------------------------
// reason

/// Final answer of one pipeline for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub instance_id: String,
    pub answer: Option<Answer>,
    pub correct: bool,
    pub support: usize,
    pub formats: Vec<TabularFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub format: TabularFormat,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Skipped {
    instance_id: String,
    format: TabularFormat,
    reason: String,
}

#[derive(Debug, Clone)]
pub struct ReasonSummary {
    pub label: String,
    pub instances: usize,
    /// Backend requests issued by this invocation.
    pub requests: usize,
    pub accuracy: f64,
}

enum Msg {
    Outcome(ReasoningOutcome),
    Failed(Skipped),
}

struct WorkItem {
    instance: usize,
    format: TabularFormat,
    missing: Vec<usize>,
}

/// Runs the configured pipeline over every instance, reusing outcomes that
/// are already on disk.
pub fn reason(cfg: &RunConfig, backend: &dyn Backend, runner: Option<Arc<dyn ProgramRunner>>) -> Result<ReasonSummary> {
    cfg.validate()?;
    let rd = claim_run_dir(cfg)?;
    let instances = if rd.path(INSTANCES_FILE).exists() {
        rd.instances()?
    } else {
        ingest_into(cfg, &rd)?
    };
    let demos = demos_from_config(cfg)?;
    let executor = Executor::new(runner, cfg.exec_timeout());
    let decoding = cfg.effective_decoding();
    let n = match decoding {
        DecodingKind::Greedy => 1,
        DecodingKind::Sample => cfg.n_samples,
    };

    let plan: Vec<Vec<TabularFormat>> = match cfg.pipeline {
        PipelineKind::Fixed | PipelineKind::SelfConsistency => {
            let f = cfg.pipeline_format.expect("validated");
            vec![vec![f]; instances.len()]
        }
        PipelineKind::Vote | PipelineKind::Oracle => vec![cfg.formats.clone(); instances.len()],
        PipelineKind::Single => {
            let preds = predict_into(cfg, &rd, &instances)?;
            preds.into_iter().map(|p| vec![p.format]).collect()
        }
    };
    let used: Vec<TabularFormat> = cfg
        .formats
        .iter()
        .copied()
        .filter(|f| plan.iter().any(|fs| fs.contains(f)))
        .collect();

    let mut have: HashSet<(String, TabularFormat, usize)> = HashSet::new();
    for &f in &used {
        for o in load_outcome_file(&rd.outcomes(f, decoding))? {
            have.insert((o.instance_id, o.format, o.sample_index));
        }
    }
    let items: Vec<WorkItem> = plan
        .iter()
        .enumerate()
        .flat_map(|(i, fs)| fs.iter().map(move |&f| (i, f)))
        .filter_map(|(i, f)| {
            let missing: Vec<usize> = (0..n)
                .filter(|s| !have.contains(&(instances[i].id.clone(), f, *s)))
                .collect();
            (!missing.is_empty()).then_some(WorkItem {
                instance: i,
                format: f,
                missing,
            })
        })
        .collect();

    let failures = run_items(cfg, &rd, &instances, &items, &demos, &executor, backend, decoding, n)?;

    let order = id_order(&instances);
    let mut by_format: HashMap<TabularFormat, Vec<ReasoningOutcome>> = HashMap::new();
    for &f in &used {
        by_format.insert(f, finalize_outcomes(&rd.outcomes(f, decoding), &order)?);
    }
    let skipped = rd.path(SKIPPED_FILE);
    if failures.is_empty() {
        if skipped.exists() {
            fs::remove_file(&skipped).map_err(io_at(&skipped))?;
        }
    } else {
        let mut sorted = failures.clone();
        sorted.sort_by_key(|s| (order.get(s.instance_id.as_str()).copied(), s.format));
        write_jsonl(&skipped, &sorted)?;
        return Err(PipelineError::Incomplete {
            failed: failures.len(),
            first: format!("{} {}: {}", sorted[0].instance_id, sorted[0].format, sorted[0].reason),
        });
    }

    let answers = aggregate(cfg, &instances, &plan, &by_format, n)?;
    let label = cfg.pipeline_label();
    write_jsonl(&rd.answers(&label), &answers)?;
    let correct = answers.iter().filter(|a| a.correct).count();
    evaluate(cfg)?;
    Ok(ReasonSummary {
        label,
        instances: instances.len(),
        requests: items.len(),
        accuracy: if answers.is_empty() {
            0.0
        } else {
            correct as f64 / answers.len() as f64
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn run_items(
    cfg: &RunConfig,
    rd: &RunDir,
    instances: &[Instance],
    items: &[WorkItem],
    demos: &DemoSet,
    executor: &Executor,
    backend: &dyn Backend,
    decoding: DecodingKind,
    n: usize,
) -> Result<Vec<Skipped>> {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Msg>();
    let mut failures = Vec::new();
    let mut files: HashMap<TabularFormat, File> = HashMap::new();
    let mut write_error = None;

    std::thread::scope(|s| {
        for _ in 0..cfg.workers.min(items.len()) {
            let tx = tx.clone();
            let next = &next;
            s.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(k) else { break };
                for msg in work(
                    cfg,
                    &instances[item.instance],
                    item,
                    demos,
                    executor,
                    backend,
                    decoding,
                    n,
                ) {
                    if tx.send(msg).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);
        // single writer: every outcome line goes through here
        for msg in rx {
            match msg {
                Msg::Outcome(o) => {
                    if write_error.is_some() {
                        continue;
                    }
                    let path = rd.outcomes(o.format, decoding);
                    let res = (|| -> std::io::Result<()> {
                        let file = match files.entry(o.format) {
                            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                            std::collections::hash_map::Entry::Vacant(e) => {
                                fs::create_dir_all(path.parent().expect("outcomes dir"))?;
                                e.insert(OpenOptions::new().create(true).append(true).open(&path)?)
                            }
                        };
                        let mut line = serde_json::to_vec(&o).expect("outcome serializes");
                        line.push(b'\n');
                        file.write_all(&line)
                    })();
                    if let Err(source) = res {
                        write_error = Some(PipelineError::Io { path, source });
                    }
                }
                Msg::Failed(skip) => failures.push(skip),
            }
        }
    });
    match write_error {
        Some(e) => Err(e),
        None => Ok(failures),
    }
}

#[allow(clippy::too_many_arguments)]
fn work(
    cfg: &RunConfig,
    instance: &Instance,
    item: &WorkItem,
    demos: &DemoSet,
    executor: &Executor,
    backend: &dyn Backend,
    decoding: DecodingKind,
    n: usize,
) -> Vec<Msg> {
    let fail = |reason: String| {
        vec![Msg::Failed(Skipped {
            instance_id: instance.id.clone(),
            format: item.format,
            reason,
        })]
    };
    let prompt = match demos
        .get(item.format, instance.task)
        .and_then(|t| build_prompt(instance, item.format, t))
    {
        Ok(p) => p,
        Err(e) => return fail(e.to_string()),
    };
    let mut request = match decoding {
        DecodingKind::Greedy => GenerationRequest::greedy(prompt),
        DecodingKind::Sample => {
            let mut r = GenerationRequest::sample(prompt);
            r.temperature = cfg.temperature;
            r.n_samples = n;
            r
        }
    };
    request.max_tokens = cfg.max_tokens;
    let request = request.with_tag(instance.id.clone(), item.format);
    let completions = match backend.generate(&request) {
        Ok(c) if c.len() >= n => c,
        Ok(c) => return fail(format!("backend returned {} of {n} completions", c.len())),
        Err(e) => return fail(e.to_string()),
    };
    item.missing
        .iter()
        .map(|&s| Msg::Outcome(executor.resolve(instance, item.format, s, &completions[s])))
        .collect()
}

/// Deduplicates by (instance, sample), sorts into dataset order and
/// rewrites the file.
fn finalize_outcomes(path: &Path, order: &HashMap<&str, usize>) -> Result<Vec<ReasoningOutcome>> {
    let mut outcomes = load_outcome_file(path)?;
    let mut seen = HashSet::new();
    outcomes.retain(|o| seen.insert((o.instance_id.clone(), o.sample_index)));
    outcomes.sort_by(|a, b| {
        let ka = (
            order.get(a.instance_id.as_str()).copied().unwrap_or(usize::MAX),
            &a.instance_id,
            a.sample_index,
        );
        let kb = (
            order.get(b.instance_id.as_str()).copied().unwrap_or(usize::MAX),
            &b.instance_id,
            b.sample_index,
        );
        ka.cmp(&kb)
    });
    if path.exists() || !outcomes.is_empty() {
        write_jsonl(path, &outcomes)?;
    }
    Ok(outcomes)
}

fn aggregate(
    cfg: &RunConfig,
    instances: &[Instance],
    plan: &[Vec<TabularFormat>],
    by_format: &HashMap<TabularFormat, Vec<ReasoningOutcome>>,
    n: usize,
) -> Result<Vec<AnswerRecord>> {
    let mut index: HashMap<(&str, TabularFormat), Vec<&ReasoningOutcome>> = HashMap::new();
    for outs in by_format.values() {
        for o in outs.iter().filter(|o| o.sample_index < n) {
            index.entry((o.instance_id.as_str(), o.format)).or_default().push(o);
        }
    }
    let mut records = Vec::with_capacity(instances.len());
    for (inst, formats) in instances.iter().zip(plan) {
        let ballot: Vec<ReasoningOutcome> = formats
            .iter()
            .flat_map(|f| index.get(&(inst.id.as_str(), *f)).into_iter().flatten())
            .map(|o| (*o).clone())
            .collect();
        let is_correct = |a: &Answer| exact_match(a, &inst.gold_answers);
        let (answer, support) = if cfg.pipeline == PipelineKind::Oracle {
            let hit = ballot
                .iter()
                .filter(|o| o.sample_index == 0)
                .find_map(|o| o.answer.as_ref().filter(|a| is_correct(a)));
            match hit {
                Some(a) => (Some(a.clone()), 1),
                None => decided(&ballot, cfg)?,
            }
        } else {
            decided(&ballot, cfg)?
        };
        records.push(AnswerRecord {
            instance_id: inst.id.clone(),
            correct: answer.as_ref().is_some_and(is_correct),
            answer,
            support,
            formats: formats.clone(),
        });
    }
    Ok(records)
}

fn decided(ballot: &[ReasoningOutcome], cfg: &RunConfig) -> Result<(Option<Answer>, usize)> {
    Ok(match vote::decide(ballot, cfg.tie_rule)? {
        Some(d) => (Some(d.answer), d.support),
        None => (None, 0),
    })
}

// ---------------------------------------------------------------------------
// collect / train / predict

fn greedy_outcomes(rd: &RunDir, formats: &[TabularFormat]) -> Result<Vec<ReasoningOutcome>> {
    let mut all = Vec::new();
    for &f in formats {
        let path = rd.outcomes(f, DecodingKind::Greedy);
        if !path.exists() {
            return Err(PipelineError::MissingStage {
                artifact: path,
                stage: "reason (pipeline vote or oracle)",
            });
        }
        all.extend(load_outcome_file(&path)?);
    }
    Ok(all)
}

pub fn collect(cfg: &RunConfig) -> Result<Vec<LabelRecord>> {
    cfg.validate()?;
    let rd = RunDir::new(&cfg.run_dir);
    let instances = rd.instances()?;
    let outcomes = greedy_outcomes(&rd, &cfg.formats)?;
    let records = classifier::collect_labels(&instances, &outcomes, &cfg.formats, &cfg.featurizer())?;
    write_jsonl(&rd.path(LABELS_FILE), &records)?;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub labeled: usize,
    pub kept: usize,
    pub summary: TrainSummary,
    pub training_accuracy: f64,
    pub model_path: PathBuf,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let rd = RunDir::new(&cfg.run_dir);
    let records: Vec<LabelRecord> = read_jsonl(&rd.require(LABELS_FILE, "collect")?)?;
    let tc = cfg.train_config();
    let kept = classifier::filter_training(&records, tc.max_labels, tc.filter);
    if kept.is_empty() {
        return Err(PipelineError::Invalid(format!(
            "no labeled instance survives filtering ({} labeled)",
            records.len()
        )));
    }
    let (model, summary) = classifier::train(&kept, &cfg.formats, cfg.featurizer(), &tc)?;
    let training_accuracy = model.classification_accuracy(&kept)?;
    let model_path = cfg.model_file();
    write_atomic(&model_path, &model.to_bytes())?;
    Ok(TrainOutcome {
        labeled: records.len(),
        kept: kept.len(),
        summary,
        training_accuracy,
        model_path,
    })
}

fn load_model(cfg: &RunConfig) -> Result<FormatClassifier> {
    let path = cfg.model_file();
    if !path.exists() {
        return Err(PipelineError::MissingStage {
            artifact: path,
            stage: "train",
        });
    }
    let model = FormatClassifier::load(&path)?;
    if let Some(f) = model.formats.iter().find(|f| !cfg.formats.contains(f)) {
        return Err(PipelineError::Invalid(format!(
            "model predicts format {f}, which is not a candidate format"
        )));
    }
    Ok(model)
}

fn predict_into(cfg: &RunConfig, rd: &RunDir, instances: &[Instance]) -> Result<Vec<Prediction>> {
    let model = load_model(cfg)?;
    let preds: Vec<Prediction> = instances
        .iter()
        .map(|inst| {
            let scores = model.scores(inst);
            Prediction {
                instance_id: inst.id.clone(),
                format: model.formats[classifier::argmax_first(&scores)],
                scores,
            }
        })
        .collect();
    write_jsonl(&rd.path(PREDICTIONS_FILE), &preds)?;
    Ok(preds)
}

pub fn predict(cfg: &RunConfig) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    let rd = RunDir::new(&cfg.run_dir);
    let instances = rd.instances()?;
    predict_into(cfg, &rd, &instances)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

impl Score {
    fn new(correct: usize, total: usize) -> Self {
        Score {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatMetrics {
    #[serde(flatten)]
    pub score: Score,
    /// Error counts by kind.
    pub errors: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub instances: usize,
    /// Greedy accuracy of each candidate format with complete outcomes.
    pub formats: BTreeMap<TabularFormat, FormatMetrics>,
    pub oracle: Option<f64>,
    /// Accuracy of every pipeline whose answers are on disk.
    pub pipelines: BTreeMap<String, Score>,
    /// Share of labeled instances whose predicted format is correct.
    pub classification: Option<Score>,
}

pub fn evaluate(cfg: &RunConfig) -> Result<Metrics> {
    let rd = RunDir::new(&cfg.run_dir);
    let instances = rd.instances()?;
    let gold: HashMap<&str, &Instance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();

    let mut formats = BTreeMap::new();
    let mut complete = Vec::new();
    for &f in &cfg.formats {
        let outs = load_outcome_file(&rd.outcomes(f, DecodingKind::Greedy))?;
        let first: HashMap<&str, &ReasoningOutcome> = outs
            .iter()
            .filter(|o| o.sample_index == 0)
            .map(|o| (o.instance_id.as_str(), o))
            .collect();
        if instances.is_empty() || !instances.iter().all(|i| first.contains_key(i.id.as_str())) {
            continue;
        }
        let mut errors = BTreeMap::new();
        let mut correct = 0;
        for inst in &instances {
            let o = first[inst.id.as_str()];
            if let Some(e) = &o.error {
                let kind = serde_json::to_value(e.kind).expect("kind serializes");
                *errors.entry(kind.as_str().unwrap_or_default().to_string()).or_insert(0) += 1;
            }
            if o.answer.as_ref().is_some_and(|a| exact_match(a, &inst.gold_answers)) {
                correct += 1;
            }
        }
        formats.insert(
            f,
            FormatMetrics {
                score: Score::new(correct, instances.len()),
                errors,
            },
        );
        complete.push(f);
    }
    let oracle = if complete.len() == cfg.formats.len() && !instances.is_empty() {
        let outs = greedy_outcomes(&rd, &cfg.formats)?;
        let m = CorrectnessMatrix::from_outcomes(&instances, &outs, &cfg.formats)?;
        Some(analysis::oracle_accuracy(&m)?)
    } else {
        None
    };

    let mut pipelines = BTreeMap::new();
    let answers_dir = rd.path(ANSWERS_DIR);
    if answers_dir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&answers_dir)
            .map_err(io_at(&answers_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for path in files {
            let records: Vec<AnswerRecord> = read_jsonl(&path)?;
            let correct = records
                .iter()
                .filter(|r| {
                    let inst = gold.get(r.instance_id.as_str());
                    matches!((inst, &r.answer), (Some(i), Some(a)) if exact_match(a, &i.gold_answers))
                })
                .count();
            let label = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            pipelines.insert(label, Score::new(correct, records.len()));
        }
    }

    let labels_path = rd.path(LABELS_FILE);
    let preds_path = rd.path(PREDICTIONS_FILE);
    let classification = if labels_path.exists() && preds_path.exists() {
        let labels: Vec<LabelRecord> = read_jsonl(&labels_path)?;
        let preds: Vec<Prediction> = read_jsonl(&preds_path)?;
        let chosen: HashMap<&str, TabularFormat> = preds.iter().map(|p| (p.instance_id.as_str(), p.format)).collect();
        let (mut hit, mut total) = (0, 0);
        for r in labels.iter().filter(|r| r.count() > 0) {
            let Some(f) = chosen.get(r.instance_id.as_str()) else {
                continue;
            };
            total += 1;
            if let Some(pos) = cfg.formats.iter().position(|x| x == f) {
                hit += usize::from(r.labels.get(pos) == Some(&1));
            }
        }
        (total > 0).then(|| Score::new(hit, total))
    } else {
        None
    };

    let metrics = Metrics {
        instances: instances.len(),
        formats,
        oracle,
        pipelines,
        classification,
    };
    let mut bytes = serde_json::to_vec_pretty(&metrics).expect("metrics serialize");
    bytes.push(b'\n');
    write_atomic(&rd.path(METRICS_FILE), &bytes)?;
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// analyze

/// Builds the report from the first run directory; with two or more run
/// directories (one per model) it adds the chi-square test across them.
pub fn analyze(run_dirs: &[PathBuf], out_dir: &Path, expectation: Expectation) -> Result<Report> {
    let Some(primary) = run_dirs.first() else {
        return Err(PipelineError::Invalid(
            "analyze needs at least one run directory".into(),
        ));
    };
    let mut matrices = Vec::new();
    for dir in run_dirs {
        let rd = RunDir::new(dir);
        let cfg = rd.snapshot()?;
        let instances = rd.instances()?;
        let outcomes = greedy_outcomes(&rd, &cfg.formats)?;
        matrices.push(CorrectnessMatrix::from_outcomes(&instances, &outcomes, &cfg.formats)?);
    }
    let rd = RunDir::new(primary);
    let mut inputs = ReportInputs {
        matrix: Some(matrices[0].clone()),
        ..ReportInputs::default()
    };
    let metrics_path = rd.path(METRICS_FILE);
    if metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path).map_err(io_at(&metrics_path))?;
        let metrics: Metrics = serde_json::from_str(&text).map_err(|e| PipelineError::Corrupt {
            path: metrics_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        inputs.methods = metrics
            .pipelines
            .into_iter()
            .filter(|(label, _)| !label.starts_with("fixed_"))
            .map(|(label, s)| (label, s.accuracy))
            .collect();
    }
    let labels_path = rd.path(LABELS_FILE);
    if labels_path.exists() {
        let records: Vec<LabelRecord> = read_jsonl(&labels_path)?;
        inputs.labels = Some((matrices[0].formats.clone(), records));
    }
    if matrices.len() >= 2 {
        if matrices.iter().any(|m| m.formats != matrices[0].formats) {
            return Err(PipelineError::Invalid(
                "run directories use different candidate formats".into(),
            ));
        }
        let counts: Vec<Vec<u64>> = matrices.iter().map(CorrectnessMatrix::correct_counts).collect();
        let names = run_dirs
            .iter()
            .map(|d| {
                d.file_name()
                    .map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned())
            })
            .collect();
        inputs.chi_square = Some((names, analysis::chi_square(&counts, expectation)?));
    }
    let report = analysis::build_report(&inputs);
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    analysis::emit_report(&report, out_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_tail_is_dropped_and_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let o = ReasoningOutcome {
            instance_id: "a".into(),
            format: TabularFormat::Markdown,
            sample_index: 0,
            raw_text: "so the answer is: 1".into(),
            answer: Some(Answer::new("1", crate::TaskKind::Qa)),
            mean_logprob: -0.5,
            error: None,
        };
        let mut bytes = to_jsonl(&[o.clone(), o.clone()]);
        let full = bytes.len();
        bytes.truncate(full - 7);
        fs::write(&path, &bytes).unwrap();
        let back = load_outcome_file(&path).unwrap();
        assert_eq!(back, vec![o.clone()]);
        assert_eq!(fs::read(&path).unwrap(), to_jsonl(std::slice::from_ref(&o)));

        // a complete final line missing only its newline is also dropped
        let mut no_nl = to_jsonl(std::slice::from_ref(&o));
        no_nl.pop();
        fs::write(&path, &no_nl).unwrap();
        assert!(load_outcome_file(&path).unwrap().is_empty());

        let mut bad = to_jsonl(std::slice::from_ref(&o));
        bad.extend_from_slice(b"{broken\n");
        bad.extend(to_jsonl(&[o]));
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_outcome_file(&path),
            Err(PipelineError::Corrupt { line: 2, .. })
        ));
    }

    #[test]
    fn missing_stage_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            run_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let err = collect(&cfg).unwrap_err().to_string();
        assert!(err.contains("ingest"), "{err}");
        let err = train(&cfg).unwrap_err().to_string();
        assert!(err.contains("collect"), "{err}");
    }
}
