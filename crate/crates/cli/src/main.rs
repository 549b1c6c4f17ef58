use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flextab_core::analysis::Expectation;
use flextab_core::config::{ConfigError, RunConfig};
use flextab_core::pipeline::{self, PipelineError};

/// Table reasoning over several tabular formats: per-instance format
/// selection and cross-format voting.
#[derive(Parser, Debug)]
#[command(name = "flextab", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory; `analyze` accepts it several times, one per model.
    #[arg(long = "run-dir", global = true)]
    run_dir: Vec<PathBuf>,
    #[arg(long = "exec-timeout-secs", global = true)]
    exec_timeout_secs: Option<u64>,
    /// Override any config key, e.g. `--set formats=markdown,dict`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the dataset and copy it into the run directory.
    Ingest {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Query the backend and resolve answers for the configured pipeline.
    Reason(ReasonArgs),
    /// Turn all-format outcomes into per-instance label sets.
    Collect,
    /// Filter label sets and fit the format classifier.
    Train(TrainArgs),
    /// Write the classifier's chosen format per instance.
    Predict,
    /// Recompute metrics.json from the run directory.
    Evaluate,
    /// Write report.json and report.txt.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct ReasonArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// fixed, self_consistency, vote, single or oracle.
    #[arg(long)]
    pipeline: Option<String>,
    /// Format for the fixed and self_consistency pipelines.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Keep instances with 1..=k correct formats (overrides the half rule).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// paper (column means) or contingency (row x column totals).
    #[arg(long = "chi2-expectation")]
    chi2_expectation: Option<String>,
    /// Output directory; defaults to the first run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let file_text = match &cli.config {
        Some(path) => Some(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?),
        None => None,
    };
    // Later stages start from the snapshot an earlier stage left behind, so
    // only the keys being changed have to be repeated.
    let run_dir = match cli.run_dir.first() {
        Some(d) => d.clone(),
        None => {
            let mut c = RunConfig::default();
            if let Some(text) = &file_text {
                c.apply_text(text)?;
            }
            c.run_dir
        }
    };
    let snapshot = run_dir.join(pipeline::SNAPSHOT_FILE);
    let mut cfg = if snapshot.exists() {
        RunConfig::load(&snapshot)?
    } else {
        RunConfig::default()
    };
    if let Some(text) = &file_text {
        cfg.apply_text(text)?;
    }
    let mut set = |k: &str, v: String| cfg.set(k, &v);
    if let Some(s) = cli.seed {
        set("seed", s.to_string())?;
    }
    if let Some(w) = cli.workers {
        set("workers", w.to_string())?;
    }
    if let Some(t) = cli.exec_timeout_secs {
        set("exec_timeout_secs", t.to_string())?;
    }
    match cli.run_dir.as_slice() {
        [] => {}
        [one] => set("run_dir", one.display().to_string())?,
        _ if matches!(cli.command, Command::Analyze(_)) => set("run_dir", cli.run_dir[0].display().to_string())?,
        _ => {
            return Err(ConfigError::Invalid("--run-dir may be given more than once only for `analyze`".into()).into())
        }
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        set(k.trim(), v.to_string())?;
    }
    match &cli.command {
        Command::Ingest { dataset: Some(d) } => set("dataset", d.display().to_string())?,
        Command::Reason(r) => {
            if let Some(d) = &r.dataset {
                set("dataset", d.display().to_string())?;
            }
            if let Some(p) = &r.pipeline {
                set("pipeline", p.clone())?;
            }
            if let Some(f) = &r.format {
                set("pipeline_format", f.clone())?;
            }
        }
        Command::Train(t) => {
            if let Some(k) = t.k {
                set("label_threshold", k.to_string())?;
                set("label_filter", "threshold".into())?;
            }
            if let Some(e) = t.epochs {
                set("epochs", e.to_string())?;
            }
            if let Some(lr) = t.lr {
                set("learning_rate", lr.to_string())?;
            }
        }
        Command::Analyze(a) => {
            if let Some(x) = &a.chi2_expectation {
                set("chi2_expectation", x.clone())?;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pct(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    match &cli.command {
        Command::Ingest { .. } => {
            let s = pipeline::ingest(&cfg)?;
            println!("ingested {} instances into {}", s.instances, cfg.run_dir.display());
        }
        Command::Reason(_) => {
            let backend = pipeline::backend_from_config(&cfg)?;
            let runner = pipeline::runner_from_config(&cfg);
            let s = pipeline::reason(&cfg, backend.as_ref(), runner)?;
            println!(
                "{}: {} instances, {} backend requests, accuracy {}",
                s.label,
                s.instances,
                s.requests,
                pct(s.accuracy)
            );
        }
        Command::Collect => {
            let records = pipeline::collect(&cfg)?;
            let none = records.iter().filter(|r| r.count() == 0).count();
            println!("collected {} label sets ({none} with no correct format)", records.len());
        }
        Command::Train(_) => {
            let t = pipeline::train(&cfg)?;
            for f in &t.summary.unseen {
                eprintln!("warning: no training instance is labeled {f}");
            }
            println!(
                "trained on {} of {} labeled instances, objective {:.6}, training accuracy {}, model {}",
                t.kept,
                t.labeled,
                t.summary.final_objective,
                pct(t.training_accuracy),
                t.model_path.display()
            );
        }
        Command::Predict => {
            let preds = pipeline::predict(&cfg)?;
            for f in &cfg.formats {
                let n = preds.iter().filter(|p| p.format == *f).count();
                println!("{f:<10} {n}");
            }
        }
        Command::Evaluate => {
            let m = pipeline::evaluate(&cfg)?;
            for (f, fm) in &m.formats {
                println!("{:<28} {}", f.as_str(), pct(fm.score.accuracy));
            }
            if let Some(o) = m.oracle {
                println!("{:<28} {}", "oracle bound", pct(o));
            }
            for (label, s) in &m.pipelines {
                println!("{label:<28} {}", pct(s.accuracy));
            }
            if let Some(c) = &m.classification {
                println!("{:<28} {}", "format classification", pct(c.accuracy));
            }
        }
        Command::Analyze(a) => {
            let dirs = if cli.run_dir.is_empty() {
                vec![cfg.run_dir.clone()]
            } else {
                cli.run_dir.clone()
            };
            let out = a.out.clone().unwrap_or_else(|| dirs[0].clone());
            let expectation: Expectation = cfg.chi2_expectation;
            let report = pipeline::analyze(&dirs, &out, expectation)?;
            print!("{}", flextab_core::analysis::render_text(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
