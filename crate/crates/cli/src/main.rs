use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use tce_core::config::{ExperimentConfig, Profile};
use tce_core::datasets::TransitionDataset;
use tce_core::generator::TceModels;
use tce_core::netcore::Checkpoint;
use tce_core::pipeline::{self, RunDir, Stage, SweepAxis};
use tce_core::selection::SelectionResult;
use tce_core::{theory, Error, Result};

/// Errors in schema-versioned JSON outputs carry this version.
const ERROR_REPORT_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "tce", version, about = "Target-aligned coverage expansion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Stage to resume from (`run`, `sweep`).
    #[arg(long)]
    stage: Option<String>,
    #[arg(long, value_parser = ["desk", "paper"])]
    profile: Option<String>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out source, target, and holdout datasets.
    Collect(Common),
    /// Nearest-neighbor λ_mix selection of source rows.
    Select(Common),
    /// Train the score networks and auxiliary models.
    TrainScore(Common),
    /// Synthesize the generated dataset.
    Generate(Common),
    /// Assemble the training set and train the IQL policy.
    TrainPolicy(Common),
    /// Evaluate the policy and write report.json.
    Evaluate(Common),
    /// Run every stage, or resume from `--stage`.
    Run(Common),
    /// Exact tabular bound checks on random instances.
    VerifyBounds {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generation errors of a dataset against the known target dynamics.
    ReportErrors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        holdout: PathBuf,
        /// Generator checkpoint holding the inverse model.
        #[arg(long)]
        models: PathBuf,
    },
    /// One run per axis value and seed, tabulated to CSV and JSON.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda_cov, lambda_mix, K, or target_size.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Print metadata and statistics of a dataset, checkpoint, or selection.
    Inspect { path: PathBuf },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let flag_profile = c.profile.as_deref().map(Profile::parse).transpose()?;
    let mut text = match &c.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::contract(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    if let Some(p) = &c.profile {
        text.push_str(&format!("\nprofile = {p}\n"));
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        text.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
    }
    if let Some(s) = c.seed {
        text.push_str(&format!("seed = {s}\n"));
    }
    ExperimentConfig::parse(&text, flag_profile.unwrap_or(Profile::Desk))
}

fn stage_only(c: &Common, stage: Stage) -> Result<Value> {
    let cfg = load_config(c)?;
    let dir = RunDir::new(&c.out);
    pipeline::run_stage(&cfg, &dir, stage)?;
    Ok(match stage {
        Stage::Collect => json!({
            "source": TransitionDataset::read(dir.data("source"))?.summary(),
            "target": TransitionDataset::read(dir.data("target"))?.summary(),
            "holdout": TransitionDataset::read(dir.data("holdout"))?.summary(),
        }),
        Stage::Select => read_selection(&dir.selection())?.summary(),
        Stage::TrainScore | Stage::TrainPolicy => {
            let name = if stage == Stage::TrainScore { "generator" } else { "policy" };
            let p = dir.model(name);
            if p.exists() {
                checkpoint_summary(&Checkpoint::load(&p)?)
            } else {
                json!({ "skipped": format!("variant {} trains no generator", cfg.tce.variant.name()) })
            }
        }
        Stage::Generate => {
            let p = dir.data("generated");
            if p.exists() {
                TransitionDataset::read(p)?.summary()
            } else {
                json!({ "skipped": format!("variant {} generates nothing", cfg.tce.variant.name()) })
            }
        }
        Stage::Evaluate => serde_json::from_str(&std::fs::read_to_string(dir.report())?)?,
    })
}

fn read_selection(p: &Path) -> Result<SelectionResult> {
    Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
}

fn checkpoint_summary(ck: &Checkpoint) -> Value {
    let entries: Vec<Value> = ck
        .entries()
        .map(|e| json!({ "name": e.name, "len": e.len, "spec": e.spec }))
        .collect();
    json!({
        "kind": "checkpoint",
        "seed": ck.seed,
        "step": ck.step,
        "checksum": ck.checksum(),
        "entries": entries,
        "extra": ck.extra,
    })
}

fn inspect(path: &Path) -> Result<Value> {
    let bytes = std::fs::read(path)?;
    match bytes.get(..4) {
        Some(b"TCED") => {
            let mut v = TransitionDataset::from_bytes(&bytes)?.summary();
            v["kind"] = "dataset".into();
            Ok(v)
        }
        Some(b"TCEM") => Ok(checkpoint_summary(&Checkpoint::from_bytes(&bytes)?)),
        _ => match serde_json::from_slice::<SelectionResult>(&bytes) {
            Ok(sel) => Ok(sel.summary()),
            Err(_) => Err(Error::Format(format!(
                "{} is not a dataset, checkpoint, or selection",
                path.display()
            ))),
        },
    }
}

fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Collect(c) => stage_only(&c, Stage::Collect),
        Command::Select(c) => stage_only(&c, Stage::Select),
        Command::TrainScore(c) => stage_only(&c, Stage::TrainScore),
        Command::Generate(c) => stage_only(&c, Stage::Generate),
        Command::TrainPolicy(c) => stage_only(&c, Stage::TrainPolicy),
        Command::Evaluate(c) => stage_only(&c, Stage::Evaluate),
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let from = c.stage.as_deref().map(Stage::parse).transpose()?.unwrap_or(Stage::Collect);
            let report = pipeline::run_pipeline(&cfg, &RunDir::new(&c.out), from)?;
            Ok(serde_json::to_value(report)?)
        }
        Command::VerifyBounds { instances, seed } => {
            let r = theory::verify_bounds(instances, seed)?;
            Ok(serde_json::to_value(r)?)
        }
        Command::ReportErrors {
            common,
            gen,
            holdout,
            models,
        } => {
            let cfg = load_config(&common)?;
            let pair = cfg.domain_pair()?;
            let gen = TransitionDataset::read(gen)?;
            let hold = TransitionDataset::read(holdout)?;
            let models = TceModels::from_checkpoint(&Checkpoint::load(models)?)?;
            let errors = pipeline::generation_errors(&gen, &models, &pair, &hold)?;
            Ok(json!({
                "version": ERROR_REPORT_VERSION,
                "pair": pair.name,
                "rows": gen.len(),
                "holdout_rows": hold.len(),
                "action": errors.action,
                "reward": errors.reward,
                "transition": errors.transition,
            }))
        }
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
        } => {
            let cfg = load_config(&common)?;
            let axis = SweepAxis::parse(&axis)?;
            let rows = pipeline::sweep(&cfg, axis, &values, &seeds, &common.out)?;
            Ok(serde_json::to_value(rows)?)
        }
        Command::Inspect { path } => inspect(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
