//! Staged experiment runs.
//!
//! A run directory holds every stage's output so any stage can be rerun on
//! its own:
//!
//! ```text
//! config.txt              snapshot of the effective configuration
//! data/source.tced        data/target.tced   data/holdout.tced
//! selection.json          λ_mix selection of source rows
//! models/generator.ckpt   data/generated.tced
//! data/train.tced         models/policy.ckpt
//! metrics/<stage>.jsonl   per-stage logs, concatenated into metrics.jsonl
//! report.json
//! ```
//!
//! Nothing written here carries a timestamp; wall-clock timings go to
//! `timing.json`, which is excluded from determinism checks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::datasets::{self, Origin, TransitionDataset, Variant};
use crate::domains::{self, Controller, DomainPair, ErrorReport, MeanStd, ReferenceReturns};
use crate::error::{ensure, Error, Result};
use crate::generator::{self, SynthesisReport, TceModels, TrainingReport};
use crate::netcore::Checkpoint;
use crate::policy::{self, MetricRow, PolicyModel};
use crate::rng;
use crate::selection::{self, SelectionResult};
use crate::theory::{self, BoundReport};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Collect,
    Select,
    TrainScore,
    Generate,
    TrainPolicy,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Collect,
        Stage::Select,
        Stage::TrainScore,
        Stage::Generate,
        Stage::TrainPolicy,
        Stage::Evaluate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Select => "select",
            Stage::TrainScore => "train-score",
            Stage::Generate => "generate",
            Stage::TrainPolicy => "train-policy",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown stage '{s}'")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Prefixes an error with the stage that raised it, keeping its kind.
fn in_stage(stage: Stage, e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Contract(format!("stage {stage}: {m}")),
        Error::Numeric { context, index } => Error::Numeric {
            context: format!("stage {stage}: {context}"),
            index,
        },
        Error::Format(m) => Error::Format(format!("stage {stage}: {m}")),
        other => other,
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.tced"))
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.ckpt"))
    }

    pub fn selection(&self) -> PathBuf {
        self.root.join("selection.json")
    }

    pub fn stage_metrics(&self, stage: Stage) -> PathBuf {
        self.root.join("metrics").join(format!("{stage}.jsonl"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.json")
    }

    fn prepare(&self) -> Result<()> {
        for sub in ["data", "models", "metrics"] {
            fs::create_dir_all(self.root.join(sub))?;
        }
        Ok(())
    }

    fn read_data(&self, name: &str, stage: Stage) -> Result<TransitionDataset> {
        let path = self.data(name);
        if !path.exists() {
            return Err(Error::contract(format!(
                "missing {} (run the stage that produces it before {stage})",
                path.display()
            )));
        }
        TransitionDataset::read(path)
    }

    /// Rewrites `metrics.jsonl` from the per-stage files in stage order.
    fn merge_metrics(&self) -> Result<()> {
        let mut out = String::new();
        for st in Stage::ALL {
            let p = self.stage_metrics(st);
            if p.exists() {
                out.push_str(&fs::read_to_string(p)?);
            }
        }
        fs::write(self.metrics(), out)?;
        Ok(())
    }

    fn write_stage_metrics(&self, stage: Stage, rows: &[Value]) -> Result<()> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(self.stage_metrics(stage), text)?;
        self.merge_metrics()
    }

    fn record_timing(&self, stage: Stage, secs: f64) -> Result<()> {
        let path = self.timing();
        let mut t: BTreeMap<String, f64> = match fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        t.insert(stage.name().to_owned(), secs);
        fs::write(path, serde_json::to_string_pretty(&t)?)?;
        Ok(())
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::contract(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Seeds of each stochastic stage, all derived from the run seed.
fn stage_seed(cfg: &ExperimentConfig, label: &str) -> u64 {
    rng::labeled_seed(cfg.seed, label)
}

/// Action errors are undefined without an inverse model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationErrors {
    pub action: Option<MeanStd>,
    pub reward: MeanStd,
    pub transition: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSummary {
    pub mix_rows: usize,
    pub final_mix_loss: Option<f64>,
    pub final_tran_loss: Option<f64>,
    pub inv_holdout_mse: f64,
    pub rew_holdout_mse: f64,
    pub checksums: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSizes {
    pub source: usize,
    pub target: usize,
    pub generated: usize,
    pub train: usize,
}

/// Final per-run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config_hash: String,
    pub pair: String,
    pub variant: Variant,
    pub lambda_cov: f64,
    pub lambda_mix: f64,
    pub one_stage: bool,
    pub sampler_steps: usize,
    pub seed: u64,
    pub sizes: DataSizes,
    pub reference: ReferenceReturns,
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub normalized_score: f64,
    pub errors: Option<GenerationErrors>,
    pub synthesis: Option<SynthesisReport>,
    pub generator: Option<GeneratorSummary>,
    pub selection: Value,
    pub bounds: Option<BoundReport>,
}

/// Runs the pipeline from `from` (inclusive) to the end and returns the report.
pub fn run_pipeline(cfg: &ExperimentConfig, dir: &RunDir, from: Stage) -> Result<RunReport> {
    for st in Stage::ALL.into_iter().filter(|s| *s >= from) {
        run_stage(cfg, dir, st)?;
    }
    read_json(&dir.report())
}

/// Runs one stage, reading its inputs from earlier stages' outputs.
pub fn run_stage(cfg: &ExperimentConfig, dir: &RunDir, stage: Stage) -> Result<()> {
    cfg.validate()?;
    dir.prepare()?;
    fs::write(dir.config(), cfg.to_text())?;
    let t0 = Instant::now();
    log::info!("stage {stage} starting in {}", dir.root().display());
    let res = match stage {
        Stage::Collect => stage_collect(cfg, dir),
        Stage::Select => stage_select(cfg, dir),
        Stage::TrainScore => stage_train_score(cfg, dir),
        Stage::Generate => stage_generate(cfg, dir),
        Stage::TrainPolicy => stage_train_policy(cfg, dir),
        Stage::Evaluate => stage_evaluate(cfg, dir),
    };
    res.map_err(|e| in_stage(stage, e))?;
    dir.record_timing(stage, t0.elapsed().as_secs_f64())?;
    Ok(())
}

/// Source, target, and holdout datasets for a config.
pub fn collect_data(cfg: &ExperimentConfig) -> Result<(TransitionDataset, TransitionDataset, TransitionDataset)> {
    let pair = cfg.domain_pair()?;
    let d = &cfg.data;
    let src_actor = Controller::behavior(&pair.source, d.source_tier)?;
    let tgt_actor = Controller::behavior(&pair.target, d.target_tier)?;
    let tag = |ds: TransitionDataset| {
        let mut meta = ds.meta().clone();
        meta.config_hash = cfg.hash();
        ds.with_meta(meta)
    };
    let src = domains::collect(
        &pair.source,
        &src_actor,
        d.source_size,
        stage_seed(cfg, "collect-source"),
        Origin::Source,
        d.source_tier.name(),
    )?;
    let tgt = domains::collect(
        &pair.target,
        &tgt_actor,
        d.target_size,
        stage_seed(cfg, "collect-target"),
        Origin::Target,
        d.target_tier.name(),
    )?;
    let hold = domains::collect(
        &pair.target,
        &tgt_actor,
        d.holdout_size,
        stage_seed(cfg, "collect-holdout"),
        Origin::Target,
        d.target_tier.name(),
    )?;
    Ok((tag(src), tag(tgt), tag(hold)))
}

fn stage_collect(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let (src, tgt, hold) = collect_data(cfg)?;
    src.write(dir.data("source"))?;
    tgt.write(dir.data("target"))?;
    hold.write(dir.data("holdout"))?;
    Ok(())
}

fn stage_select(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let src = dir.read_data("source", Stage::Select)?;
    let tgt = dir.read_data("target", Stage::Select)?;
    let sel = selection::select(&src, &tgt, cfg.tce.lambda_mix, cfg.selection.normalize)?;
    write_json(&dir.selection(), &sel)
}

fn uses_generation(cfg: &ExperimentConfig) -> bool {
    cfg.tce.variant.uses_generation()
}

fn stage_train_score(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    if !uses_generation(cfg) {
        let _ = fs::remove_file(dir.model("generator"));
        return dir.write_stage_metrics(Stage::TrainScore, &[]);
    }
    let src = dir.read_data("source", Stage::TrainScore)?;
    let tgt = dir.read_data("target", Stage::TrainScore)?;
    let seed = stage_seed(cfg, "train-score");
    let (models, report) = generator::train_models(&src, &tgt, &cfg.schedule()?, &cfg.gen_config(), seed)?;
    let mut ck = models.to_checkpoint(seed)?;
    ck.extra.insert("training".into(), serde_json::to_value(&report)?);
    ck.save(dir.model("generator"))?;
    dir.write_stage_metrics(Stage::TrainScore, &generator_metrics(&report, cfg.train.log_every))
}

fn generator_metrics(r: &TrainingReport, every: usize) -> Vec<Value> {
    let mut rows = Vec::new();
    for (name, losses) in [("q_mix", &r.mix_loss), ("q_tran", &r.tran_loss), ("inv", &r.inv_loss), ("rew", &r.rew_loss)] {
        for (i, l) in losses.iter().enumerate() {
            rows.push(json!({ "stage": "train-score", "model": name, "window": i, "step": (i + 1) * every, "loss": l }));
        }
    }
    rows
}

fn load_generator(dir: &RunDir) -> Result<(TceModels, Checkpoint)> {
    let path = dir.model("generator");
    ensure!(path.exists(), "missing {} (run train-score first)", path.display());
    let ck = Checkpoint::load(&path)?;
    Ok((TceModels::from_checkpoint(&ck)?, ck))
}

fn stage_generate(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    if !uses_generation(cfg) {
        let _ = fs::remove_file(dir.data("generated"));
        return dir.write_stage_metrics(Stage::Generate, &[]);
    }
    let src = dir.read_data("source", Stage::Generate)?;
    let (models, _) = load_generator(dir)?;
    let n = cfg.generate_count(src.len());
    let seed = stage_seed(cfg, "generate");
    let (gen, rep) = generator::synthesize(&models, &cfg.schedule()?, &cfg.sampler(), n, cfg.sampler.chunk, seed)?;
    let gen = gen
        .with_extra("lambda_cov", cfg.tce.lambda_cov.into())
        .with_extra("lambda_mix", cfg.tce.lambda_mix.into())
        .with_extra("sampler_steps", cfg.sampler.steps.into())
        .with_extra("synthesis", serde_json::to_value(&rep)?);
    let mut meta = gen.meta().clone();
    meta.domain = cfg.domain.pair.clone();
    meta.config_hash = cfg.hash();
    gen.with_meta(meta).write(dir.data("generated"))?;
    dir.write_stage_metrics(
        Stage::Generate,
        &[json!({ "stage": "generate", "synthesis": rep })],
    )
}

/// Assembles `D_train` from the run directory's artifacts.
fn training_set(cfg: &ExperimentConfig, dir: &RunDir) -> Result<TransitionDataset> {
    let src = dir.read_data("source", Stage::TrainPolicy)?;
    let tgt = dir.read_data("target", Stage::TrainPolicy)?;
    let gen = if uses_generation(cfg) {
        Some(dir.read_data("generated", Stage::TrainPolicy)?)
    } else {
        None
    };
    let sel: Option<SelectionResult> = if cfg.tce.variant == Variant::Sm {
        Some(read_json(&dir.selection())?)
    } else {
        None
    };
    let mut d = datasets::build_training_set(&cfg.variant_spec()?, &src, &tgt, gen.as_ref(), sel.as_ref())?;
    let mut meta = d.meta().clone();
    meta.domain = cfg.domain.pair.clone();
    meta.config_hash = cfg.hash();
    meta.seed = cfg.seed;
    d = d.with_meta(meta);
    Ok(d)
}

/// Mean return of `actor` in the target domain and its normalized score.
pub fn evaluate_policy(
    pair: &DomainPair,
    actor: &dyn domains::Actor,
    refs: &ReferenceReturns,
    episodes: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64, f64)> {
    let returns = domains::rollout_returns(&pair.target, actor, episodes, seed)?;
    let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
    if !mean.is_finite() {
        return Err(Error::numeric("policy evaluation return", None));
    }
    let ns = domains::normalized_score(mean, refs)?;
    Ok((returns, mean, ns))
}

fn stage_train_policy(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let train = training_set(cfg, dir)?;
    train.write(dir.data("train"))?;
    let pair = cfg.domain_pair()?;
    let refs = domains::reference_returns(&pair, stage_seed(cfg, "reference"))?;
    let eval_seed = stage_seed(cfg, "eval-during-training");
    let episodes = cfg.eval.episodes;
    let mut eval = |m: &PolicyModel| -> Result<f64> { Ok(evaluate_policy(&pair, m, &refs, episodes, eval_seed)?.2) };
    let seed = stage_seed(cfg, "train-policy");
    let (model, rows) = policy::train_iql(&train, pair.target.action_bound, &cfg.iql, seed, Some(&mut eval))?;
    model
        .to_checkpoint(seed, cfg.iql.steps as u64)
        .save(dir.model("policy"))?;
    let metrics: Vec<Value> = rows.iter().map(policy_metric).collect::<Result<_>>()?;
    dir.write_stage_metrics(Stage::TrainPolicy, &metrics)
}

fn policy_metric(r: &MetricRow) -> Result<Value> {
    let mut v = serde_json::to_value(r)?;
    v.as_object_mut()
        .expect("metric rows serialize to objects")
        .insert("stage".into(), "train-policy".into());
    Ok(v)
}

/// Action, reward, and transition errors of a generated dataset; action errors need the
/// inverse model of two-stage generation.
pub fn generation_errors(
    gen: &TransitionDataset,
    models: &TceModels,
    pair: &DomainPair,
    holdout: &TransitionDataset,
) -> Result<GenerationErrors> {
    let empty = TransitionDataset::empty(holdout.state_dim(), holdout.action_dim(), holdout.meta().clone());
    let hold = if models.inv.is_some() { holdout } else { &empty };
    let inv = |s: &crate::Matrix, sn: &crate::Matrix| models.infer_actions(s, sn);
    let ErrorReport {
        action,
        reward,
        transition,
    } = domains::error_report(gen, &pair.target, hold, &inv)?;
    Ok(GenerationErrors {
        action: models.inv.as_ref().map(|_| action),
        reward,
        transition,
    })
}

fn stage_evaluate(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let pair = cfg.domain_pair()?;
    let src = dir.read_data("source", Stage::Evaluate)?;
    let tgt = dir.read_data("target", Stage::Evaluate)?;
    let hold = dir.read_data("holdout", Stage::Evaluate)?;
    let train = dir.read_data("train", Stage::Evaluate)?;
    let path = dir.model("policy");
    ensure!(path.exists(), "missing {} (run train-policy first)", path.display());
    let model = PolicyModel::from_checkpoint(&Checkpoint::load(&path)?)?;
    let refs = domains::reference_returns(&pair, stage_seed(cfg, "reference"))?;
    let (returns, mean_return, ns) = evaluate_policy(&pair, &model, &refs, cfg.eval.episodes, stage_seed(cfg, "evaluate"))?;

    let (errors, synthesis, gen_summary, n_gen) = if uses_generation(cfg) {
        let gen = dir.read_data("generated", Stage::Evaluate)?;
        let (models, ck) = load_generator(dir)?;
        let errors = generation_errors(&gen, &models, &pair, &hold)?;
        let synthesis: Option<SynthesisReport> = gen
            .meta()
            .extra
            .get("synthesis")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()?;
        let training: TrainingReport = match ck.extra.get("training") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => TrainingReport::default(),
        };
        let summary = GeneratorSummary {
            mix_rows: training.mix_rows,
            final_mix_loss: training.mix_loss.last().copied(),
            final_tran_loss: training.tran_loss.last().copied(),
            inv_holdout_mse: training.inv_holdout_mse,
            rew_holdout_mse: training.rew_holdout_mse,
            checksums: models.checksums(),
        };
        (Some(errors), synthesis, Some(summary), gen.len())
    } else {
        (None, None, None, 0)
    };
    let selection = if dir.selection().exists() {
        read_json::<SelectionResult>(&dir.selection())?.summary()
    } else {
        Value::Null
    };
    let bounds = if cfg.theory.instances > 0 {
        Some(theory::verify_bounds(cfg.theory.instances, stage_seed(cfg, "bounds"))?)
    } else {
        None
    };
    let report = RunReport {
        version: REPORT_VERSION,
        config_hash: cfg.hash(),
        pair: cfg.domain.pair.clone(),
        variant: cfg.tce.variant,
        lambda_cov: cfg.tce.lambda_cov,
        lambda_mix: cfg.tce.lambda_mix,
        one_stage: cfg.tce.one_stage,
        sampler_steps: cfg.sampler.steps,
        seed: cfg.seed,
        sizes: DataSizes {
            source: src.len(),
            target: tgt.len(),
            generated: n_gen,
            train: train.len(),
        },
        reference: refs,
        returns,
        mean_return,
        normalized_score: ns,
        errors,
        synthesis,
        generator: gen_summary,
        selection,
        bounds,
    };
    write_json(&dir.report(), &report)
}

/// Sweepable configuration axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LambdaCov,
    LambdaMix,
    K,
    TargetSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda_cov" | "tce.lambda_cov" => Ok(SweepAxis::LambdaCov),
            "lambda_mix" | "tce.lambda_mix" => Ok(SweepAxis::LambdaMix),
            "K" | "k" | "sampler.K" => Ok(SweepAxis::K),
            "target_size" | "data.target_size" => Ok(SweepAxis::TargetSize),
            other => Err(Error::contract(format!(
                "unknown sweep axis '{other}' (lambda_cov, lambda_mix, K, target_size)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::LambdaCov => "lambda_cov",
            SweepAxis::LambdaMix => "lambda_mix",
            SweepAxis::K => "K",
            SweepAxis::TargetSize => "target_size",
        }
    }

    /// Applies one axis value. A λ of zero moves the variant to the one that
    /// λ value denotes: OG at `λ_cov = 0` is simple augmentation and SM at
    /// `λ_mix = 0` is OG.
    pub fn apply(&self, cfg: &mut ExperimentConfig, v: f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            ensure!(v >= 0.0 && v.fract() == 0.0, "{} must be a non-negative integer, got {v}", self.name());
            Ok(v as usize)
        };
        match self {
            SweepAxis::LambdaCov => cfg.tce.lambda_cov = v,
            SweepAxis::LambdaMix => cfg.tce.lambda_mix = v,
            SweepAxis::K => cfg.sampler.steps = count(v)?,
            SweepAxis::TargetSize => cfg.data.target_size = count(v)?,
        }
        if cfg.tce.variant == Variant::Sm && cfg.tce.lambda_mix == 0.0 {
            cfg.tce.variant = Variant::Og;
        }
        if cfg.tce.variant == Variant::Og && cfg.tce.lambda_cov == 0.0 {
            cfg.tce.variant = Variant::SimpleAug;
        }
        cfg.validate()
    }
}

/// Sorted, deduplicated axis values.
pub fn sweep_values(values: &[f64]) -> Result<Vec<f64>> {
    ensure!(values.iter().all(|v| v.is_finite()), "sweep values must be finite");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    pub variant: Variant,
    pub normalized_score: f64,
    pub mean_return: f64,
    pub action_error: Option<f64>,
    pub reward_error: Option<f64>,
    pub transition_error: Option<f64>,
    pub generated: usize,
}

impl SweepRow {
    fn from_report(axis: SweepAxis, value: f64, r: &RunReport) -> Self {
        Self {
            axis,
            value,
            seed: r.seed,
            variant: r.variant,
            normalized_score: r.normalized_score,
            mean_return: r.mean_return,
            action_error: r.errors.and_then(|e| e.action).map(|m| m.mean),
            reward_error: r.errors.map(|e| e.reward.mean),
            transition_error: r.errors.map(|e| e.transition.mean),
            generated: r.sizes.generated,
        }
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(
        "axis,value,seed,variant,normalized_score,mean_return,action_error,reward_error,transition_error,generated\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.axis.name(),
            r.value,
            r.seed,
            r.variant.name(),
            r.normalized_score,
            r.mean_return,
            opt(r.action_error),
            opt(r.reward_error),
            opt(r.transition_error),
            r.generated
        ));
    }
    out
}

/// One full run per (value, seed) cell under `out/<axis>=<value>/seed=<s>`,
/// plus `sweep.csv` and `sweep.json` tables in `out`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], seeds: &[u64], out: &Path) -> Result<Vec<SweepRow>> {
    let values = sweep_values(values)?;
    ensure!(!values.is_empty() && !seeds.is_empty(), "sweep needs at least one value and one seed");
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &v in &values {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            axis.apply(&mut c, v)?;
            let dir = RunDir::new(out.join(format!("{}={v}", axis.name())).join(format!("seed={seed}")));
            let report = run_pipeline(&c, &dir, Stage::Collect)?;
            rows.push(SweepRow::from_report(axis, v, &report));
        }
    }
    fs::write(out.join("sweep.csv"), sweep_csv(&rows))?;
    write_json(&out.join("sweep.json"), &rows)?;
    Ok(rows)
}
