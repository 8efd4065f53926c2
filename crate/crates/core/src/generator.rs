//! Dual score networks, auxiliary labelers, and two-stage synthesis.
//!
//! Stage 1 samples states `ŝ` from the mixture-state score `q_mix`, trained
//! on `D_src^{λ_cov} ∪ D_tar` states. Stage 2 samples `ŝ'` from the
//! target-transition score `q_tran(· | ŝ)`, trained on target rows only.
//! Actions and rewards are then labeled by `Inv(ŝ, ŝ')` and `R̂(ŝ, ŝ')`.
//!
//! All networks see states through one scaler fitted on the `q_mix`
//! training states; samples are mapped back to raw units before labeling.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetMeta, Origin, Scaler, Transition, TransitionDataset};
use crate::diffusion::{pc_sample_chains, DsmBatch, NoiseSchedule, SamplerConfig, ScoreFn};
use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::netcore::{Adam, Checkpoint, LossKind, Mlp, MlpSpec};
use crate::rng::{self, Rng};
use crate::selection::{self, SelectionResult};

/// Gradient-step budget for one network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Losses are logged as averages over windows of this many steps.
    pub log_every: usize,
}

impl TrainConfig {
    pub fn new(steps: usize, lr: f64) -> Self {
        Self {
            steps,
            batch_size: 128,
            lr,
            log_every: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        ensure!(self.log_every >= 1, "log_every must be >= 1");
        Ok(())
    }
}

/// Architecture widths shared by the four generator networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Widths {
    pub score_hidden: usize,
    pub score_embed: usize,
    pub score_blocks: usize,
    pub aux_hidden: usize,
    pub aux_blocks: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self {
            score_hidden: 256,
            score_embed: 128,
            score_blocks: 4,
            aux_hidden: 256,
            aux_blocks: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub lambda_cov: f64,
    pub lambda_mix: f64,
    /// Overrides `round((1 − λ_mix)·|D_src|)`.
    pub n_generate: Option<usize>,
    pub mix_train: TrainConfig,
    pub tran_train: TrainConfig,
    pub aux_train: TrainConfig,
    pub widths: Widths,
    /// Feed the action to the reward model as well as `(s, s')`.
    pub reward_uses_action: bool,
    /// Sample `(s, a)` jointly, then `s'` given `(s, a)`, with no inverse model.
    pub one_stage: bool,
    /// Normalize states before the nearest-neighbor selection.
    pub normalize_selection: bool,
    /// Chains advanced together per sampler call.
    pub chunk: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            lambda_cov: 0.2,
            lambda_mix: 0.0,
            n_generate: None,
            mix_train: TrainConfig::new(10_000, 1e-4),
            tran_train: TrainConfig::new(5_000, 1e-4),
            aux_train: TrainConfig::new(1_000, 1e-4),
            widths: Widths::default(),
            reward_uses_action: false,
            one_stage: false,
            normalize_selection: true,
            chunk: 256,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.lambda_cov) && (0.0..=1.0).contains(&self.lambda_mix),
            "lambda_cov and lambda_mix must lie in [0, 1]"
        );
        self.mix_train.validate()?;
        self.tran_train.validate()?;
        self.aux_train.validate()?;
        ensure!(self.chunk >= 1, "sampler chunk must be >= 1");
        Ok(())
    }

    /// `round((1 − λ_mix)·|D_src|)` unless overridden.
    pub fn generate_count(&self, n_src: usize) -> usize {
        self.n_generate
            .unwrap_or_else(|| ((1.0 - self.lambda_mix) * n_src as f64).round() as usize)
    }
}

/// A score network over `x_dim` normalized coordinates, optionally
/// conditioned on `cond_dim` more. Input rows are `[x | τ | cond]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub net: Mlp,
    pub x_dim: usize,
    pub cond_dim: usize,
    /// Rows per origin the model was trained on.
    pub provenance: BTreeMap<Origin, usize>,
}

impl ScoreModel {
    pub fn new(x_dim: usize, cond_dim: usize, widths: &Widths, rng: &mut Rng) -> Result<Self> {
        let spec = MlpSpec::score(x_dim, cond_dim, widths.score_hidden, widths.score_embed, widths.score_blocks);
        Ok(Self {
            net: Mlp::new(spec, rng)?,
            x_dim,
            cond_dim,
            provenance: BTreeMap::new(),
        })
    }

    fn inputs(&self, x: &Matrix, taus: &[f64], cond: Option<&Matrix>) -> Matrix {
        let t = Matrix::from_vec(taus.len(), 1, taus.to_vec());
        match cond {
            Some(c) => Matrix::hcat(&[x, &t, c]),
            None => Matrix::hcat(&[x, &t]),
        }
    }

    /// Denoising score-matching training; returns window-averaged losses.
    pub fn train(
        &mut self,
        x0: &Matrix,
        cond: Option<&Matrix>,
        schedule: &NoiseSchedule,
        cfg: &TrainConfig,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        let n = x0.rows();
        ensure!(n > 0, "score training set is empty");
        ensure!(x0.cols() == self.x_dim, "score training data has the wrong width");
        match cond {
            Some(c) => ensure!(
                c.rows() == n && c.cols() == self.cond_dim,
                "conditioning rows do not match the training data"
            ),
            None => ensure!(self.cond_dim == 0, "conditional score needs conditioning data"),
        }
        let mut adam = Adam::new(self.net.params().len(), cfg.lr);
        let mut log = Vec::new();
        let mut window = 0.0;
        for step in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
            let batch = DsmBatch::draw(schedule, &x0.select_rows(&idx), rng);
            let c = cond.map(|c| c.select_rows(&idx));
            let inputs = self.inputs(&batch.perturbed, &batch.taus, c.as_ref());
            let (loss, grad) = self.net.loss_and_grad(
                &inputs,
                LossKind::Dsm {
                    sigmas: &batch.sigmas,
                    noise: &batch.noise,
                },
            )?;
            adam.step(self.net.params_mut(), &grad)?;
            window += loss;
            if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
                let len = (step % cfg.log_every) + 1;
                log.push(window / len as f64);
                window = 0.0;
            }
        }
        Ok(log)
    }
}

impl ScoreFn for ScoreModel {
    fn dim(&self) -> usize {
        self.x_dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn score(&self, x: &Matrix, taus: &[f64], cond: Option<&Matrix>) -> Result<Matrix> {
        self.net.forward(&self.inputs(x, taus, cond))
    }
}

/// MSE regression; returns window-averaged losses.
pub fn train_regressor(net: &mut Mlp, inputs: &Matrix, targets: &Matrix, cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = inputs.rows();
    ensure!(n > 0, "regression training set is empty");
    ensure!(targets.rows() == n, "inputs and targets differ in length");
    let mut adam = Adam::new(net.params().len(), cfg.lr);
    let mut log = Vec::new();
    let mut window = 0.0;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        let t = targets.select_rows(&idx);
        let (loss, grad) = net.loss_and_grad(&inputs.select_rows(&idx), LossKind::Mse { targets: &t })?;
        adam.step(net.params_mut(), &grad)?;
        window += loss;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.push(window / ((step % cfg.log_every) + 1) as f64);
            window = 0.0;
        }
    }
    Ok(log)
}

/// Mean squared error of a regressor on a batch.
pub fn regression_mse(net: &Mlp, inputs: &Matrix, targets: &Matrix) -> Result<f64> {
    if inputs.rows() == 0 {
        return Ok(0.0);
    }
    let out = net.forward(inputs)?;
    let se: f64 = out
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(se / inputs.rows() as f64)
}

/// Trained generator models.
#[derive(Debug, Clone, PartialEq)]
pub struct TceModels {
    pub scaler: Scaler,
    pub q_mix: ScoreModel,
    pub q_tran: ScoreModel,
    /// Absent in one-stage mode.
    pub inv: Option<Mlp>,
    pub rew: Mlp,
    pub reward_uses_action: bool,
    pub one_stage: bool,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Losses and held-out errors from training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub mix_rows: usize,
    pub mix_loss: Vec<f64>,
    pub tran_loss: Vec<f64>,
    pub inv_loss: Vec<f64>,
    pub rew_loss: Vec<f64>,
    pub inv_holdout_mse: f64,
    pub rew_holdout_mse: f64,
}

fn normalized_states(scaler: &Scaler, d: &TransitionDataset) -> (Matrix, Matrix) {
    (scaler.normalize_matrix(&d.states()), scaler.normalize_matrix(&d.next_states()))
}

fn column(v: Vec<f64>) -> Matrix {
    let n = v.len();
    Matrix::from_vec(n, 1, v)
}

impl TceModels {
    fn reward_inputs(&self, s_n: &Matrix, sn_n: &Matrix, a: &Matrix) -> Matrix {
        if self.reward_uses_action {
            Matrix::hcat(&[s_n, sn_n, a])
        } else {
            Matrix::hcat(&[s_n, sn_n])
        }
    }

    /// Inverse-model actions for raw `(s, s')` batches.
    pub fn infer_actions(&self, s: &Matrix, s_next: &Matrix) -> Result<Matrix> {
        let inv = self
            .inv
            .as_ref()
            .ok_or_else(|| Error::contract("one-stage models have no inverse dynamics model"))?;
        let x = Matrix::hcat(&[&self.scaler.normalize_matrix(s), &self.scaler.normalize_matrix(s_next)]);
        inv.forward(&x)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(seed, 0);
        ck.push_net("q_mix", &self.q_mix.net);
        ck.push_net("q_tran", &self.q_tran.net);
        if let Some(inv) = &self.inv {
            ck.push_net("inv", inv);
        }
        ck.push_net("rew", &self.rew);
        ck.push_vec("scaler.mean", &self.scaler.mean);
        ck.push_vec("scaler.std", &self.scaler.std);
        ck.extra.insert("state_dim".into(), self.state_dim.into());
        ck.extra.insert("action_dim".into(), self.action_dim.into());
        ck.extra.insert("reward_uses_action".into(), self.reward_uses_action.into());
        ck.extra.insert("one_stage".into(), self.one_stage.into());
        ck.extra.insert(
            "q_mix.provenance".into(),
            serde_json::to_value(&self.q_mix.provenance)?,
        );
        ck.extra.insert(
            "q_tran.provenance".into(),
            serde_json::to_value(&self.q_tran.provenance)?,
        );
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get_usize = |k: &str| -> Result<usize> {
            ck.extra
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing '{k}'")))
        };
        let get_bool = |k: &str| ck.extra.get(k).and_then(|v| v.as_bool()).unwrap_or(false);
        let prov = |k: &str| -> Result<BTreeMap<Origin, usize>> {
            match ck.extra.get(k) {
                Some(v) => Ok(serde_json::from_value(v.clone())?),
                None => Ok(BTreeMap::new()),
            }
        };
        let (ds, da) = (get_usize("state_dim")?, get_usize("action_dim")?);
        let one_stage = get_bool("one_stage");
        let q_mix_net = ck.net("q_mix")?;
        let q_tran_net = ck.net("q_tran")?;
        let mix_dim = q_mix_net.spec().input_dim;
        let tran_cond = q_tran_net.spec().total_input_dim() - q_tran_net.spec().input_dim - 1;
        Ok(Self {
            scaler: Scaler {
                mean: ck.vec("scaler.mean")?.to_vec(),
                std: ck.vec("scaler.std")?.to_vec(),
            },
            q_mix: ScoreModel {
                net: q_mix_net,
                x_dim: mix_dim,
                cond_dim: 0,
                provenance: prov("q_mix.provenance")?,
            },
            q_tran: ScoreModel {
                net: q_tran_net,
                x_dim: ds,
                cond_dim: tran_cond,
                provenance: prov("q_tran.provenance")?,
            },
            inv: if one_stage { None } else { Some(ck.net("inv")?) },
            rew: ck.net("rew")?,
            reward_uses_action: get_bool("reward_uses_action"),
            one_stage,
            state_dim: ds,
            action_dim: da,
        })
    }

    /// CRC-32 of every network's parameters, for dataset provenance.
    pub fn checksums(&self) -> BTreeMap<String, u32> {
        let crc = |net: &Mlp| {
            let bytes: Vec<u8> = net.params().iter().flat_map(|v| v.to_le_bytes()).collect();
            crc32fast::hash(&bytes)
        };
        let mut out = BTreeMap::new();
        out.insert("q_mix".to_owned(), crc(&self.q_mix.net));
        out.insert("q_tran".to_owned(), crc(&self.q_tran.net));
        if let Some(inv) = &self.inv {
            out.insert("inv".to_owned(), crc(inv));
        }
        out.insert("rew".to_owned(), crc(&self.rew));
        out
    }
}

/// The `q_mix` training rows: the λ_cov-nearest source rows plus all target
/// rows. Returns the rows and the selection used.
pub fn mixture_rows(
    src: &TransitionDataset,
    tgt: &TransitionDataset,
    cfg: &GenConfig,
) -> Result<(TransitionDataset, SelectionResult)> {
    let sel = selection::select(src, tgt, cfg.lambda_cov, cfg.normalize_selection)?;
    let picked = src.subset(&sel.indices)?;
    let mix = TransitionDataset::concat(&[&picked, tgt], tgt.meta().clone())?;
    Ok((mix, sel))
}

/// Trains all generator networks. `q_tran` and `Inv` see target rows only;
/// `q_mix` and the reward model see `D_src^{λ_cov} ∪ D_tar`.
pub fn train_models(
    src: &TransitionDataset,
    tgt: &TransitionDataset,
    schedule: &NoiseSchedule,
    cfg: &GenConfig,
    seed: u64,
) -> Result<(TceModels, TrainingReport)> {
    cfg.validate()?;
    ensure!(!tgt.is_empty(), "target dataset is empty");
    ensure!(
        tgt.rows().iter().all(|t| t.origin == Origin::Target),
        "target dataset contains non-target rows"
    );
    let (ds, da) = (tgt.state_dim(), tgt.action_dim());
    let (mix, _) = mixture_rows(src, tgt, cfg)?;
    let scaler = Scaler::fit(ds, mix.rows().iter().map(|t| t.s.as_slice()));
    let mut report = TrainingReport {
        mix_rows: mix.len(),
        ..TrainingReport::default()
    };
    let w = &cfg.widths;
    let provenance = |d: &TransitionDataset| {
        let mut m = BTreeMap::new();
        for t in d.rows() {
            *m.entry(t.origin).or_insert(0) += 1;
        }
        m
    };

    // Stage-1 model.
    let mut init = rng::labeled(seed, "init");
    let (mix_s, _) = normalized_states(&scaler, &mix);
    let mix_x = if cfg.one_stage { Matrix::hcat(&[&mix_s, &mix.actions()]) } else { mix_s };
    let mut q_mix = ScoreModel::new(mix_x.cols(), 0, w, &mut init)?;
    q_mix.provenance = provenance(&mix);
    report.mix_loss = q_mix.train(&mix_x, None, schedule, &cfg.mix_train, &mut rng::labeled(seed, "q_mix"))?;

    // Stage-2 model on target rows only.
    let (tgt_s, tgt_sn) = normalized_states(&scaler, tgt);
    let tran_cond = if cfg.one_stage { Matrix::hcat(&[&tgt_s, &tgt.actions()]) } else { tgt_s.clone() };
    let mut q_tran = ScoreModel::new(ds, tran_cond.cols(), w, &mut init)?;
    q_tran.provenance = provenance(tgt);
    report.tran_loss = q_tran.train(
        &tgt_sn,
        Some(&tran_cond),
        schedule,
        &cfg.tran_train,
        &mut rng::labeled(seed, "q_tran"),
    )?;

    // Auxiliary models with a 90/10 held-out split.
    let (tgt_train, tgt_hold) = tgt.split(0.9)?;
    let inv = if cfg.one_stage {
        None
    } else {
        let (s, sn) = normalized_states(&scaler, &tgt_train);
        let mut inv = Mlp::new(MlpSpec::regressor(2 * ds, da, w.aux_hidden, w.aux_blocks), &mut init)?;
        report.inv_loss = train_regressor(
            &mut inv,
            &Matrix::hcat(&[&s, &sn]),
            &tgt_train.actions(),
            &cfg.aux_train,
            &mut rng::labeled(seed, "inv"),
        )?;
        let (hs, hsn) = normalized_states(&scaler, &tgt_hold);
        report.inv_holdout_mse = regression_mse(&inv, &Matrix::hcat(&[&hs, &hsn]), &tgt_hold.actions())?;
        Some(inv)
    };

    // Reward model on the mixture rows, holding out the same target rows.
    let hold_start = tgt_train.len();
    let rew_rows: Vec<usize> = (0..mix.len() - tgt.len())
        .chain((mix.len() - tgt.len())..(mix.len() - tgt.len() + hold_start))
        .collect();
    let rew_train = mix.subset(&rew_rows)?;
    let rew_in_dim = 2 * ds + if cfg.reward_uses_action { da } else { 0 };
    let mut rew = Mlp::new(MlpSpec::regressor(rew_in_dim, 1, w.aux_hidden, w.aux_blocks), &mut init)?;
    let mut models = TceModels {
        scaler,
        q_mix,
        q_tran,
        inv,
        rew: rew.clone(),
        reward_uses_action: cfg.reward_uses_action,
        one_stage: cfg.one_stage,
        state_dim: ds,
        action_dim: da,
    };
    let (s, sn) = normalized_states(&models.scaler, &rew_train);
    report.rew_loss = train_regressor(
        &mut rew,
        &models.reward_inputs(&s, &sn, &rew_train.actions()),
        &column(rew_train.rewards()),
        &cfg.aux_train,
        &mut rng::labeled(seed, "rew"),
    )?;
    let (hs, hsn) = normalized_states(&models.scaler, &tgt_hold);
    report.rew_holdout_mse = regression_mse(
        &rew,
        &models.reward_inputs(&hs, &hsn, &tgt_hold.actions()),
        &column(tgt_hold.rewards()),
    )?;
    models.rew = rew;
    Ok((models, report))
}

/// Runs chains in chunks, retrying each failed chain once under a fresh
/// seed. Returns the samples of surviving chains (in chain order) and the
/// indices of dropped chains.
fn sample_with_retry(
    score: &ScoreModel,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cond: Option<&Matrix>,
    n: usize,
    seed: u64,
    chunk: usize,
) -> Result<(Matrix, Vec<usize>)> {
    let mut out = Matrix::zeros(n, score.dim());
    let mut failed = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let ids: Vec<u64> = (start as u64..end as u64).collect();
        let c = cond.map(|c| c.select_rows(&(start..end).collect::<Vec<_>>()));
        let batch = pc_sample_chains(score, schedule, sampler, c.as_ref(), seed, &ids)?;
        for i in 0..end - start {
            out.row_mut(start + i).copy_from_slice(batch.samples.row(i));
        }
        failed.extend(batch.failed.iter().map(|&(i, _)| start + i));
        start = end;
    }
    let mut dropped = Vec::new();
    if !failed.is_empty() {
        let retry_seed = rng::labeled_seed(seed, "retry");
        let ids: Vec<u64> = failed.iter().map(|&i| i as u64).collect();
        let c = cond.map(|c| c.select_rows(&failed));
        let batch = pc_sample_chains(score, schedule, sampler, c.as_ref(), retry_seed, &ids)?;
        let again: Vec<usize> = batch.failed.iter().map(|&(i, _)| i).collect();
        for (j, &i) in failed.iter().enumerate() {
            if again.contains(&j) {
                dropped.push(i);
            } else {
                out.row_mut(i).copy_from_slice(batch.samples.row(j));
            }
        }
        log::warn!(
            "{} chains failed, {} recovered on retry, {} dropped",
            failed.len(),
            failed.len() - dropped.len(),
            dropped.len()
        );
    }
    Ok((out, dropped))
}

/// Maximum share of chains that may be dropped before synthesis fails.
pub const MAX_DROP_RATE: f64 = 0.01;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub requested: usize,
    pub produced: usize,
    pub dropped_stage1: usize,
    pub dropped_stage2: usize,
}

/// Two-stage synthesis of `n` generated transitions.
pub fn synthesize(
    models: &TceModels,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    n: usize,
    chunk: usize,
    seed: u64,
) -> Result<(TransitionDataset, SynthesisReport)> {
    ensure!(
        models.q_tran.provenance.keys().all(|o| *o == Origin::Target),
        "q_tran was trained on non-target rows: {:?}",
        models.q_tran.provenance
    );
    ensure!(chunk >= 1, "sampler chunk must be >= 1");
    let (ds, da) = (models.state_dim, models.action_dim);
    let mut report = SynthesisReport {
        requested: n,
        ..SynthesisReport::default()
    };
    let mut meta = DatasetMeta::new("generated", seed);
    meta.extra.insert(
        "model_checksums".into(),
        serde_json::to_value(models.checksums())?,
    );
    if n == 0 {
        return Ok((TransitionDataset::empty(ds, da, meta), report));
    }

    let stage1_seed = rng::labeled_seed(seed, "stage1");
    let (x1, drop1) = sample_with_retry(&models.q_mix, schedule, sampler, None, n, stage1_seed, chunk)?;
    let keep1: Vec<usize> = (0..n).filter(|i| !drop1.contains(i)).collect();
    let x1 = x1.select_rows(&keep1);
    let s_n = x1.columns(0, ds);
    let cond = if models.one_stage { x1.clone() } else { s_n.clone() };

    let stage2_seed = rng::labeled_seed(seed, "stage2");
    let (sn_n, drop2) = sample_with_retry(&models.q_tran, schedule, sampler, Some(&cond), keep1.len(), stage2_seed, chunk)?;
    let keep2: Vec<usize> = (0..keep1.len()).filter(|i| !drop2.contains(i)).collect();
    report.dropped_stage1 = drop1.len();
    report.dropped_stage2 = drop2.len();
    let dropped = drop1.len() + drop2.len();
    if dropped as f64 > MAX_DROP_RATE * n as f64 {
        return Err(Error::numeric(
            format!("synthesis dropped {dropped} of {n} chains"),
            None,
        ));
    }
    let s_n = s_n.select_rows(&keep2);
    let sn_n = sn_n.select_rows(&keep2);
    let s = models.scaler.denormalize_matrix(&s_n);
    let s_next = models.scaler.denormalize_matrix(&sn_n);
    let actions = if models.one_stage {
        x1.select_rows(&keep2).columns(ds, da)
    } else {
        models
            .inv
            .as_ref()
            .expect("two-stage models carry an inverse model")
            .forward(&Matrix::hcat(&[&s_n, &sn_n]))?
    };
    let rewards = models
        .rew
        .forward(&models.reward_inputs(&s_n, &sn_n, &actions))?;
    let rows: Vec<Transition> = (0..s.rows())
        .map(|i| Transition {
            s: s.row(i).to_vec(),
            a: actions.row(i).to_vec(),
            r: rewards.get(i, 0),
            s_next: s_next.row(i).to_vec(),
            done: false,
            origin: Origin::Generated,
        })
        .collect();
    report.produced = rows.len();
    let data = TransitionDataset::new(ds, da, rows, meta)?;
    Ok((data, report))
}
