//! Implicit Q-learning with a KL pull toward the target behavior policy.
//!
//! - `V` regresses the `τ_V`-expectile of `Q_target(s, a) − V(s)`.
//! - `Q` regresses `r + γ(1 − done) V(s')`; the target copy is Polyak
//!   averaged after every step.
//! - The actor minimizes `mean[w · (−log π(a|s))] + β · mean_{s∼D_tar} KL(π̂_b ‖ π)`
//!   with `w = min(exp(κ · Adv), clip)`.
//!
//! The actor is a diagonal Gaussian with a state-independent log-std. With
//! a bounded action space it is tanh-squashed: likelihoods are evaluated on
//! `u = atanh(a / bound)`, and since the squash is invertible the KL between
//! two squashed policies equals the KL between their pre-squash Gaussians.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::{Origin, Scaler, TransitionDataset};
use crate::domains::Actor;
use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::netcore::{Adam, Checkpoint, LossKind, Mlp, MlpSpec};
use crate::rng::{self, Rng};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
/// Keeps `atanh` finite for actions sitting on the bound.
const SQUASH_EDGE: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqlConfig {
    pub tau_v: f64,
    pub kappa: f64,
    pub beta: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub adv_weight_clip: f64,
    pub steps: usize,
    pub bc_steps: usize,
    pub batch_target: usize,
    pub batch_rest: usize,
    pub lr: f64,
    pub hidden: usize,
    pub blocks: usize,
    pub log_every: usize,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            tau_v: 0.7,
            kappa: 3.0,
            beta: 0.001,
            gamma: 0.99,
            polyak: 0.005,
            adv_weight_clip: 100.0,
            steps: 1_000_000,
            bc_steps: 10_000,
            batch_target: 128,
            batch_rest: 128,
            lr: 3e-4,
            hidden: 256,
            blocks: 1,
            log_every: 1000,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau_v > 0.0 && self.tau_v < 1.0, "tau_V must lie in (0, 1)");
        ensure!(self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)");
        ensure!(self.beta >= 0.0, "beta must be non-negative");
        ensure!((0.0..=1.0).contains(&self.polyak), "polyak must lie in [0, 1]");
        ensure!(self.adv_weight_clip > 0.0, "advantage weight clip must be positive");
        ensure!(self.batch_target >= 1, "target batch size must be >= 1");
        ensure!(self.lr > 0.0, "learning rate must be positive");
        ensure!(self.hidden >= 1 && self.log_every >= 1, "hidden width and log interval must be >= 1");
        Ok(())
    }
}

/// `|τ − 1[u < 0]| · u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

/// Closed-form `KL(N(μ_p, σ_p²) ‖ N(μ_q, σ_q²))` for diagonal Gaussians,
/// with log standard deviations as inputs.
pub fn diag_gaussian_kl(mu_p: &[f64], log_std_p: &[f64], mu_q: &[f64], log_std_q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for j in 0..mu_p.len() {
        let var_p = (2.0 * log_std_p[j]).exp();
        let var_q = (2.0 * log_std_q[j]).exp();
        let dm = mu_p[j] - mu_q[j];
        kl += log_std_q[j] - log_std_p[j] + (var_p + dm * dm) / (2.0 * var_q) - 0.5;
    }
    kl
}

/// Diagonal Gaussian policy with a state-independent log-std.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
    pub action_bound: Option<f64>,
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, blocks: usize, bound: Option<f64>, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            mean: Mlp::new(MlpSpec::regressor(state_dim, action_dim, hidden, blocks), rng)?,
            log_std: vec![0.0; action_dim],
            action_bound: bound,
        })
    }

    pub fn clamped_log_std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    /// Actions mapped into the space the Gaussian lives in.
    pub fn pre_squash(&self, a: &Matrix) -> Matrix {
        match self.action_bound {
            Some(b) => {
                let mut u = a.clone();
                u.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = (*v / b).clamp(-SQUASH_EDGE, SQUASH_EDGE).atanh());
                u
            }
            None => a.clone(),
        }
    }

    /// Deterministic action for normalized states.
    pub fn mode(&self, s_n: &Matrix) -> Result<Matrix> {
        let mut mu = self.mean.forward(s_n)?;
        if let Some(b) = self.action_bound {
            mu.as_mut_slice().iter_mut().for_each(|v| *v = b * v.tanh());
        }
        Ok(mu)
    }

    /// Per-row negative log-likelihood of pre-squash actions `u`, without the
    /// squash Jacobian (constant in the parameters).
    pub fn nll(&self, mu: &Matrix, u: &Matrix) -> Vec<f64> {
        let ls = self.clamped_log_std();
        (0..mu.rows())
            .map(|i| {
                (0..mu.cols())
                    .map(|j| {
                        let z = (u.get(i, j) - mu.get(i, j)) * (-ls[j]).exp();
                        0.5 * z * z + ls[j] + HALF_LN_2PI
                    })
                    .sum()
            })
            .collect()
    }

    fn log_std_passes(&self) -> Vec<f64> {
        self.log_std
            .iter()
            .map(|v| if (LOG_STD_MIN..=LOG_STD_MAX).contains(v) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// The full IQL model set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub scaler: Scaler,
    pub actor: GaussianPolicy,
    pub q: Mlp,
    pub q_target: Mlp,
    pub v: Mlp,
    pub behavior: GaussianPolicy,
}

impl PolicyModel {
    pub fn new(
        scaler: Scaler,
        action_dim: usize,
        bound: Option<f64>,
        cfg: &IqlConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let ds = scaler.dim();
        let actor = GaussianPolicy::new(ds, action_dim, cfg.hidden, cfg.blocks, bound, rng)?;
        let behavior = GaussianPolicy::new(ds, action_dim, cfg.hidden, cfg.blocks, bound, rng)?;
        let q = Mlp::new(MlpSpec::regressor(ds + action_dim, 1, cfg.hidden, cfg.blocks), rng)?;
        let v = Mlp::new(MlpSpec::regressor(ds, 1, cfg.hidden, cfg.blocks), rng)?;
        Ok(Self {
            scaler,
            actor,
            q_target: q.clone(),
            q,
            v,
            behavior,
        })
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(seed, step);
        ck.push_net("actor.mean", &self.actor.mean);
        ck.push_vec("actor.log_std", &self.actor.log_std);
        ck.push_net("q", &self.q);
        ck.push_net("q_target", &self.q_target);
        ck.push_net("v", &self.v);
        ck.push_net("behavior.mean", &self.behavior.mean);
        ck.push_vec("behavior.log_std", &self.behavior.log_std);
        ck.push_vec("scaler.mean", &self.scaler.mean);
        ck.push_vec("scaler.std", &self.scaler.std);
        if let Some(b) = self.actor.action_bound {
            ck.push_vec("action_bound", &[b]);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bound = ck.vec("action_bound").ok().map(|v| v[0]);
        Ok(Self {
            scaler: Scaler {
                mean: ck.vec("scaler.mean")?.to_vec(),
                std: ck.vec("scaler.std")?.to_vec(),
            },
            actor: GaussianPolicy {
                mean: ck.net("actor.mean")?,
                log_std: ck.vec("actor.log_std")?.to_vec(),
                action_bound: bound,
            },
            q: ck.net("q")?,
            q_target: ck.net("q_target")?,
            v: ck.net("v")?,
            behavior: GaussianPolicy {
                mean: ck.net("behavior.mean")?,
                log_std: ck.vec("behavior.log_std")?.to_vec(),
                action_bound: bound,
            },
        })
    }
}

impl Actor for PolicyModel {
    fn act(&self, s: &[f64], _t: usize, _rng: &mut Rng) -> Result<Vec<f64>> {
        let s_n = Matrix::from_vec(1, s.len(), self.scaler.normalize(s));
        Ok(self.actor.mode(&s_n)?.into_vec())
    }
}

/// A minibatch in normalized state coordinates.
#[derive(Debug, Clone)]
pub struct Batch {
    pub s: Matrix,
    pub a: Matrix,
    pub r: Vec<f64>,
    pub s_next: Matrix,
    pub done: Vec<bool>,
    /// Rows `0..n_target` come from `D_tar`.
    pub n_target: usize,
}

impl Batch {
    pub fn gather(data: &TransitionDataset, scaler: &Scaler, idx: &[usize], n_target: usize) -> Self {
        let rows = data.rows();
        let pick = |f: &dyn Fn(usize) -> Vec<f64>, w: usize| {
            let mut m = Matrix::zeros(idx.len(), w);
            for (o, &i) in idx.iter().enumerate() {
                m.row_mut(o).copy_from_slice(&f(i));
            }
            m
        };
        let (ds, da) = (data.state_dim(), data.action_dim());
        Self {
            s: pick(&|i| scaler.normalize(&rows[i].s), ds),
            a: pick(&|i| rows[i].a.clone(), da),
            r: idx.iter().map(|&i| rows[i].r).collect(),
            s_next: pick(&|i| scaler.normalize(&rows[i].s_next), ds),
            done: idx.iter().map(|&i| rows[i].done).collect(),
            n_target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub v: f64,
    pub q: f64,
    pub policy: f64,
}

/// Expectile value update against the target critic.
pub fn value_step(model: &mut PolicyModel, adam: &mut Adam, batch: &Batch, cfg: &IqlConfig) -> Result<f64> {
    let n = batch.s.rows();
    let q_t = model.q_target.forward(&Matrix::hcat(&[&batch.s, &batch.a]))?;
    let (v, tape) = model.v.forward_with_tape(&batch.s)?;
    let mut d_out = Matrix::zeros(n, 1);
    let mut loss = 0.0;
    for i in 0..n {
        let u = q_t.get(i, 0) - v.get(i, 0);
        let w = if u < 0.0 { 1.0 - cfg.tau_v } else { cfg.tau_v };
        loss += w * u * u;
        d_out.set(i, 0, -2.0 * w * u / n as f64);
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("value loss", None));
    }
    let grad = model.v.backward(&tape, &d_out);
    adam.step(model.v.params_mut(), &grad)?;
    Ok(loss)
}

/// TD update of `Q` toward `r + γ(1 − done) V(s')`, then Polyak averaging.
pub fn q_step(model: &mut PolicyModel, adam: &mut Adam, batch: &Batch, cfg: &IqlConfig) -> Result<f64> {
    let n = batch.s.rows();
    let v_next = model.v.forward(&batch.s_next)?;
    let mut targets = Matrix::zeros(n, 1);
    for i in 0..n {
        let boot = if batch.done[i] { 0.0 } else { cfg.gamma * v_next.get(i, 0) };
        let y = batch.r[i] + boot;
        if !y.is_finite() {
            return Err(Error::Numeric {
                context: format!(
                    "TD target (r = {}, V(s') = {}, done = {})",
                    batch.r[i],
                    v_next.get(i, 0),
                    batch.done[i]
                ),
                index: Some(i),
            });
        }
        targets.set(i, 0, y);
    }
    let inputs = Matrix::hcat(&[&batch.s, &batch.a]);
    let (loss, grad) = model.q.loss_and_grad(&inputs, LossKind::Mse { targets: &targets })?;
    adam.step(model.q.params_mut(), &grad)?;
    let q = model.q.clone();
    model.q_target.polyak_from(&q, cfg.polyak);
    Ok(loss)
}

/// Advantage weights `min(exp(κ · (Q_target − V)), clip)`.
pub fn advantage_weights(model: &PolicyModel, batch: &Batch, cfg: &IqlConfig) -> Result<Vec<f64>> {
    let q_t = model.q_target.forward(&Matrix::hcat(&[&batch.s, &batch.a]))?;
    let v = model.v.forward(&batch.s)?;
    Ok((0..batch.s.rows())
        .map(|i| (cfg.kappa * (q_t.get(i, 0) - v.get(i, 0))).exp().min(cfg.adv_weight_clip))
        .collect())
}

/// Actor loss and gradients (mean-network params, log-std).
///
/// With `beta == 0` the KL term is not evaluated at all, so the result is
/// exactly the advantage-weighted regression loss.
pub fn policy_loss_and_grad(
    actor: &GaussianPolicy,
    behavior: &GaussianPolicy,
    batch: &Batch,
    weights: &[f64],
    beta: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = batch.s.rows();
    let da = actor.log_std.len();
    let (mu, tape) = actor.mean.forward_with_tape(&batch.s)?;
    let u = actor.pre_squash(&batch.a);
    let ls = actor.clamped_log_std();
    let pass = actor.log_std_passes();
    let nll = actor.nll(&mu, &u);

    let mut loss = 0.0;
    let mut d_mu = Matrix::zeros(n, da);
    let mut d_ls = vec![0.0; da];
    for i in 0..n {
        let w = weights[i] / n as f64;
        loss += w * nll[i];
        for j in 0..da {
            let inv_var = (-2.0 * ls[j]).exp();
            let diff = u.get(i, j) - mu.get(i, j);
            d_mu.set(i, j, -w * diff * inv_var);
            d_ls[j] += w * (1.0 - diff * diff * inv_var);
        }
    }

    if beta != 0.0 {
        let nt = batch.n_target;
        ensure!(nt > 0, "KL term needs target rows in the batch");
        let s_t = batch.s.select_rows(&(0..nt).collect::<Vec<_>>());
        let mu_b = behavior.mean.forward(&s_t)?;
        let ls_b = behavior.clamped_log_std();
        let mut kl = 0.0;
        for i in 0..nt {
            kl += diag_gaussian_kl(mu_b.row(i), &ls_b, mu.row(i), &ls);
            for j in 0..da {
                let inv_var = (-2.0 * ls[j]).exp();
                let dm = mu.get(i, j) - mu_b.get(i, j);
                let var_b = (2.0 * ls_b[j]).exp();
                let k = beta / nt as f64;
                d_mu.set(i, j, d_mu.get(i, j) + k * dm * inv_var);
                d_ls[j] += k * (1.0 - (var_b + dm * dm) * inv_var);
            }
        }
        loss += beta * kl / nt as f64;
    }
    if !loss.is_finite() {
        return Err(Error::numeric("policy loss", None));
    }
    let grad = actor.mean.backward(&tape, &d_mu);
    for (g, p) in d_ls.iter_mut().zip(&pass) {
        *g *= p;
    }
    Ok((loss, grad, d_ls))
}

struct ActorOpt {
    mean: Adam,
    log_std: Adam,
}

impl ActorOpt {
    fn new(p: &GaussianPolicy, lr: f64) -> Self {
        Self {
            mean: Adam::new(p.mean.params().len(), lr),
            log_std: Adam::new(p.log_std.len(), lr),
        }
    }

    fn step(&mut self, p: &mut GaussianPolicy, g_mean: &[f64], g_ls: &[f64]) -> Result<()> {
        self.mean.step(p.mean.params_mut(), g_mean)?;
        self.log_std.step(&mut p.log_std, g_ls)
    }
}

/// Maximum-likelihood Gaussian fit to the target rows; returns the
/// window-averaged NLL log.
pub fn behavior_clone(
    policy: &mut GaussianPolicy,
    tgt: &TransitionDataset,
    scaler: &Scaler,
    steps: usize,
    batch_size: usize,
    lr: f64,
    log_every: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    ensure!(!tgt.is_empty(), "behavior cloning needs target rows");
    let mut opt = ActorOpt::new(policy, lr);
    let mut log = Vec::new();
    let mut window = 0.0;
    let frozen = policy.clone();
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..tgt.len())).collect();
        let batch = Batch::gather(tgt, scaler, &idx, idx.len());
        let w = vec![1.0; idx.len()];
        let (loss, g_mean, g_ls) = policy_loss_and_grad(policy, &frozen, &batch, &w, 0.0)?;
        opt.step(policy, &g_mean, &g_ls)?;
        window += loss;
        if (step + 1) % log_every.max(1) == 0 || step + 1 == steps {
            log.push(window / ((step % log_every.max(1)) + 1) as f64);
            window = 0.0;
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub v_loss: f64,
    pub q_loss: f64,
    pub policy_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized_score: Option<f64>,
}

/// Splits `D_train` into target-row indices and the rest.
fn partition(data: &TransitionDataset) -> (Vec<usize>, Vec<usize>) {
    let mut tgt = Vec::new();
    let mut rest = Vec::new();
    for (i, t) in data.rows().iter().enumerate() {
        if t.origin == Origin::Target {
            tgt.push(i);
        } else {
            rest.push(i);
        }
    }
    (tgt, rest)
}

/// Full IQL training on `D_train`. Each step draws `batch_target` target
/// rows and `batch_rest` rows from the remainder of `D_train` (from the
/// target rows again when there is no remainder). `evaluate` is called at
/// every log point and its score recorded.
pub fn train_iql(
    data: &TransitionDataset,
    action_bound: Option<f64>,
    cfg: &IqlConfig,
    seed: u64,
    mut evaluate: Option<&mut dyn FnMut(&PolicyModel) -> Result<f64>>,
) -> Result<(PolicyModel, Vec<MetricRow>)> {
    cfg.validate()?;
    let (tgt_idx, rest_idx) = partition(data);
    ensure!(!tgt_idx.is_empty(), "training set has no target rows");
    let scaler = data.scaler().clone();
    let mut init = rng::labeled(seed, "iql-init");
    let mut model = PolicyModel::new(scaler.clone(), data.action_dim(), action_bound, cfg, &mut init)?;

    let tgt_only = data.subset(&tgt_idx)?;
    behavior_clone(
        &mut model.behavior,
        &tgt_only,
        &scaler,
        cfg.bc_steps,
        cfg.batch_target,
        cfg.lr,
        cfg.log_every,
        &mut rng::labeled(seed, "bc"),
    )?;

    let mut rng = rng::labeled(seed, "iql");
    let mut v_opt = Adam::new(model.v.params().len(), cfg.lr);
    let mut q_opt = Adam::new(model.q.params().len(), cfg.lr);
    let mut a_opt = ActorOpt::new(&model.actor, cfg.lr);
    let rest_pool = if rest_idx.is_empty() { &tgt_idx } else { &rest_idx };
    let mut metrics = Vec::new();
    let (mut sv, mut sq, mut sp, mut count) = (0.0, 0.0, 0.0, 0usize);
    for step in 0..cfg.steps {
        let mut idx: Vec<usize> = (0..cfg.batch_target)
            .map(|_| tgt_idx[rng.random_range(0..tgt_idx.len())])
            .collect();
        idx.extend((0..cfg.batch_rest).map(|_| rest_pool[rng.random_range(0..rest_pool.len())]));
        let batch = Batch::gather(data, &scaler, &idx, cfg.batch_target);
        let losses = iql_step(&mut model, &mut v_opt, &mut q_opt, &mut a_opt, &batch, cfg)?;
        sv += losses.v;
        sq += losses.q;
        sp += losses.policy;
        count += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let ns = match evaluate.as_mut() {
                Some(f) => Some(f(&model)?),
                None => None,
            };
            metrics.push(MetricRow {
                step: step + 1,
                v_loss: sv / count as f64,
                q_loss: sq / count as f64,
                policy_loss: sp / count as f64,
                normalized_score: ns,
            });
            (sv, sq, sp, count) = (0.0, 0.0, 0.0, 0);
        }
    }
    Ok((model, metrics))
}

fn iql_step(
    model: &mut PolicyModel,
    v_opt: &mut Adam,
    q_opt: &mut Adam,
    a_opt: &mut ActorOpt,
    batch: &Batch,
    cfg: &IqlConfig,
) -> Result<StepLosses> {
    let v = value_step(model, v_opt, batch, cfg)?;
    let w = advantage_weights(model, batch, cfg)?;
    let (policy, g_mean, g_ls) = policy_loss_and_grad(&model.actor, &model.behavior, batch, &w, cfg.beta)?;
    a_opt.step(&mut model.actor, &g_mean, &g_ls)?;
    let q = q_step(model, q_opt, batch, cfg)?;
    Ok(StepLosses { v, q, policy })
}
