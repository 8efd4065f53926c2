//! Linear-Gaussian source/target domain pairs with known dynamics.
//!
//! `s' = A s + B a + c + diag(noise_std) ε` with actions clipped to the
//! action bound. The reward is a clipped affine rescaling of a quadratic
//! cost, `r = r_max · max(0, 1 − cost / cost_scale)` with
//! `cost = (s − g)ᵀ Q (s − g) + aᵀ R a`, so it is exactly `r_max` at the goal
//! with zero action and lies in `[0, r_max]` everywhere.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetMeta, Origin, Transition, TransitionDataset};
use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianDomain {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Row-major `d_s × d_s`.
    pub a: Vec<f64>,
    /// Row-major `d_s × d_a`.
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// Square roots of the diagonal noise covariance.
    pub noise_std: Vec<f64>,
    /// Row-major `d_s × d_s` state cost.
    pub q_cost: Vec<f64>,
    /// Row-major `d_a × d_a` action cost.
    pub r_cost: Vec<f64>,
    pub goal: Vec<f64>,
    pub cost_scale: f64,
    pub r_max: f64,
    pub horizon: usize,
    pub action_bound: Option<f64>,
    pub init_mean: Vec<f64>,
    pub init_std: Vec<f64>,
}

impl LinearGaussianDomain {
    /// The double-integrator point mass all shipped pairs are built from:
    /// state `(x, y, vx, vy)`, action `(fx, fy)`.
    pub fn point_mass(name: &str) -> Self {
        #[rustfmt::skip]
        let a = vec![
            0.95, 0.0,  0.1, 0.0,
            0.0,  0.95, 0.0, 0.1,
            0.0,  0.0,  0.9, 0.0,
            0.0,  0.0,  0.0, 0.9,
        ];
        #[rustfmt::skip]
        let b = vec![
            0.05, 0.0,
            0.0,  0.05,
            0.5,  0.0,
            0.0,  0.5,
        ];
        #[rustfmt::skip]
        let q_cost = vec![
            1.0, 0.0, 0.0, 0.0,
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 0.1, 0.0,
            0.0, 0.0, 0.0, 0.1,
        ];
        Self {
            name: name.to_owned(),
            state_dim: 4,
            action_dim: 2,
            a,
            b,
            c: vec![0.0; 4],
            noise_std: vec![0.05; 4],
            q_cost,
            r_cost: vec![0.01, 0.0, 0.0, 0.01],
            goal: vec![1.0, 1.0, 0.0, 0.0],
            cost_scale: 4.0,
            r_max: 1.0,
            horizon: 50,
            action_bound: Some(1.0),
            init_mean: vec![0.0; 4],
            init_std: vec![0.1; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ds, da) = (self.state_dim, self.action_dim);
        ensure!(ds > 0 && da > 0, "domain '{}' needs positive dimensions", self.name);
        ensure!(self.a.len() == ds * ds, "A must be d_s × d_s");
        ensure!(self.b.len() == ds * da, "B must be d_s × d_a");
        ensure!(self.q_cost.len() == ds * ds, "Q must be d_s × d_s");
        ensure!(self.r_cost.len() == da * da, "R must be d_a × d_a");
        for (what, v) in [
            ("c", &self.c),
            ("noise_std", &self.noise_std),
            ("goal", &self.goal),
            ("init_mean", &self.init_mean),
            ("init_std", &self.init_std),
        ] {
            ensure!(v.len() == ds, "{what} must have d_s entries");
        }
        ensure!(
            self.noise_std.iter().all(|v| *v >= 0.0),
            "noise standard deviations must be non-negative"
        );
        ensure!(self.horizon >= 1, "horizon must be at least 1");
        ensure!(self.cost_scale > 0.0 && self.r_max > 0.0, "cost_scale and r_max must be positive");
        if let Some(bound) = self.action_bound {
            ensure!(bound > 0.0, "action bound must be positive");
        }
        Ok(())
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.state_dim, self.state_dim, &self.a)
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.state_dim, self.action_dim, &self.b)
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a_matrix()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        match self.action_bound {
            Some(bound) => a.iter().map(|v| v.clamp(-bound, bound)).collect(),
            None => a.to_vec(),
        }
    }

    /// Exact conditional mean `E[s' | s, a] = A s + B clip(a) + c`.
    pub fn mean_next(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let (ds, da) = (self.state_dim, self.action_dim);
        let a = self.clip_action(a);
        (0..ds)
            .map(|i| {
                let ax: f64 = (0..ds).map(|j| self.a[i * ds + j] * s[j]).sum();
                let bu: f64 = (0..da).map(|j| self.b[i * da + j] * a[j]).sum();
                ax + bu + self.c[i]
            })
            .collect()
    }

    pub fn cost(&self, s: &[f64], a: &[f64]) -> f64 {
        let (ds, da) = (self.state_dim, self.action_dim);
        let a = self.clip_action(a);
        let e: Vec<f64> = s.iter().zip(&self.goal).map(|(x, g)| x - g).collect();
        let mut c = 0.0;
        for i in 0..ds {
            for j in 0..ds {
                c += e[i] * self.q_cost[i * ds + j] * e[j];
            }
        }
        for i in 0..da {
            for j in 0..da {
                c += a[i] * self.r_cost[i * da + j] * a[j];
            }
        }
        c
    }

    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        self.r_max * (1.0 - self.cost(s, a) / self.cost_scale).max(0.0)
    }

    /// One transition given the noise draw `eps`; `done` is set on the last
    /// step of an episode.
    pub fn step_with_noise(&self, s: &[f64], a: &[f64], t: usize, eps: &[f64]) -> (Vec<f64>, f64, bool) {
        let mut next = self.mean_next(s, a);
        for ((x, sd), e) in next.iter_mut().zip(&self.noise_std).zip(eps) {
            *x += sd * e;
        }
        (next, self.reward(s, a), t + 1 >= self.horizon)
    }

    pub fn step(&self, s: &[f64], a: &[f64], t: usize, rng: &mut Rng) -> (Vec<f64>, f64, bool) {
        let mut eps = vec![0.0; self.state_dim];
        rng::fill_normal(rng, &mut eps);
        self.step_with_noise(s, a, t, &eps)
    }

    pub fn initial_state(&self, rng: &mut Rng) -> Vec<f64> {
        self.init_mean
            .iter()
            .zip(&self.init_std)
            .map(|(m, sd)| m + sd * rng::normal(rng))
            .collect()
    }

    /// Affine dynamics of `z = [s − g; 1]`: `z' = A_z z + B_z a`.
    fn augmented(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let ds = self.state_dim;
        let a = self.a_matrix();
        let g = DVector::from_column_slice(&self.goal);
        let e = &a * &g + DVector::from_column_slice(&self.c) - &g;
        let mut az = DMatrix::zeros(ds + 1, ds + 1);
        az.view_mut((0, 0), (ds, ds)).copy_from(&a);
        az.view_mut((0, ds), (ds, 1)).copy_from(&e);
        az[(ds, ds)] = 1.0;
        let mut bz = DMatrix::zeros(ds + 1, self.action_dim);
        bz.view_mut((0, 0), (ds, self.action_dim)).copy_from(&self.b_matrix());
        let mut qz = DMatrix::zeros(ds + 1, ds + 1);
        qz.view_mut((0, 0), (ds, ds))
            .copy_from(&DMatrix::from_row_slice(ds, ds, &self.q_cost));
        (az, bz, qz)
    }

    fn riccati_step(
        &self,
        p: &DMatrix<f64>,
        az: &DMatrix<f64>,
        bz: &DMatrix<f64>,
        qz: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let r = DMatrix::from_row_slice(self.action_dim, self.action_dim, &self.r_cost);
        let lhs = r + bz.transpose() * p * bz;
        let rhs = bz.transpose() * p * az;
        // A zero action cost with no cost-to-go leaves every action optimal;
        // the minimum-norm solution then picks a = 0.
        let k = match lhs.clone().lu().solve(&rhs) {
            Some(k) => k,
            None => lhs
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|_| Error::numeric("riccati gain", None))?,
        };
        let p_next = qz + az.transpose() * p * (az - bz * &k);
        Ok((k, p_next))
    }

    /// Stationary LQR gain on `[s − g; 1]`, `a = −K z`, from iterating the
    /// Riccati recursion until the gain stops moving. The constant coordinate
    /// of `P` grows without bound, but the gain only reads the rows coupled to
    /// the state.
    pub fn lqr_gain(&self) -> Result<DMatrix<f64>> {
        let (az, bz, qz) = self.augmented();
        let mut p = qz.clone();
        let mut k_prev: Option<DMatrix<f64>> = None;
        for _ in 0..20_000 {
            let (k, p_next) = self.riccati_step(&p, &az, &bz, &qz)?;
            if let Some(prev) = &k_prev {
                if (&k - prev).amax() < 1e-12 {
                    return Ok(k);
                }
            }
            k_prev = Some(k);
            p = p_next;
        }
        k_prev.ok_or_else(|| Error::numeric("riccati gain did not converge", None))
    }

    /// Finite-horizon gains `K_0 … K_{H−1}` with no terminal cost.
    pub fn finite_horizon_gains(&self) -> Result<Vec<DMatrix<f64>>> {
        let (az, bz, qz) = self.augmented();
        let mut p = DMatrix::zeros(self.state_dim + 1, self.state_dim + 1);
        let mut gains = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            let (k, p_prev) = self.riccati_step(&p, &az, &bz, &qz)?;
            gains.push(k);
            p = p_prev;
        }
        gains.reverse();
        Ok(gains)
    }
}

/// Anything that maps a state to an action.
pub trait Actor {
    fn act(&self, s: &[f64], t: usize, rng: &mut Rng) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Random,
    Medium,
    Expert,
}

impl Tier {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Tier::Random),
            "medium" => Ok(Tier::Medium),
            "expert" => Ok(Tier::Expert),
            other => Err(Error::contract(format!("unknown policy tier '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Tier::Random => "random",
            Tier::Medium => "medium",
            Tier::Expert => "expert",
        }
    }

    pub fn action_noise(&self) -> f64 {
        match self {
            Tier::Random => 0.0,
            Tier::Medium => 0.5,
            Tier::Expert => 0.05,
        }
    }
}

/// Behavior and reference controllers.
#[derive(Debug, Clone)]
pub enum Controller {
    /// `a = −K [s − g; 1] + noise_std · ξ`.
    Feedback {
        gain: DMatrix<f64>,
        goal: Vec<f64>,
        noise_std: f64,
    },
    /// Time-varying noiseless feedback.
    Scheduled { gains: Vec<DMatrix<f64>>, goal: Vec<f64> },
    /// Uniform on `[−bound, bound]^{d_a}`.
    Uniform { bound: f64, action_dim: usize },
}

fn feedback(gain: &DMatrix<f64>, goal: &[f64], s: &[f64]) -> Vec<f64> {
    let n = goal.len();
    let z = DVector::from_fn(n + 1, |i, _| if i < n { s[i] - goal[i] } else { 1.0 });
    (-(gain * z)).iter().copied().collect()
}

impl Controller {
    pub fn behavior(domain: &LinearGaussianDomain, tier: Tier) -> Result<Self> {
        match tier {
            Tier::Random => Ok(Self::uniform(domain)),
            _ => Ok(Controller::Feedback {
                gain: domain.lqr_gain()?,
                goal: domain.goal.clone(),
                noise_std: tier.action_noise(),
            }),
        }
    }

    pub fn expert(domain: &LinearGaussianDomain) -> Result<Self> {
        Ok(Controller::Scheduled {
            gains: domain.finite_horizon_gains()?,
            goal: domain.goal.clone(),
        })
    }

    pub fn uniform(domain: &LinearGaussianDomain) -> Self {
        Controller::Uniform {
            bound: domain.action_bound.unwrap_or(1.0),
            action_dim: domain.action_dim,
        }
    }
}

impl Actor for Controller {
    fn act(&self, s: &[f64], t: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(match self {
            Controller::Feedback { gain, goal, noise_std } => {
                let mut a = feedback(gain, goal, s);
                if *noise_std > 0.0 {
                    a.iter_mut().for_each(|v| *v += noise_std * rng::normal(rng));
                }
                a
            }
            Controller::Scheduled { gains, goal } => feedback(&gains[t.min(gains.len() - 1)], goal, s),
            Controller::Uniform { bound, action_dim } => {
                (0..*action_dim).map(|_| rng.random_range(-*bound..=*bound)).collect()
            }
        })
    }
}

/// Episodic rollouts until `n` transitions are collected; episode `e` uses
/// its own stream of `seed`.
pub fn collect(
    domain: &LinearGaussianDomain,
    actor: &dyn Actor,
    n: usize,
    seed: u64,
    origin: Origin,
    tier: &str,
) -> Result<TransitionDataset> {
    domain.validate()?;
    let mut rows = Vec::with_capacity(n);
    let mut episode = 0u64;
    while rows.len() < n {
        let mut rng = rng::stream(seed, episode);
        let mut s = domain.initial_state(&mut rng);
        for t in 0..domain.horizon {
            if rows.len() == n {
                break;
            }
            let a = domain.clip_action(&actor.act(&s, t, &mut rng)?);
            let (next, r, done) = domain.step(&s, &a, t, &mut rng);
            rows.push(Transition {
                s: std::mem::replace(&mut s, next.clone()),
                a,
                r,
                s_next: next,
                done,
                origin,
            });
        }
        episode += 1;
    }
    let mut meta = DatasetMeta::new(&domain.name, seed);
    meta.extra.insert("tier".into(), tier.into());
    TransitionDataset::new(domain.state_dim, domain.action_dim, rows, meta)
}

/// Undiscounted episode returns.
pub fn rollout_returns(domain: &LinearGaussianDomain, actor: &dyn Actor, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    (0..episodes as u64)
        .map(|e| {
            let mut rng = rng::stream(seed, e);
            let mut s = domain.initial_state(&mut rng);
            let mut total = 0.0;
            for t in 0..domain.horizon {
                let a = actor.act(&s, t, &mut rng)?;
                if !a.iter().all(|v| v.is_finite()) {
                    return Err(Error::numeric("policy action", Some(t)));
                }
                let (next, r, _) = domain.step(&s, &a, t, &mut rng);
                total += r;
                s = next;
            }
            Ok(total)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Drift,
    Structure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPair {
    pub name: String,
    pub source: LinearGaussianDomain,
    pub target: LinearGaussianDomain,
    pub shift_kind: ShiftKind,
    pub shift_magnitude: f64,
}

pub const SHIPPED_PAIRS: [&str; 3] = ["drift-small", "drift-large", "structure"];

impl DomainPair {
    /// Target is the unshifted point mass; the source carries the shift.
    pub fn shipped(name: &str) -> Result<Self> {
        let target = LinearGaussianDomain::point_mass(&format!("{name}/target"));
        let mut source = LinearGaussianDomain::point_mass(&format!("{name}/source"));
        let (kind, magnitude) = match name {
            "drift-small" => {
                source.c[3] = -0.2;
                (ShiftKind::Drift, 0.2)
            }
            "drift-large" => {
                source.c[3] = -1.0;
                (ShiftKind::Drift, 1.0)
            }
            "structure" => {
                source.a[2 * 4 + 2] *= 0.9;
                (ShiftKind::Structure, 0.1)
            }
            other => {
                return Err(Error::contract(format!(
                    "unknown domain pair '{other}' (expected one of {SHIPPED_PAIRS:?})"
                )))
            }
        };
        let pair = Self {
            name: name.to_owned(),
            source,
            target,
            shift_kind: kind,
            shift_magnitude: magnitude,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        let (s, t) = (&self.source, &self.target);
        ensure!(
            s.state_dim == t.state_dim
                && s.action_dim == t.action_dim
                && s.q_cost == t.q_cost
                && s.r_cost == t.r_cost
                && s.goal == t.goal
                && s.cost_scale == t.cost_scale
                && s.r_max == t.r_max,
            "source and target must share dimensions and reward"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub random: f64,
    pub expert: f64,
}

/// Mean target-domain returns of the uniform-random policy and the noiseless
/// finite-horizon Riccati controller, 100 episodes each.
pub fn reference_returns(pair: &DomainPair, seed: u64) -> Result<ReferenceReturns> {
    const EPISODES: usize = 100;
    let t = &pair.target;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let random = mean(rollout_returns(
        t,
        &Controller::uniform(t),
        EPISODES,
        rng::labeled_seed(seed, "ref-random"),
    )?);
    let expert = mean(rollout_returns(
        t,
        &Controller::expert(t)?,
        EPISODES,
        rng::labeled_seed(seed, "ref-expert"),
    )?);
    Ok(ReferenceReturns { random, expert })
}

/// `(J − J_r) / (J_e − J_r) × 100`.
pub fn normalized_score(j: f64, refs: &ReferenceReturns) -> Result<f64> {
    let span = refs.expert - refs.random;
    ensure!(
        span.abs() > 1e-12,
        "expert and random reference returns coincide ({}); normalized score undefined",
        refs.expert
    );
    Ok((j - refs.random) / span * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub action: MeanStd,
    pub reward: MeanStd,
    pub transition: MeanStd,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Prediction errors of a generated dataset against the known target
/// dynamics. `inverse` labels `(s, s')` batches with actions and is scored
/// on the held-out real target rows.
pub fn error_report(
    gen: &TransitionDataset,
    target: &LinearGaussianDomain,
    holdout: &TransitionDataset,
    inverse: &dyn Fn(&Matrix, &Matrix) -> Result<Matrix>,
) -> Result<ErrorReport> {
    ensure!(
        gen.state_dim() == target.state_dim && gen.action_dim() == target.action_dim,
        "generated dataset does not match the target domain"
    );
    let mut transition = Vec::with_capacity(gen.len());
    let mut reward = Vec::with_capacity(gen.len());
    for t in gen.rows() {
        transition.push(dist(&t.s_next, &target.mean_next(&t.s, &t.a)));
        reward.push((t.r - target.reward(&t.s, &t.a)).abs());
    }
    let mut action = Vec::with_capacity(holdout.len());
    if !holdout.is_empty() {
        let pred = inverse(&holdout.states(), &holdout.next_states())?;
        ensure!(
            pred.rows() == holdout.len() && pred.cols() == target.action_dim,
            "inverse model returned a {}×{} batch",
            pred.rows(),
            pred.cols()
        );
        for (i, t) in holdout.rows().iter().enumerate() {
            action.push(dist(&target.clip_action(pred.row(i)), &t.a));
        }
    }
    let report = ErrorReport {
        action: MeanStd::of(&action),
        reward: MeanStd::of(&reward),
        transition: MeanStd::of(&transition),
    };
    for (what, m) in [("action", report.action), ("reward", report.reward), ("transition", report.transition)] {
        if !(m.mean.is_finite() && m.std.is_finite()) {
            return Err(Error::numeric(format!("{what} error"), None));
        }
    }
    Ok(report)
}
