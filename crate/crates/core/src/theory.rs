//! Exact finite-MDP machinery for the performance-gap bounds.
//!
//! Two return conventions appear here. `eta` is the normalized average
//! return `Σ ρ(s,a) r(s,a)` under the normalized occupancy `ρ`, and
//! `discounted_return` is `J = μ0ᵀ V = η / (1 − γ)`. The telescoping
//! identity `J₁ − J₂ = γ/(1−γ) · E_{ρ₁}[G]` is exact in `J`, so the gap
//! checks use `J` (the stricter of the two, since `|J gap| ≥ |η gap|`).

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{self, Rng};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Transition kernel `P[s, a, s']`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub n_states: usize,
    pub n_actions: usize,
    pub p: Vec<f64>,
}

impl Kernel {
    pub fn new(n_states: usize, n_actions: usize, p: Vec<f64>) -> Result<Self> {
        let k = Self { n_states, n_actions, p };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        ensure!(s > 0 && a > 0, "kernel needs at least one state and action");
        ensure!(self.p.len() == s * a * s, "kernel has {} entries, expected {}", self.p.len(), s * a * s);
        for (i, row) in self.p.chunks_exact(s).enumerate() {
            let sum: f64 = row.iter().sum();
            ensure!(
                row.iter().all(|v| *v >= 0.0) && (sum - 1.0).abs() <= STOCHASTIC_TOL,
                "kernel row (s={}, a={}) is not a distribution (sum {sum})",
                i / a,
                i % a
            );
        }
        Ok(())
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states;
        let off = (s * self.n_actions + a) * n;
        &self.p[off..off + n]
    }

    /// Uniform-Dirichlet rows.
    pub fn random(n_states: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let p = (0..n_states * n_actions)
            .flat_map(|_| dirichlet_one(n_states, rng))
            .collect();
        Self { n_states, n_actions, p }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub kernel: Kernel,
    /// `r[s, a]`, row-major, in `[0, r_max]`.
    pub r: Vec<f64>,
    pub r_max: f64,
    pub gamma: f64,
    pub mu0: Vec<f64>,
}

impl TabularMdp {
    pub fn new(kernel: Kernel, r: Vec<f64>, r_max: f64, gamma: f64, mu0: Vec<f64>) -> Result<Self> {
        let m = Self {
            kernel,
            r,
            r_max,
            gamma,
            mu0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn n_states(&self) -> usize {
        self.kernel.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.kernel.n_actions
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let (s, a) = (self.n_states(), self.n_actions());
        ensure!(self.r.len() == s * a, "reward matrix must be S×A");
        ensure!(
            self.r.iter().all(|v| (0.0..=self.r_max).contains(v)),
            "rewards must lie in [0, r_max = {}]",
            self.r_max
        );
        ensure!(self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)");
        ensure!(self.mu0.len() == s, "initial distribution must have S entries");
        let sum: f64 = self.mu0.iter().sum();
        ensure!(
            self.mu0.iter().all(|v| *v >= 0.0) && (sum - 1.0).abs() <= STOCHASTIC_TOL,
            "initial distribution is not on the simplex"
        );
        Ok(())
    }

    /// Same rewards, discount, and start distribution under another kernel.
    pub fn with_kernel(&self, kernel: Kernel) -> Result<Self> {
        ensure!(
            kernel.n_states == self.n_states() && kernel.n_actions == self.n_actions(),
            "kernel shape differs from the MDP"
        );
        Self::new(kernel, self.r.clone(), self.r_max, self.gamma, self.mu0.clone())
    }

    /// Dirichlet(1) kernel and start distribution, uniform rewards in
    /// `[0, 1]`, `γ ~ U[0.5, 0.95]`.
    pub fn random(n_states: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let kernel = Kernel::random(n_states, n_actions, rng);
        let r = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        let gamma = rng.random_range(0.5..0.95);
        let mu0 = dirichlet_one(n_states, rng);
        Self {
            kernel,
            r,
            r_max: 1.0,
            gamma,
            mu0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    /// `π[s, a]`, row-major.
    pub pi: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, pi: Vec<f64>) -> Result<Self> {
        ensure!(pi.len() == n_states * n_actions, "policy must be S×A");
        for row in pi.chunks_exact(n_actions) {
            let sum: f64 = row.iter().sum();
            ensure!(
                row.iter().all(|v| *v >= 0.0) && (sum - 1.0).abs() <= STOCHASTIC_TOL,
                "policy row is not a distribution"
            );
        }
        Ok(Self {
            n_states,
            n_actions,
            pi,
        })
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let pi = (0..n_states).flat_map(|_| dirichlet_one(n_actions, rng)).collect();
        Self {
            n_states,
            n_actions,
            pi,
        }
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.pi[s * self.n_actions + a]
    }
}

fn dirichlet_one(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

fn check_pair(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<()> {
    ensure!(
        pi.n_states == mdp.n_states() && pi.n_actions == mdp.n_actions(),
        "policy shape differs from the MDP"
    );
    Ok(())
}

/// State-to-state matrix `P_π[s, s'] = Σ_a π(a|s) P(s'|s,a)`.
fn p_pi(kernel: &Kernel, pi: &TabularPolicy) -> DMatrix<f64> {
    let n = kernel.n_states;
    DMatrix::from_fn(n, n, |s, t| {
        (0..kernel.n_actions)
            .map(|a| pi.prob(s, a) * kernel.row(s, a)[t])
            .sum()
    })
}

/// `I − γ P_π`.
fn flow_matrix(mdp: &TabularMdp, pi: &TabularPolicy) -> DMatrix<f64> {
    let n = mdp.n_states();
    DMatrix::identity(n, n) - p_pi(&mdp.kernel, pi) * mdp.gamma
}

fn solve(m: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let x = m
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::numeric(format!("{what}: singular system"), None))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::numeric(what, None))
    }
}

/// `V^π` from `(I − γP_π) V = r_π`.
pub fn value(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    check_pair(mdp, pi)?;
    let na = mdp.n_actions();
    let r_pi = DVector::from_fn(mdp.n_states(), |s, _| {
        (0..na).map(|a| pi.prob(s, a) * mdp.r[s * na + a]).sum()
    });
    Ok(solve(flow_matrix(mdp, pi), r_pi, "policy evaluation")?
        .iter()
        .copied()
        .collect())
}

/// Normalized discounted occupancy `ρ(s, a) = d(s) π(a|s)` with
/// `d = (1 − γ) μ0ᵀ (I − γP_π)⁻¹`.
pub fn occupancy(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    check_pair(mdp, pi)?;
    let mu0 = DVector::from_column_slice(&mdp.mu0);
    let d = solve(flow_matrix(mdp, pi).transpose(), mu0 * (1.0 - mdp.gamma), "occupancy")?;
    let na = mdp.n_actions();
    Ok((0..mdp.n_states() * na)
        .map(|i| d[i / na].max(0.0) * pi.pi[i])
        .collect())
}

/// Normalized average return `Σ ρ r`.
pub fn eta(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let rho = occupancy(mdp, pi)?;
    Ok(rho.iter().zip(&mdp.r).map(|(p, r)| p * r).sum())
}

/// Expected discounted return `J = μ0ᵀ V^π`.
pub fn discounted_return(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let v = value(mdp, pi)?;
    Ok(mdp.mu0.iter().zip(&v).map(|(m, v)| m * v).sum())
}

/// `D_TV(P(·|s,a) ‖ Q(·|s,a))` for every `(s, a)`.
pub fn tv(p: &Kernel, q: &Kernel) -> Result<Vec<f64>> {
    ensure!(
        p.n_states == q.n_states && p.n_actions == q.n_actions,
        "kernels have different shapes"
    );
    Ok(p.p
        .chunks_exact(p.n_states)
        .zip(q.p.chunks_exact(q.n_states))
        .map(|(a, b)| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .collect())
}

/// `λ P_src + (1 − λ) P̂`.
pub fn mix(p_src: &Kernel, p_hat: &Kernel, lambda: f64) -> Result<Kernel> {
    ensure!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1]");
    ensure!(
        p_src.n_states == p_hat.n_states && p_src.n_actions == p_hat.n_actions,
        "kernels have different shapes"
    );
    let p = p_src
        .p
        .iter()
        .zip(&p_hat.p)
        // exact at both endpoints, and identical kernels mix to themselves
        .map(|(a, b)| if lambda == 1.0 { *a } else { b + lambda * (a - b) })
        .collect();
    Ok(Kernel {
        n_states: p_src.n_states,
        n_actions: p_src.n_actions,
        p,
    })
}

/// The three kernels of a gap-bound instance; rewards, discount and start
/// distribution come from `tar`.
#[derive(Debug, Clone)]
pub struct BoundInstance {
    pub tar: TabularMdp,
    pub p_src: Kernel,
    pub p_hat: Kernel,
    pub lambda: f64,
    pub pi: TabularPolicy,
}

impl BoundInstance {
    pub fn mixture(&self) -> Result<TabularMdp> {
        self.tar.with_kernel(mix(&self.p_src, &self.p_hat, self.lambda)?)
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let tar = TabularMdp::random(n_states, n_actions, rng);
        let p_src = Kernel::random(n_states, n_actions, rng);
        let p_hat = Kernel::random(n_states, n_actions, rng);
        let lambda = rng.random::<f64>();
        let pi = TabularPolicy::random(n_states, n_actions, rng);
        Self {
            tar,
            p_src,
            p_hat,
            lambda,
            pi,
        }
    }
}

/// Dynamics-gap bound `2γ r_max / (1−γ)² · E_{ρ_mix}[λ D_TV(P_src‖P_tar) + (1−λ) D_TV(P̂‖P_tar)]`.
pub fn tv_bound(inst: &BoundInstance) -> Result<f64> {
    let mixture = inst.mixture()?;
    let rho = occupancy(&mixture, &inst.pi)?;
    let tv_src = tv(&inst.p_src, &inst.tar.kernel)?;
    let tv_hat = tv(&inst.p_hat, &inst.tar.kernel)?;
    let l = inst.lambda;
    let e: f64 = rho
        .iter()
        .zip(tv_src.iter().zip(&tv_hat))
        .map(|(p, (a, b))| p * (l * a + (1.0 - l) * b))
        .sum();
    let g = inst.tar.gamma;
    Ok(2.0 * g * inst.tar.r_max / ((1.0 - g) * (1.0 - g)) * e)
}

/// `E_{s'~P(·|s,a)}[V(s')]` for every `(s, a)`.
fn expected_next(kernel: &Kernel, v: &[f64]) -> Vec<f64> {
    kernel
        .p
        .chunks_exact(kernel.n_states)
        .map(|row| row.iter().zip(v).map(|(p, v)| p * v).sum())
        .collect()
}

/// Value-discrepancy bound
/// `γ/(1−γ) · E_{ρ_mix}[λ |E_{P_src}V_tar − E_{P_tar}V_tar| + (1−λ) |E_{P̂}V_tar − E_{P_tar}V_tar|]`.
pub fn value_bound(inst: &BoundInstance) -> Result<f64> {
    let mixture = inst.mixture()?;
    let rho = occupancy(&mixture, &inst.pi)?;
    let v_tar = value(&inst.tar, &inst.pi)?;
    let e_tar = expected_next(&inst.tar.kernel, &v_tar);
    let e_src = expected_next(&inst.p_src, &v_tar);
    let e_hat = expected_next(&inst.p_hat, &v_tar);
    let l = inst.lambda;
    let e: f64 = (0..rho.len())
        .map(|i| rho[i] * (l * (e_src[i] - e_tar[i]).abs() + (1.0 - l) * (e_hat[i] - e_tar[i]).abs()))
        .sum();
    let g = inst.tar.gamma;
    Ok(g / (1.0 - g) * e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Telescoping {
    /// `J₁ − J₂`.
    pub lhs: f64,
    /// `γ/(1−γ) · E_{ρ₁}[G]`.
    pub rhs: f64,
    pub residual: f64,
}

/// Both sides of the telescoping identity with
/// `G(s,a) = E_{P₁}[V₂(s')] − E_{P₂}[V₂(s')]`.
pub fn telescoping_check(m1: &TabularMdp, m2: &TabularMdp, pi: &TabularPolicy) -> Result<Telescoping> {
    ensure!(
        m1.n_states() == m2.n_states()
            && m1.n_actions() == m2.n_actions()
            && m1.gamma == m2.gamma
            && m1.r == m2.r
            && m1.mu0 == m2.mu0,
        "telescoping needs two MDPs that differ only in dynamics"
    );
    let lhs = discounted_return(m1, pi)? - discounted_return(m2, pi)?;
    let v2 = value(m2, pi)?;
    let e1 = expected_next(&m1.kernel, &v2);
    let e2 = expected_next(&m2.kernel, &v2);
    let rho1 = occupancy(m1, pi)?;
    let eg: f64 = rho1.iter().zip(e1.iter().zip(&e2)).map(|(p, (a, b))| p * (a - b)).sum();
    let rhs = m1.gamma / (1.0 - m1.gamma) * eg;
    Ok(Telescoping {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}

/// Exact quantities and bounds for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// `|J_mix − J_tar|`.
    pub gap: f64,
    /// `|η_mix − η_tar|`.
    pub normalized_gap: f64,
    pub value_bound: f64,
    pub tv_bound: f64,
    pub telescoping_residual: f64,
}

pub fn check_instance(inst: &BoundInstance) -> Result<BoundCheck> {
    let mixture = inst.mixture()?;
    let t = telescoping_check(&mixture, &inst.tar, &inst.pi)?;
    let normalized_gap = (eta(&mixture, &inst.pi)? - eta(&inst.tar, &inst.pi)?).abs();
    Ok(BoundCheck {
        gap: t.lhs.abs(),
        normalized_gap,
        value_bound: value_bound(inst)?,
        tv_bound: tv_bound(inst)?,
        telescoping_residual: t.residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub instances: usize,
    pub seed: u64,
    /// `gap > value_bound` or `value_bound > tv_bound` (beyond 1e-12).
    pub violations: usize,
    pub max_gap_to_value_bound: f64,
    pub max_gap_to_tv_bound: f64,
    pub max_value_to_tv_bound: f64,
    pub max_telescoping_residual: f64,
}

/// Seeded random campaign with `S ∈ [2, 5]`, `A ∈ [1, 3]`.
pub fn verify_bounds(instances: usize, seed: u64) -> Result<BoundReport> {
    let mut report = BoundReport {
        instances,
        seed,
        violations: 0,
        max_gap_to_value_bound: 0.0,
        max_gap_to_tv_bound: 0.0,
        max_value_to_tv_bound: 0.0,
        max_telescoping_residual: 0.0,
    };
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else if a > 0.0 { f64::INFINITY } else { 0.0 };
    for i in 0..instances {
        let mut rng = rng::stream(seed, i as u64);
        let s = rng.random_range(2..=5);
        let a = rng.random_range(1..=3);
        let c = check_instance(&BoundInstance::random(s, a, &mut rng))?;
        if c.gap > c.value_bound + 1e-12 || c.value_bound > c.tv_bound + 1e-12 {
            report.violations += 1;
        }
        report.max_gap_to_value_bound = report.max_gap_to_value_bound.max(ratio(c.gap, c.value_bound));
        report.max_gap_to_tv_bound = report.max_gap_to_tv_bound.max(ratio(c.gap, c.tv_bound));
        report.max_value_to_tv_bound = report.max_value_to_tv_bound.max(ratio(c.value_bound, c.tv_bound));
        report.max_telescoping_residual = report.max_telescoping_residual.max(c.telescoping_residual);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle(gamma: f64) -> TabularMdp {
        // s0 -> s1 -> s0, one action
        let k = Kernel::new(2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        TabularMdp::new(k, vec![1.0, 0.0], 1.0, gamma, vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn two_state_cycle_occupancy() {
        // d(s0) = (1−γ)(1 + γ² + γ⁴ + …) = (1−γ)/(1−γ²) = 1/(1+γ) = 2/3 at γ = 0.5
        let m = cycle(0.5);
        let pi = TabularPolicy::new(2, 1, vec![1.0, 1.0]).unwrap();
        let rho = occupancy(&m, &pi).unwrap();
        assert!((rho[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((rho[1] - 1.0 / 3.0).abs() < 1e-14);
        assert!((eta(&m, &pi).unwrap() - 2.0 / 3.0).abs() < 1e-14);
        // V(s0) = 1/(1−γ²) = 4/3
        assert!((value(&m, &pi).unwrap()[0] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn single_state_occupancy_is_policy() {
        let k = Kernel::new(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let m = TabularMdp::new(k, vec![0.2, 0.5, 0.9], 1.0, 0.7, vec![1.0]).unwrap();
        let pi = TabularPolicy::new(1, 3, vec![0.1, 0.3, 0.6]).unwrap();
        let rho = occupancy(&m, &pi).unwrap();
        for (a, b) in rho.iter().zip(&pi.pi) {
            assert!((a - b).abs() < 1e-14);
        }
        let want = 0.1 * 0.2 + 0.3 * 0.5 + 0.6 * 0.9;
        assert!((eta(&m, &pi).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn constant_reward_values() {
        let mut rng = rng::stream(3, 0);
        let mut m = TabularMdp::random(4, 2, &mut rng);
        m.r = vec![1.0; 8];
        let pi = TabularPolicy::random(4, 2, &mut rng);
        for v in value(&m, &pi).unwrap() {
            assert!((v - 1.0 / (1.0 - m.gamma)).abs() < 1e-10);
        }
        assert!((eta(&m, &pi).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        let p = Kernel::new(2, 1, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        let q = Kernel::new(2, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(tv(&p, &q).unwrap(), vec![0.5, 0.0]);
        assert_eq!(tv(&p, &p).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn mix_endpoints() {
        let mut rng = rng::stream(4, 0);
        let a = Kernel::random(3, 2, &mut rng);
        let b = Kernel::random(3, 2, &mut rng);
        assert_eq!(mix(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mix(&a, &b, 0.0).unwrap(), b);
        assert!(mix(&a, &b, 0.37).unwrap().validate().is_ok());
    }

    #[test]
    fn identical_kernels_have_zero_bounds() {
        let mut rng = rng::stream(5, 0);
        let mut inst = BoundInstance::random(4, 2, &mut rng);
        inst.p_src = inst.tar.kernel.clone();
        inst.p_hat = inst.tar.kernel.clone();
        let c = check_instance(&inst).unwrap();
        assert_eq!(c.tv_bound, 0.0);
        assert_eq!(c.value_bound, 0.0);
        assert!(c.gap < 1e-12);
    }

    #[test]
    fn lambda_zero_with_exact_model_is_zero() {
        let mut rng = rng::stream(6, 0);
        let mut inst = BoundInstance::random(4, 3, &mut rng);
        inst.lambda = 0.0;
        inst.p_hat = inst.tar.kernel.clone();
        assert_eq!(tv_bound(&inst).unwrap(), 0.0);
    }

    #[test]
    fn invalid_kernel_rejected() {
        assert!(Kernel::new(2, 1, vec![0.5, 0.6, 1.0, 0.0]).is_err());
    }
}
