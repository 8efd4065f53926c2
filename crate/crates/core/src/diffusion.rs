//! Continuous-time score-SDE machinery.
//!
//! The forward process is `x^τ = x^0 + σ(τ)·z` (no drift, α ≡ 1) with
//!
//! ```text
//! B(τ) = α_min·τ + ½(α_max − α_min)·τ²
//! σ(τ) = √(1 − exp(−B(τ)))
//! g(τ)² = dσ²/dτ = B'(τ)·exp(−B(τ))
//! ```
//!
//! Reverse sampling integrates the reverse SDE on the uniform grid
//! `τ^k = k/K` with an Euler–Maruyama predictor followed by Langevin
//! corrector steps whose size targets a fixed signal-to-noise ratio.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Rng};

/// Lower bound of the uniform τ draw in the score-matching loss.
pub const TAU_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            alpha_min: 0.1,
            alpha_max: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(alpha_min: f64, alpha_max: f64) -> Result<Self> {
        ensure!(
            alpha_min > 0.0 && alpha_max >= alpha_min && alpha_max.is_finite(),
            "schedule needs 0 < alpha_min <= alpha_max (got {alpha_min}, {alpha_max})"
        );
        Ok(Self { alpha_min, alpha_max })
    }

    /// `B(τ)`.
    #[inline]
    pub fn exponent(&self, tau: f64) -> f64 {
        self.alpha_min * tau + 0.5 * (self.alpha_max - self.alpha_min) * tau * tau
    }

    #[inline]
    fn exponent_rate(&self, tau: f64) -> f64 {
        self.alpha_min + (self.alpha_max - self.alpha_min) * tau
    }

    /// `σ(τ)` for τ ∈ [0, 1].
    pub fn sigma(&self, tau: f64) -> Result<f64> {
        check_tau(tau)?;
        Ok(self.sigma_at(tau))
    }

    #[inline]
    pub(crate) fn sigma_at(&self, tau: f64) -> f64 {
        (-(-self.exponent(tau)).exp_m1()).sqrt()
    }

    /// `g(τ)² = dσ²/dτ`.
    pub fn g_squared(&self, tau: f64) -> Result<f64> {
        check_tau(tau)?;
        Ok(self.g_squared_at(tau))
    }

    #[inline]
    pub(crate) fn g_squared_at(&self, tau: f64) -> f64 {
        self.exponent_rate(tau) * (-self.exponent(tau)).exp()
    }

    pub fn g(&self, tau: f64) -> Result<f64> {
        self.g_squared(tau).map(f64::sqrt)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&tau), "tau must lie in [0, 1], got {tau}");
    Ok(())
}

/// `x^τ = x^0 + σ(τ)·z`.
pub fn perturb(schedule: &NoiseSchedule, x0: &[f64], tau: f64, z: &[f64]) -> Result<Vec<f64>> {
    ensure!(x0.len() == z.len(), "perturb: x0 has {} dims, z has {}", x0.len(), z.len());
    let s = schedule.sigma(tau)?;
    Ok(x0.iter().zip(z).map(|(x, z)| x + s * z).collect())
}

/// A (possibly conditional) score estimate `q(x, τ | c) ≈ ∇ₓ log p_τ(x | c)`.
pub trait ScoreFn {
    fn dim(&self) -> usize;

    fn cond_dim(&self) -> usize {
        0
    }

    /// Scores for a batch: `x` is `n × dim`, `taus` has one entry per row,
    /// `cond` is `n × cond_dim` when the model is conditional.
    fn score(&self, x: &Matrix, taus: &[f64], cond: Option<&Matrix>) -> Result<Matrix>;
}

/// Exact score of `N(μ, s²I)` smoothed by the forward process:
/// `−(x − μ)/(s² + σ(τ)²)`.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    pub mean: Vec<f64>,
    pub std: f64,
    pub schedule: NoiseSchedule,
}

impl ScoreFn for GaussianScore {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, x: &Matrix, taus: &[f64], _cond: Option<&Matrix>) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let s = self.schedule.sigma_at(taus[i]);
            let var = self.std * self.std + s * s;
            for (j, m) in self.mean.iter().enumerate() {
                out.set(i, j, -(x.get(i, j) - m) / var);
            }
        }
        Ok(out)
    }
}

/// Monte-Carlo denoising score-matching loss with weight `σ(τ)²`, evaluated
/// as `mean ‖σ(τ)·q(x^τ, τ) + z‖²`.
pub fn dsm_loss<S: ScoreFn + ?Sized>(
    score: &S,
    schedule: &NoiseSchedule,
    x0: &Matrix,
    cond: Option<&Matrix>,
    rng: &mut Rng,
) -> Result<f64> {
    ensure!(x0.rows() > 0, "dsm_loss: batch must be non-empty");
    let batch = DsmBatch::draw(schedule, x0, rng);
    let q = score.score(&batch.perturbed, &batch.taus, cond)?;
    let mut total = 0.0;
    for i in 0..x0.rows() {
        let s = batch.sigmas[i];
        total += q
            .row(i)
            .iter()
            .zip(batch.noise.row(i))
            .map(|(q, z)| (s * q + z).powi(2))
            .sum::<f64>();
    }
    Ok(total / x0.rows() as f64)
}

/// One draw of (τ, z, x^τ) per data row.
#[derive(Debug, Clone)]
pub struct DsmBatch {
    pub taus: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub noise: Matrix,
    pub perturbed: Matrix,
}

impl DsmBatch {
    pub fn draw(schedule: &NoiseSchedule, x0: &Matrix, rng: &mut Rng) -> Self {
        let (n, d) = (x0.rows(), x0.cols());
        let mut taus = Vec::with_capacity(n);
        let mut sigmas = Vec::with_capacity(n);
        let mut noise = Matrix::zeros(n, d);
        let mut perturbed = x0.clone();
        for i in 0..n {
            let tau = rng.random_range(TAU_FLOOR..=1.0);
            let s = schedule.sigma_at(tau);
            rng::fill_normal(rng, noise.row_mut(i));
            for (x, z) in perturbed.row_mut(i).iter_mut().zip(noise.row(i)) {
                *x += s * z;
            }
            taus.push(tau);
            sigmas.push(s);
        }
        Self {
            taus,
            sigmas,
            noise,
            perturbed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of discretization steps K.
    pub steps: usize,
    pub corrector_steps: usize,
    pub snr: f64,
    /// Standard deviation of the terminal prior; `None` means σ(1).
    pub prior_std: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            corrector_steps: 1,
            snr: 0.16,
            prior_std: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "sampler needs K >= 1");
        ensure!(self.snr > 0.0, "corrector snr must be positive");
        if let Some(s) = self.prior_std {
            ensure!(s > 0.0 && s.is_finite(), "prior std must be positive");
        }
        Ok(())
    }
}

/// Result of running a batch of independent chains.
#[derive(Debug, Clone)]
pub struct ChainBatch {
    /// One row per chain; rows of failed chains are zero.
    pub samples: Matrix,
    /// `(chain, step k)` of every chain that went non-finite.
    pub failed: Vec<(usize, usize)>,
}

/// Runs independent predictor–corrector chains.
///
/// Chain `i` draws all of its noise from the stream `(seed, chain_ids[i])`,
/// so a chain's output does not depend on which other chains share its batch.
pub fn pc_sample_chains<S: ScoreFn + ?Sized>(
    score: &S,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    cond: Option<&Matrix>,
    seed: u64,
    chain_ids: &[u64],
) -> Result<ChainBatch> {
    cfg.validate()?;
    let n = chain_ids.len();
    let d = score.dim();
    if let Some(c) = cond {
        ensure!(c.rows() == n, "conditioning has {} rows for {n} chains", c.rows());
        ensure!(c.cols() == score.cond_dim(), "conditioning width mismatch");
    } else {
        ensure!(score.cond_dim() == 0, "conditional score needs conditioning input");
    }
    let mut rngs: Vec<Rng> = chain_ids.iter().map(|&id| rng::stream(seed, id)).collect();
    let prior_std = cfg.prior_std.unwrap_or_else(|| schedule.sigma_at(1.0));

    let mut x = Matrix::zeros(n, d);
    for (i, r) in rngs.iter_mut().enumerate() {
        rng::fill_normal(r, x.row_mut(i));
        x.row_mut(i).iter_mut().for_each(|v| *v *= prior_std);
    }
    let mut alive = vec![true; n];
    let mut failed = Vec::new();
    let k_total = cfg.steps;
    let dt = 1.0 / k_total as f64;
    let mut xi = vec![0.0; d];

    for k in (1..=k_total).rev() {
        let tau = k as f64 / k_total as f64;
        let tau_prev = (k - 1) as f64 / k_total as f64;
        let g2 = schedule.g_squared_at(tau);
        let taus = vec![tau; n];
        let q = score.score(&x, &taus, cond)?;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            let row = x.row_mut(i);
            for (xv, qv) in row.iter_mut().zip(q.row(i)) {
                *xv += g2 * qv * dt;
            }
            // The last predictor step is noise-free.
            if k > 1 {
                rng::fill_normal(&mut rngs[i], &mut xi);
                let amp = (g2 * dt).sqrt();
                for (xv, e) in row.iter_mut().zip(&xi) {
                    *xv += amp * e;
                }
            }
        }
        if tau_prev > 0.0 {
            let taus = vec![tau_prev; n];
            // Targeted-snr Langevin step with both norms at their expected
            // values (‖ξ‖ ≈ √d, ‖q‖ ≈ √d/σ). A per-chain ‖q‖ collapses near a
            // mode and sends the step size to infinity.
            let sigma = schedule.sigma_at(tau_prev);
            let eta = 2.0 * (cfg.snr * sigma).powi(2);
            let amp = (2.0 * eta).sqrt();
            for _ in 0..cfg.corrector_steps {
                let q = score.score(&x, &taus, cond)?;
                for i in 0..n {
                    if !alive[i] {
                        continue;
                    }
                    rng::fill_normal(&mut rngs[i], &mut xi);
                    for ((xv, qv), e) in x.row_mut(i).iter_mut().zip(q.row(i)).zip(&xi) {
                        *xv += eta * qv + amp * e;
                    }
                }
            }
        }
        for i in 0..n {
            if alive[i] && !x.row(i).iter().all(|v| v.is_finite()) {
                alive[i] = false;
                failed.push((i, k));
                x.row_mut(i).fill(0.0);
            }
        }
    }
    Ok(ChainBatch { samples: x, failed })
}

/// A single chain; non-finite states are reported with the step index.
pub fn pc_sample<S: ScoreFn + ?Sized>(
    score: &S,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    cond: Option<&[f64]>,
    seed: u64,
) -> Result<Vec<f64>> {
    let cond = cond.map(|c| Matrix::from_vec(1, c.len(), c.to_vec()));
    let out = pc_sample_chains(score, schedule, cfg, cond.as_ref(), seed, &[0])?;
    if let Some(&(_, k)) = out.failed.first() {
        return Err(Error::numeric("pc_sample", Some(k)));
    }
    Ok(out.samples.into_vec())
}
