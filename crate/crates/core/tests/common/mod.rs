//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls into the code under test except to build
//! inputs.
#![allow(dead_code)]

use rand::Rng as _;
use tce_core::config::ExperimentConfig;
use tce_core::datasets::{DatasetMeta, Origin, Transition, TransitionDataset};
use tce_core::diffusion::{NoiseSchedule, ScoreFn};
use tce_core::generator::{ScoreModel, TrainConfig, Widths};
use tce_core::matrix::Matrix;
use tce_core::netcore::{LossKind, Mlp, MlpSpec};
use tce_core::policy::{self, Batch, GaussianPolicy};
use tce_core::rng::{self, Rng};

pub const FD_STEP: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of `loss` at `params`, coordinate by coordinate.
pub fn finite_diff(params: &[f64], loss: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = loss(&p);
            p[i] = orig - FD_STEP;
            let down = loss(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| rel_err(*a, *b))
        .fold(0.0, f64::max)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    rng::fill_normal(rng, m.as_mut_slice());
    m
}

/// The reduced-width architectures checked for gradient correctness:
/// mixture-state score, target-transition score, inverse dynamics, reward,
/// and the IQL critics.
pub fn architectures() -> Vec<(&'static str, MlpSpec, bool)> {
    let (ds, da) = (4, 2);
    vec![
        ("q_mix", MlpSpec::score(ds, 0, 8, 4, 2), true),
        ("q_tran", MlpSpec::score(ds, ds, 8, 4, 2), true),
        ("inv", MlpSpec::regressor(2 * ds, da, 8, 2), false),
        ("rew", MlpSpec::regressor(2 * ds, 1, 8, 2), false),
        ("critic", MlpSpec::regressor(ds + da, 1, 8, 1), false),
    ]
}

/// Worst relative error between reverse-mode and central-difference
/// gradients for one random parameter/batch draw.
pub fn net_grad_error(spec: &MlpSpec, dsm: bool, draw: u64) -> f64 {
    let mut rng = rng::stream(0x6ad, draw);
    let net = Mlp::new(spec.clone(), &mut rng).unwrap();
    let n = 5;
    let inputs = random_matrix(n, spec.total_input_dim(), &mut rng);
    let out_dim = spec.output_dim;
    let targets = random_matrix(n, out_dim, &mut rng);
    let sigmas: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    fn kind<'a>(dsm: bool, sigmas: &'a [f64], t: &'a Matrix) -> LossKind<'a> {
        if dsm {
            LossKind::Dsm { sigmas, noise: t }
        } else {
            LossKind::Mse { targets: t }
        }
    }
    let (_, grad) = net.loss_and_grad(&inputs, kind(dsm, &sigmas, &targets)).unwrap();
    let loss = |p: &[f64]| {
        let m = Mlp::from_params(spec.clone(), p.to_vec()).unwrap();
        m.loss_and_grad(&inputs, kind(dsm, &sigmas, &targets)).unwrap().0
    };
    max_rel_err(&grad, &finite_diff(net.params(), &loss))
}

/// Same check for the actor loss (AWR likelihood plus KL term), over both
/// the mean network and the log-std vector.
pub fn actor_grad_error(draw: u64, beta: f64, bound: Option<f64>) -> f64 {
    let mut rng = rng::stream(0xac7, draw);
    let (ds, da, n) = (3, 2, 6);
    let actor = GaussianPolicy::new(ds, da, 8, 1, bound, &mut rng).unwrap();
    let mut actor = actor;
    actor.log_std = (0..da).map(|_| rng.random_range(-1.0..0.5)).collect();
    let mut behavior = GaussianPolicy::new(ds, da, 8, 1, bound, &mut rng).unwrap();
    behavior.log_std = (0..da).map(|_| rng.random_range(-1.0..0.5)).collect();
    let s = random_matrix(n, ds, &mut rng);
    let mut a = Matrix::zeros(n, da);
    a.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-0.9..0.9));
    let batch = Batch {
        s_next: s.clone(),
        s,
        a,
        r: vec![0.0; n],
        done: vec![false; n],
        n_target: 3,
    };
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
    let (_, g_mean, g_ls) = policy::policy_loss_and_grad(&actor, &behavior, &batch, &w, beta).unwrap();
    let spec = actor.mean.spec().clone();
    let np = actor.mean.params().len();
    let mut all = actor.mean.params().to_vec();
    all.extend_from_slice(&actor.log_std);
    let loss = |p: &[f64]| {
        let mut a = actor.clone();
        a.mean = Mlp::from_params(spec.clone(), p[..np].to_vec()).unwrap();
        a.log_std = p[np..].to_vec();
        policy::policy_loss_and_grad(&a, &behavior, &batch, &w, beta).unwrap().0
    };
    let mut analytic = g_mean;
    analytic.extend(g_ls);
    max_rel_err(&analytic, &finite_diff(&all, &loss))
}

/// Score of `N(μ, s²·I)` data perturbed to noise level τ:
/// `−(x − μ) / (s² + σ(τ)²)`.
pub fn gaussian_score(mu: &[f64], data_var: f64, sigma: f64, x: &[f64]) -> Vec<f64> {
    let v = data_var + sigma * sigma;
    x.iter().zip(mu).map(|(x, m)| -(x - m) / v).collect()
}

/// `σ(τ)² = 1 − exp(−(α_min τ + ½(α_max − α_min) τ²))`, written out here
/// rather than taken from the schedule type.
pub fn sigma_sq(alpha_min: f64, alpha_max: f64, tau: f64) -> f64 {
    1.0 - (-(alpha_min * tau + 0.5 * (alpha_max - alpha_min) * tau * tau)).exp()
}

pub fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::new(0.1, 20.0).unwrap()
}

/// Dataset of independent random rows, for selection laws.
pub fn random_dataset(n: usize, dim: usize, origin: Origin, rng: &mut Rng) -> TransitionDataset {
    let rows = (0..n)
        .map(|_| {
            let mut s = vec![0.0; dim];
            let mut s2 = vec![0.0; dim];
            rng::fill_normal(rng, &mut s);
            rng::fill_normal(rng, &mut s2);
            Transition {
                s,
                a: vec![rng.random_range(-1.0..1.0)],
                r: rng.random_range(0.0..1.0),
                s_next: s2,
                done: false,
                origin,
            }
        })
        .collect();
    TransitionDataset::new(dim, 1, rows, DatasetMeta::new("random", 0)).unwrap()
}

/// Brute-force nearest-neighbor distance, no pruning.
pub fn brute_nn(s: &[f64], sn: &[f64], tgt: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let l2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    tgt.iter()
        .map(|(t, tn)| l2(s, t) + l2(sn, tn))
        .fold(f64::INFINITY, f64::min)
}

/// Brute-force selection: sort all rows by (distance, index), keep the
/// first ⌈λn⌉, return them in index order.
pub fn brute_select(distances: &[f64], lambda: f64) -> Vec<usize> {
    let n = distances.len();
    let k = if lambda <= 0.0 { 0 } else { ((lambda * n as f64) - 1e-9).ceil() as usize }.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| distances[i].total_cmp(&distances[j]).then(i.cmp(&j)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    keep
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Closed-form score of N(μ, var·I) data under the default schedule,
/// computed from the written-out variance formula.
pub struct AnalyticScore {
    pub mu: Vec<f64>,
    pub var: f64,
}

impl ScoreFn for AnalyticScore {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn score(&self, x: &Matrix, taus: &[f64], _c: Option<&Matrix>) -> tce_core::Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let g = gaussian_score(&self.mu, self.var, sigma_sq(0.1, 20.0, taus[i]).sqrt(), x.row(i));
            out.row_mut(i).copy_from_slice(&g);
        }
        Ok(out)
    }
}

/// Per-column mean and unbiased variance.
pub fn moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let d = m.cols();
    let mean: Vec<f64> = (0..d).map(|j| (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / n).collect();
    let var = (0..d)
        .map(|j| (0..m.rows()).map(|i| (m.get(i, j) - mean[j]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    (mean, var)
}

/// Score net trained on 4000 draws of N((.5, −.5), .6²·I). Returns the model
/// with the data mean and variance.
pub fn trained_gaussian_score() -> (ScoreModel, [f64; 2], f64) {
    let mu = [0.5, -0.5];
    let s = 0.6;
    let mut r = rng::stream(3, 0);
    let mut data = Matrix::zeros(4000, 2);
    rng::fill_normal(&mut r, data.as_mut_slice());
    for i in 0..data.rows() {
        for j in 0..2 {
            data.set(i, j, mu[j] + s * data.get(i, j));
        }
    }
    let widths = Widths { score_hidden: 64, score_embed: 32, score_blocks: 2, aux_hidden: 8, aux_blocks: 1 };
    let mut model = ScoreModel::new(2, 0, &widths, &mut r).unwrap();
    let cfg = TrainConfig { steps: 6000, batch_size: 256, lr: 1e-3, log_every: 500 };
    model.train(&data, None, &default_schedule(), &cfg, &mut r).unwrap();
    (model, mu, s * s)
}

/// Median of ‖q̂ − q‖ / ‖q‖ over a 9×9 grid spanning ±2 marginal std devs,
/// excluding the mean where the true score vanishes.
pub fn median_score_error(model: &dyn ScoreFn, mu: &[f64], var: f64, tau: f64) -> f64 {
    let sig2 = sigma_sq(0.1, 20.0, tau);
    let sd = (var + sig2).sqrt();
    let mut pts = Vec::new();
    for a in 0..9 {
        for b in 0..9 {
            if a == 4 && b == 4 {
                continue;
            }
            pts.push([mu[0] + sd * (-2.0 + 0.5 * a as f64), mu[1] + sd * (-2.0 + 0.5 * b as f64)]);
        }
    }
    let x = Matrix::from_rows(&pts);
    let q = model.score(&x, &vec![tau; pts.len()], None).unwrap();
    let mut errs: Vec<f64> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = gaussian_score(mu, var, sig2.sqrt(), p);
            let num: f64 = q.row(i).iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            num / den
        })
        .collect();
    median(&mut errs)
}

/// Desk config for one pair, variant, and seed.
pub fn desk_config(pair: &str, variant: &str, lambda_cov: f64, lambda_mix: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    for (k, v) in [
        ("domain.pair", pair.to_owned()),
        ("tce.variant", variant.to_owned()),
        ("tce.lambda_cov", lambda_cov.to_string()),
        ("tce.lambda_mix", lambda_mix.to_string()),
        ("seed", seed.to_string()),
    ] {
        cfg.set(k, &v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

/// A desk config shrunk so a whole run takes well under a second.
pub fn tiny_config(variant: &str, lambda_cov: f64, lambda_mix: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = desk_config("drift-small", variant, lambda_cov, lambda_mix, seed);
    for (k, v) in [
        ("data.source_size", "400"),
        ("data.target_size", "100"),
        ("data.holdout_size", "50"),
        ("net.score_hidden", "16"),
        ("net.score_embed", "8"),
        ("net.score_blocks", "1"),
        ("net.aux_hidden", "16"),
        ("net.aux_blocks", "1"),
        ("train.mix_steps", "50"),
        ("train.tran_steps", "50"),
        ("train.aux_steps", "20"),
        ("train.log_every", "10"),
        ("sampler.K", "10"),
        ("tce.max_generate", "200"),
        ("iql.steps", "100"),
        ("iql.bc_steps", "20"),
        ("iql.hidden", "16"),
        ("iql.log_every", "50"),
        ("eval.episodes", "2"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}
