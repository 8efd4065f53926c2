mod common;

use common::*;
use tce_core::diffusion::{pc_sample_chains, SamplerConfig};

#[test]
fn sampler_reproduces_a_gaussian_from_its_exact_score() {
    let score = AnalyticScore { mu: vec![2.0, -1.0], var: 1.0 };
    let cfg = SamplerConfig { steps: 500, ..SamplerConfig::default() };
    let ids: Vec<u64> = (0..10_000).collect();
    let out = pc_sample_chains(&score, &default_schedule(), &cfg, None, 17, &ids).unwrap();
    assert!(out.failed.is_empty());
    let (mean, var) = moments(&out.samples);
    for j in 0..2 {
        assert!((mean[j] - score.mu[j]).abs() <= 0.05, "mean {mean:?}");
        assert!((var[j] - 1.0).abs() <= 0.1, "var {var:?}");
    }
}

#[test]
fn more_sampler_steps_are_not_worse() {
    let score = AnalyticScore { mu: vec![2.0, -1.0], var: 1.0 };
    let err = |steps| {
        let cfg = SamplerConfig { steps, ..SamplerConfig::default() };
        let ids: Vec<u64> = (0..4_000).collect();
        let out = pc_sample_chains(&score, &default_schedule(), &cfg, None, 5, &ids).unwrap();
        let (mean, var) = moments(&out.samples);
        (0..2).map(|j| (mean[j] - score.mu[j]).abs() + (var[j] - 1.0).abs()).sum::<f64>()
    };
    let (coarse, fine) = (err(50), err(500));
    assert!(fine <= coarse, "K=500 error {fine} > K=50 error {coarse}");
}

#[test]
fn learned_score_recovers_the_analytic_score() {
    let (model, mu, var) = trained_gaussian_score();
    for tau in [0.1, 0.5, 0.9] {
        let e = median_score_error(&model, &mu, var, tau);
        assert!(e <= 0.10, "tau {tau}: median relative error {e}");
    }
}
