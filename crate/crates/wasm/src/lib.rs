//! Three small views into `tce-core` for the static page in `www/`.
//!
//! Each export takes plain numbers and returns a JSON string, so the page
//! needs no generated type bindings beyond the wasm-bindgen glue.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use tce_core::config::ExperimentConfig;
use tce_core::diffusion::{pc_sample_chains, GaussianScore, NoiseSchedule, SamplerConfig};
use tce_core::pipeline::collect_data;
use tce_core::selection;
use tce_core::theory::{self, BoundInstance};
use tce_core::{rng, Result};

/// Caps that keep every call interactive.
const MAX_CHAINS: usize = 5_000;
const MAX_STEPS: usize = 1_000;
const MAX_SOURCE: usize = 5_000;

#[derive(Debug, Serialize)]
pub struct SamplerView {
    pub samples: Vec<[f64; 2]>,
    pub mean: [f64; 2],
    pub var: [f64; 2],
    pub failed: usize,
}

/// PC sampling of a 2-D Gaussian from its exact score.
pub fn sample_gaussian_view(
    mu: [f64; 2],
    std: f64,
    steps: usize,
    corrector_steps: usize,
    snr: f64,
    chains: usize,
    seed: u64,
) -> Result<SamplerView> {
    let schedule = NoiseSchedule::default();
    let score = GaussianScore { mean: mu.to_vec(), std, schedule };
    let cfg = SamplerConfig {
        steps: steps.clamp(1, MAX_STEPS),
        corrector_steps,
        snr,
        prior_std: None,
    };
    let ids: Vec<u64> = (0..chains.clamp(1, MAX_CHAINS) as u64).collect();
    let out = pc_sample_chains(&score, &schedule, &cfg, None, seed, &ids)?;
    let bad: Vec<usize> = out.failed.iter().map(|&(i, _)| i).collect();
    let samples: Vec<[f64; 2]> = (0..out.samples.rows())
        .filter(|i| !bad.contains(i))
        .map(|i| [out.samples.get(i, 0), out.samples.get(i, 1)])
        .collect();
    let n = samples.len().max(1) as f64;
    let mut mean = [0.0; 2];
    let mut var = [0.0; 2];
    for j in 0..2 {
        mean[j] = samples.iter().map(|p| p[j]).sum::<f64>() / n;
        var[j] = samples.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / n;
    }
    Ok(SamplerView { samples, mean, var, failed: bad.len() })
}

#[derive(Debug, Serialize)]
pub struct SelectionView {
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub selected: Vec<bool>,
    pub threshold: f64,
    pub count: usize,
}

/// Source and target states of a shipped pair, with the λ-selected source rows.
pub fn selection_view(pair: &str, lambda: f64, source_size: usize, seed: u64) -> Result<SelectionView> {
    let mut cfg = ExperimentConfig::desk();
    cfg.set("domain.pair", pair)?;
    cfg.set("seed", &seed.to_string())?;
    cfg.set("data.source_size", &source_size.clamp(1, MAX_SOURCE).to_string())?;
    cfg.set("data.target_size", "200")?;
    cfg.set("data.holdout_size", "1")?;
    cfg.validate()?;
    let (src, tgt, _) = collect_data(&cfg)?;
    let sel = selection::select(&src, &tgt, lambda, cfg.selection.normalize)?;
    let mut selected = vec![false; src.len()];
    for &i in &sel.indices {
        selected[i] = true;
    }
    Ok(SelectionView {
        source: src.rows().iter().map(|t| t.s.clone()).collect(),
        target: tgt.rows().iter().map(|t| t.s.clone()).collect(),
        selected,
        threshold: sel.threshold,
        count: sel.indices.len(),
    })
}

#[derive(Debug, Serialize)]
pub struct BoundsView {
    pub lambda: Vec<f64>,
    pub gap: Vec<f64>,
    pub value_bound: Vec<f64>,
    pub tv_bound: Vec<f64>,
}

/// Exact return gap and both bounds of one random tabular instance as the
/// mixing weight sweeps `[0, 1]`.
pub fn bounds_view(n_states: usize, n_actions: usize, points: usize, seed: u64) -> Result<BoundsView> {
    let mut r = rng::stream(seed, 0);
    let mut inst = BoundInstance::random(n_states.clamp(1, 8), n_actions.clamp(1, 4), &mut r);
    let points = points.clamp(2, 201);
    let mut view = BoundsView { lambda: vec![], gap: vec![], value_bound: vec![], tv_bound: vec![] };
    for k in 0..points {
        inst.lambda = k as f64 / (points - 1) as f64;
        let c = theory::check_instance(&inst)?;
        view.lambda.push(inst.lambda);
        view.gap.push(c.gap);
        view.value_bound.push(c.value_bound);
        view.tv_bound.push(c.tv_bound);
    }
    Ok(view)
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sample_gaussian(
    mu_x: f64,
    mu_y: f64,
    std: f64,
    steps: u32,
    corrector_steps: u32,
    snr: f64,
    chains: u32,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(sample_gaussian_view(
        [mu_x, mu_y],
        std,
        steps as usize,
        corrector_steps as usize,
        snr,
        chains as usize,
        seed as u64,
    ))
}

#[wasm_bindgen]
pub fn select_source(pair: &str, lambda: f64, source_size: u32, seed: u32) -> std::result::Result<String, JsError> {
    to_js(selection_view(pair, lambda, source_size as usize, seed as u64))
}

#[wasm_bindgen]
pub fn bounds_sweep(n_states: u32, n_actions: u32, points: u32, seed: u32) -> std::result::Result<String, JsError> {
    to_js(bounds_view(n_states as usize, n_actions as usize, points as usize, seed as u64))
}
