//! Transition datasets, state standardization, training-set assembly, and
//! the `TCED` binary format.
//!
//! `TCED` layout (all integers and floats little-endian):
//!
//! ```text
//! "TCED" | u16 version | u32 metadata length | metadata JSON (UTF-8)
//!        | rows × [s, a, r, s_next, done ∈ {0, 1}] as f64
//!        | u32 CRC-32 of the row payload
//! ```
//!
//! Per-row origin tags are stored run-length encoded in the metadata so the
//! payload keeps the plain field order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::selection::SelectionResult;

const MAGIC: &[u8; 4] = b"TCED";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Source,
    Target,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub origin: Origin,
}

/// Per-dimension state standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits mean and (population) std over the given state vectors. A
    /// zero-variance dimension gets std 1.
    pub fn fit<'a, I>(dim: usize, states: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let states: Vec<&[f64]> = states.into_iter().collect();
        for s in &states {
            n += 1;
            for (acc, v) in sum.iter_mut().zip(*s) {
                *acc += v;
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
        for s in &states {
            for ((acc, v), m) in sq.iter_mut().zip(*s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = sq
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let sd = (v / n as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    log::warn!("state dimension {j} has zero variance; using std 1");
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), sd)| (v - m) / sd)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), sd)| v * sd + m)
            .collect()
    }

    pub fn normalize_matrix(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            let row = self.normalize(m.row(i));
            out.row_mut(i).copy_from_slice(&row);
        }
        out
    }

    pub fn denormalize_matrix(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            let row = self.denormalize(m.row(i));
            out.row_mut(i).copy_from_slice(&row);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub domain: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl DatasetMeta {
    pub fn new(domain: &str, seed: u64) -> Self {
        Self {
            domain: domain.to_owned(),
            seed,
            ..Self::default()
        }
    }
}

/// An immutable set of transitions with a fitted state scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    state_dim: usize,
    action_dim: usize,
    rows: Vec<Transition>,
    scaler: Scaler,
    meta: DatasetMeta,
}

impl TransitionDataset {
    /// Validates dimensions and finiteness, then fits the scaler over all
    /// `s` and `s_next`.
    pub fn new(state_dim: usize, action_dim: usize, rows: Vec<Transition>, meta: DatasetMeta) -> Result<Self> {
        for (i, t) in rows.iter().enumerate() {
            ensure!(
                t.s.len() == state_dim && t.s_next.len() == state_dim && t.a.len() == action_dim,
                "row {i}: dimensions do not match ({state_dim}, {action_dim})"
            );
            let finite = t.s.iter().chain(&t.a).chain(&t.s_next).all(|v| v.is_finite()) && t.r.is_finite();
            if !finite {
                return Err(Error::numeric("dataset row", Some(i)));
            }
        }
        let scaler = Scaler::fit(
            state_dim,
            rows.iter().flat_map(|t| [t.s.as_slice(), t.s_next.as_slice()]),
        );
        Ok(Self {
            state_dim,
            action_dim,
            rows,
            scaler,
            meta,
        })
    }

    pub fn empty(state_dim: usize, action_dim: usize, meta: DatasetMeta) -> Self {
        Self {
            state_dim,
            action_dim,
            rows: Vec::new(),
            scaler: Scaler::identity(state_dim),
            meta,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn rows(&self) -> &[Transition] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Returns a copy with `key` set in the metadata extras.
    pub fn with_extra(mut self, key: &str, value: serde_json::Value) -> Self {
        self.meta.extra.insert(key.to_owned(), value);
        self
    }

    pub fn with_meta(mut self, meta: DatasetMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn count_origin(&self, origin: Origin) -> usize {
        self.rows.iter().filter(|t| t.origin == origin).count()
    }

    pub fn states(&self) -> Matrix {
        stack(self.state_dim, self.rows.iter().map(|t| t.s.as_slice()).collect())
    }

    pub fn next_states(&self) -> Matrix {
        stack(self.state_dim, self.rows.iter().map(|t| t.s_next.as_slice()).collect())
    }

    pub fn actions(&self) -> Matrix {
        stack(self.action_dim, self.rows.iter().map(|t| t.a.as_slice()).collect())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rows.iter().map(|t| t.r).collect()
    }

    /// Rows at `indices`, in that order; the scaler is refitted.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        ensure!(
            indices.iter().all(|&i| i < self.rows.len()),
            "subset index out of range"
        );
        let rows = indices.iter().map(|&i| self.rows[i].clone()).collect();
        Self::new(self.state_dim, self.action_dim, rows, self.meta.clone())
    }

    /// Concatenation without deduplication; origin tags are kept.
    pub fn concat(parts: &[&TransitionDataset], meta: DatasetMeta) -> Result<Self> {
        ensure!(!parts.is_empty(), "concat needs at least one part");
        let (ds, da) = (parts[0].state_dim, parts[0].action_dim);
        ensure!(
            parts.iter().all(|p| p.state_dim == ds && p.action_dim == da),
            "concat: parts have different dimensions"
        );
        let rows = parts.iter().flat_map(|p| p.rows.iter().cloned()).collect();
        Self::new(ds, da, rows, meta)
    }

    /// A 90/10 style split at `frac` of the rows (first part, second part).
    pub fn split(&self, frac: f64) -> Result<(Self, Self)> {
        let cut = ((self.rows.len() as f64) * frac).round() as usize;
        let cut = cut.min(self.rows.len());
        let first: Vec<usize> = (0..cut).collect();
        let second: Vec<usize> = (cut..self.rows.len()).collect();
        Ok((self.subset(&first)?, self.subset(&second)?))
    }

    fn row_width(&self) -> usize {
        2 * self.state_dim + self.action_dim + 2
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = FileMeta {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            rows: self.rows.len(),
            domain: self.meta.domain.clone(),
            config_hash: self.meta.config_hash.clone(),
            seed: self.meta.seed,
            scaler: self.scaler.clone(),
            origins: run_length(&self.rows),
            extra: self.meta.extra.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut payload = Vec::with_capacity(8 * self.row_width() * self.rows.len());
        for t in &self.rows {
            for v in t.s.iter().chain(&t.a).chain([&t.r]).chain(&t.s_next) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let done = if t.done { 1.0f64 } else { 0.0 };
            payload.extend_from_slice(&done.to_le_bytes());
        }
        let crc = crc32fast::hash(&payload);
        let mut out = Vec::with_capacity(14 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(m.to_owned());
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(fail("not a TCED file"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let meta_end = 10 + mlen;
        if bytes.len() < meta_end + 4 {
            return Err(fail("truncated TCED metadata"));
        }
        let meta: FileMeta = serde_json::from_slice(&bytes[10..meta_end])?;
        let width = 2 * meta.state_dim + meta.action_dim + 2;
        let payload_len = 8 * width * meta.rows;
        if bytes.len() != meta_end + payload_len + 4 {
            return Err(fail("TCED payload length does not match row count"));
        }
        let payload = &bytes[meta_end..meta_end + payload_len];
        let stored = u32::from_le_bytes(bytes[meta_end + payload_len..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let origins = expand_runs(&meta.origins, meta.rows)?;
        let vals: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (ds, da) = (meta.state_dim, meta.action_dim);
        let rows = vals
            .chunks_exact(width.max(1))
            .take(meta.rows)
            .zip(origins)
            .map(|(row, origin)| Transition {
                s: row[..ds].to_vec(),
                a: row[ds..ds + da].to_vec(),
                r: row[ds + da],
                s_next: row[ds + da + 1..2 * ds + da + 1].to_vec(),
                done: row[2 * ds + da + 1] != 0.0,
                origin,
            })
            .collect();
        Ok(Self {
            state_dim: ds,
            action_dim: da,
            rows,
            scaler: meta.scaler,
            meta: DatasetMeta {
                domain: meta.domain,
                config_hash: meta.config_hash,
                seed: meta.seed,
                extra: meta.extra,
            },
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Summary statistics used by `inspect`.
    pub fn summary(&self) -> serde_json::Value {
        let states = Scaler::fit(self.state_dim, self.rows.iter().map(|t| t.s.as_slice()));
        let actions = Scaler::fit(self.action_dim, self.rows.iter().map(|t| t.a.as_slice()));
        let r = self.rewards();
        let (rmin, rmax) = r
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let rmean = if r.is_empty() { 0.0 } else { r.iter().sum::<f64>() / r.len() as f64 };
        serde_json::json!({
            "rows": self.len(),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "origins": {
                "source": self.count_origin(Origin::Source),
                "target": self.count_origin(Origin::Target),
                "generated": self.count_origin(Origin::Generated),
            },
            "done": self.rows.iter().filter(|t| t.done).count(),
            "state_mean": states.mean,
            "state_std": states.std,
            "action_mean": actions.mean,
            "action_std": actions.std,
            "reward": {
                "mean": rmean,
                "min": if r.is_empty() { 0.0 } else { rmin },
                "max": if r.is_empty() { 0.0 } else { rmax },
            },
            "scaler": self.scaler,
            "meta": self.meta,
        })
    }
}

/// `Matrix::from_rows` cannot know the width of an empty row set.
fn stack(cols: usize, rows: Vec<&[f64]>) -> Matrix {
    if rows.is_empty() {
        Matrix::zeros(0, cols)
    } else {
        Matrix::from_rows(&rows)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileMeta {
    state_dim: usize,
    action_dim: usize,
    rows: usize,
    domain: String,
    config_hash: String,
    seed: u64,
    scaler: Scaler,
    origins: Vec<(Origin, usize)>,
    #[serde(default)]
    extra: BTreeMap<String, serde_json::Value>,
}

fn run_length(rows: &[Transition]) -> Vec<(Origin, usize)> {
    let mut runs: Vec<(Origin, usize)> = Vec::new();
    for t in rows {
        match runs.last_mut() {
            Some((o, n)) if *o == t.origin => *n += 1,
            _ => runs.push((t.origin, 1)),
        }
    }
    runs
}

fn expand_runs(runs: &[(Origin, usize)], n: usize) -> Result<Vec<Origin>> {
    let out: Vec<Origin> = runs
        .iter()
        .flat_map(|&(o, k)| std::iter::repeat_n(o, k))
        .collect();
    if out.len() != n {
        return Err(Error::Format(format!(
            "origin runs cover {} rows, header says {n}",
            out.len()
        )));
    }
    Ok(out)
}

/// The training-set variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Target data plus generation from a target-only state model.
    SimpleAug,
    /// Generated-only expansion: `D_gen ∪ D_tar`.
    Og,
    /// Source-mixed expansion: `D_src^{λ_mix} ∪ D_gen ∪ D_tar`.
    Sm,
    /// Baseline: `D_tar` alone, no generation.
    TargetOnly,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::SimpleAug => "simple-aug",
            Variant::Og => "og",
            Variant::Sm => "sm",
            Variant::TargetOnly => "target-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simple-aug" | "simpleaug" => Ok(Variant::SimpleAug),
            "og" => Ok(Variant::Og),
            "sm" => Ok(Variant::Sm),
            "target-only" => Ok(Variant::TargetOnly),
            other => Err(Error::contract(format!("unknown variant '{other}'"))),
        }
    }

    pub fn uses_generation(&self) -> bool {
        !matches!(self, Variant::TargetOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub variant: Variant,
    pub lambda_cov: f64,
    pub lambda_mix: f64,
}

impl VariantSpec {
    pub fn new(variant: Variant, lambda_cov: f64, lambda_mix: f64) -> Result<Self> {
        let v = Self {
            variant,
            lambda_cov,
            lambda_mix,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, m) = (self.lambda_cov, self.lambda_mix);
        ensure!(
            (0.0..=1.0).contains(&c) && (0.0..=1.0).contains(&m),
            "lambda_cov and lambda_mix must lie in [0, 1]"
        );
        match self.variant {
            Variant::SimpleAug => ensure!(c == 0.0 && m == 0.0, "simple-aug requires lambda_cov = lambda_mix = 0"),
            Variant::Og => ensure!(m == 0.0 && c > 0.0, "og requires lambda_mix = 0 and lambda_cov > 0"),
            Variant::Sm => ensure!(m > 0.0, "sm requires lambda_mix > 0 (use og for lambda_mix = 0)"),
            Variant::TargetOnly => {}
        }
        Ok(())
    }
}

/// Assembles `D_train` for a variant. Parts are concatenated in the order
/// selected source, generated, target; nothing is deduplicated.
pub fn build_training_set(
    variant: &VariantSpec,
    src: &TransitionDataset,
    tgt: &TransitionDataset,
    gen: Option<&TransitionDataset>,
    selection: Option<&SelectionResult>,
) -> Result<TransitionDataset> {
    variant.validate()?;
    let mut meta = DatasetMeta::new(&tgt.meta().domain, tgt.meta().seed);
    meta.extra.insert("variant".into(), variant.variant.name().into());
    meta.extra.insert("lambda_cov".into(), variant.lambda_cov.into());
    meta.extra.insert("lambda_mix".into(), variant.lambda_mix.into());

    let gen_part = |gen: Option<&TransitionDataset>| -> Result<TransitionDataset> {
        let gen = gen.ok_or_else(|| Error::contract("variant needs a generated dataset"))?;
        if let Some(v) = gen.meta().extra.get("lambda_cov").and_then(|v| v.as_f64()) {
            ensure!(
                v == variant.lambda_cov,
                "generated set was built with lambda_cov = {v}, variant wants {}",
                variant.lambda_cov
            );
        }
        Ok(gen.clone())
    };
    match variant.variant {
        Variant::TargetOnly => TransitionDataset::concat(&[tgt], meta),
        Variant::SimpleAug | Variant::Og => {
            let gen = gen_part(gen)?;
            TransitionDataset::concat(&[&gen, tgt], meta)
        }
        Variant::Sm => {
            let gen = gen_part(gen)?;
            let sel = selection.ok_or_else(|| Error::contract("sm needs a source selection"))?;
            ensure!(
                sel.lambda == variant.lambda_mix,
                "selection was made with lambda = {}, variant wants lambda_mix = {}",
                sel.lambda,
                variant.lambda_mix
            );
            let picked = src.subset(&sel.indices)?;
            TransitionDataset::concat(&[&picked, &gen, tgt], meta)
        }
    }
}
