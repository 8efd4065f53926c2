//! Experiment configuration in a flat `key = value` format with dotted
//! namespaces, e.g. `sampler.K = 500`.
//!
//! Parsing starts from a profile's defaults and applies each line in order.
//! Values are typed by the default they replace; lists are comma separated
//! and `none` clears an optional value. Keys under `domain.source.` and
//! `domain.target.` override fields of the named domain pair.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::{Variant, VariantSpec};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::domains::{DomainPair, Tier};
use crate::error::{ensure, Error, Result};
use crate::generator::{GenConfig, TrainConfig, Widths};
use crate::policy::IqlConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::contract(format!("unknown profile '{other}' (desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSection {
    pub pair: String,
    /// `source.<field>` / `target.<field>` overrides, raw text values.
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub source_size: usize,
    pub target_size: usize,
    /// Extra target rollouts used only for error reporting.
    pub holdout_size: usize,
    pub source_tier: Tier,
    pub target_tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TceSection {
    pub variant: Variant,
    pub lambda_cov: f64,
    pub lambda_mix: f64,
    pub n_generate: Option<usize>,
    /// Upper bound on the generated count (applied after the sizing rule).
    pub max_generate: Option<usize>,
    pub one_stage: bool,
    pub reward_uses_action: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSection {
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub alpha_min: f64,
    pub alpha_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSection {
    #[serde(rename = "K")]
    pub steps: usize,
    pub snr: f64,
    pub corrector_steps: usize,
    pub chunk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSection {
    pub score_hidden: usize,
    pub score_embed: usize,
    pub score_blocks: usize,
    pub aux_hidden: usize,
    pub aux_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    pub mix_steps: usize,
    pub tran_steps: usize,
    pub aux_steps: usize,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySection {
    /// Random tabular instances checked alongside a run; 0 disables.
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub domain: DomainSection,
    pub data: DataSection,
    pub tce: TceSection,
    pub selection: SelectionSection,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub iql: IqlConfig,
    pub eval: EvalSection,
    pub theory: TheorySection,
}

impl ExperimentConfig {
    /// Full-scale values: network widths, learning rates, and step counts
    /// as published, `K = 500`.
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            seed: 0,
            domain: DomainSection {
                pair: "drift-large".into(),
                overrides: BTreeMap::new(),
            },
            data: DataSection {
                source_size: 20_000,
                target_size: 500,
                holdout_size: 500,
                source_tier: Tier::Medium,
                target_tier: Tier::Medium,
            },
            tce: TceSection {
                variant: Variant::Og,
                lambda_cov: 0.2,
                lambda_mix: 0.0,
                n_generate: None,
                max_generate: None,
                one_stage: false,
                reward_uses_action: false,
            },
            selection: SelectionSection { normalize: true },
            schedule: ScheduleSection {
                alpha_min: 0.1,
                alpha_max: 20.0,
            },
            sampler: SamplerSection {
                steps: 500,
                snr: 0.16,
                corrector_steps: 1,
                chunk: 256,
            },
            net: NetSection {
                score_hidden: 256,
                score_embed: 128,
                score_blocks: 4,
                aux_hidden: 256,
                aux_blocks: 3,
            },
            train: TrainSection {
                lr: 1e-4,
                batch: 128,
                mix_steps: 10_000,
                tran_steps: 5_000,
                aux_steps: 1_000,
                log_every: 100,
            },
            iql: IqlConfig::default(),
            eval: EvalSection { episodes: 10 },
            theory: TheorySection { instances: 0 },
        }
    }

    /// Laptop-scale values: far fewer gradient steps, narrower networks with
    /// a higher learning rate, `K = 100`, and at most 5 000 generated rows.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.profile = Profile::Desk;
        c.sampler.steps = 100;
        c.tce.max_generate = Some(5_000);
        c.net = NetSection {
            score_hidden: 64,
            score_embed: 32,
            score_blocks: 2,
            aux_hidden: 64,
            aux_blocks: 2,
        };
        c.train.lr = 1e-3;
        c.train.mix_steps = 1_000;
        c.train.tran_steps = 1_000;
        c.train.aux_steps = 500;
        c.iql.steps = 5_000;
        c.iql.bc_steps = 1_000;
        c.iql.hidden = 64;
        c.iql.lr = 1e-3;
        c.iql.log_every = 1_000;
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn variant_spec(&self) -> Result<VariantSpec> {
        VariantSpec::new(self.tce.variant, self.tce.lambda_cov, self.tce.lambda_mix)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant_spec()?;
        self.schedule()?;
        self.sampler().validate()?;
        self.gen_config().validate()?;
        self.iql.validate()?;
        self.domain_pair()?;
        ensure!(self.data.target_size > 0, "data.target_size must be positive");
        ensure!(self.eval.episodes > 0, "eval.episodes must be positive");
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.alpha_min, self.schedule.alpha_max)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            corrector_steps: self.sampler.corrector_steps,
            snr: self.sampler.snr,
            prior_std: None,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        let t = |steps: usize| TrainConfig {
            steps,
            batch_size: self.train.batch,
            lr: self.train.lr,
            log_every: self.train.log_every,
        };
        GenConfig {
            lambda_cov: self.tce.lambda_cov,
            lambda_mix: self.tce.lambda_mix,
            n_generate: self.tce.n_generate,
            mix_train: t(self.train.mix_steps),
            tran_train: t(self.train.tran_steps),
            aux_train: t(self.train.aux_steps),
            widths: Widths {
                score_hidden: self.net.score_hidden,
                score_embed: self.net.score_embed,
                score_blocks: self.net.score_blocks,
                aux_hidden: self.net.aux_hidden,
                aux_blocks: self.net.aux_blocks,
            },
            reward_uses_action: self.tce.reward_uses_action,
            one_stage: self.tce.one_stage,
            normalize_selection: self.selection.normalize,
            chunk: self.sampler.chunk,
        }
    }

    /// Number of rows to generate for a source set of `n_src` rows.
    pub fn generate_count(&self, n_src: usize) -> usize {
        let n = self.gen_config().generate_count(n_src);
        self.tce.max_generate.map_or(n, |m| n.min(m))
    }

    /// The named pair with overrides applied.
    pub fn domain_pair(&self) -> Result<DomainPair> {
        let mut pair = DomainPair::shipped(&self.domain.pair)?;
        if self.domain.overrides.is_empty() {
            return Ok(pair);
        }
        let mut src = serde_json::to_value(&pair.source)?;
        let mut tgt = serde_json::to_value(&pair.target)?;
        for (key, raw) in &self.domain.overrides {
            let (side, field) = key
                .split_once('.')
                .ok_or_else(|| Error::contract(format!("bad domain override key 'domain.{key}'")))?;
            let obj = match side {
                "source" => &mut src,
                "target" => &mut tgt,
                _ => return Err(Error::contract(format!("bad domain override key 'domain.{key}'"))),
            };
            let slot = obj
                .get_mut(field)
                .ok_or_else(|| Error::contract(format!("domain has no field '{field}'")))?;
            *slot = parse_like(slot, raw, &format!("domain.{key}"))?;
        }
        pair.source = serde_json::from_value(src)?;
        pair.target = serde_json::from_value(tgt)?;
        pair.validate()?;
        Ok(pair)
    }

    /// Stable hash of the serialized config (FNV-1a, hex).
    pub fn hash(&self) -> String {
        let text = self.to_text();
        format!("{:016x}", crate::rng::labeled_seed(0, &text))
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        let v = serde_json::to_value(self).expect("config serializes");
        flatten("", &v, &mut out);
        out.retain(|k, _| !k.starts_with("domain.overrides"));
        for (k, val) in &self.domain.overrides {
            out.insert(format!("domain.{k}"), val.clone());
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_kv()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses text on top of the profile named by its `profile` key (or
    /// `default_profile` when absent).
    pub fn parse(text: &str, default_profile: Profile) -> Result<Self> {
        let lines = parse_lines(text)?;
        let profile = match lines.iter().rev().find(|(k, _)| k == "profile") {
            Some((_, v)) => Profile::parse(v)?,
            None => default_profile,
        };
        let mut cfg = Self::for_profile(profile);
        for (k, v) in &lines {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, default_profile: Profile) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::contract(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, default_profile)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("domain.") {
            if rest.starts_with("source.") || rest.starts_with("target.") {
                self.domain.overrides.insert(rest.to_owned(), raw.to_owned());
                return Ok(());
            }
        }
        let mut v = serde_json::to_value(&*self)?;
        let mut slot = &mut v;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::contract(format!("unknown config key '{key}'")))?;
        }
        if slot.is_object() {
            return Err(Error::contract(format!("config key '{key}' names a section")));
        }
        *slot = parse_like(slot, raw, key)?;
        *self = serde_json::from_value(v)
            .map_err(|e| Error::contract(format!("invalid value '{raw}' for '{key}': {e}")))?;
        Ok(())
    }
}

fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("config line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), scalar_text(other));
        }
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(scalar_text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Parses `raw` into the JSON type of `like`; untyped slots (`null`) take a
/// number, a boolean, or a string, in that order.
fn parse_like(like: &Value, raw: &str, key: &str) -> Result<Value> {
    let bad = || Error::contract(format!("invalid value '{raw}' for '{key}'"));
    if raw == "none" {
        return Ok(Value::Null);
    }
    let number = |s: &str| -> Result<Value> {
        if let Ok(i) = s.parse::<u64>() {
            return Ok(Value::from(i));
        }
        if let Ok(i) = s.parse::<i64>() {
            return Ok(Value::from(i));
        }
        let f: f64 = s.parse().map_err(|_| bad())?;
        serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(bad)
    };
    match like {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad()),
        Value::Number(_) => number(raw),
        Value::String(_) => Ok(Value::String(raw.to_owned())),
        Value::Array(items) => {
            if raw.is_empty() {
                return Ok(Value::Array(vec![]));
            }
            let proto = items.first().cloned().unwrap_or(Value::from(0.0));
            raw.split(',')
                .map(|p| parse_like(&proto, p.trim(), key))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        Value::Null => number(raw)
            .or_else(|_| raw.parse::<bool>().map(Value::Bool))
            .or_else(|_| Ok(Value::String(raw.to_owned()))),
        Value::Object(_) => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_profiles() {
        for p in [Profile::Desk, Profile::Paper] {
            let c = ExperimentConfig::for_profile(p);
            let back = ExperimentConfig::parse(&c.to_text(), Profile::Desk).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn overrides_and_options() {
        let text = "
            # comment
            profile = desk
            sampler.K = 250
            tce.variant = sm
            tce.lambda_mix = 0.1
            tce.n_generate = 1234
            iql.beta = 0.5
            domain.pair = drift-small
            domain.source.c = 0, 0, 0, -0.3
        ";
        let c = ExperimentConfig::parse(text, Profile::Paper).unwrap();
        assert_eq!(c.sampler.steps, 250);
        assert_eq!(c.tce.variant, Variant::Sm);
        assert_eq!(c.tce.n_generate, Some(1234));
        assert_eq!(c.iql.beta, 0.5);
        assert_eq!(c.domain_pair().unwrap().source.c, vec![0.0, 0.0, 0.0, -0.3]);
        let back = ExperimentConfig::parse(&c.to_text(), Profile::Paper).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn inconsistent_variant_rejected() {
        let err = ExperimentConfig::parse("tce.variant = og\ntce.lambda_mix = 0.3", Profile::Desk);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ExperimentConfig::parse("sampler.Q = 1", Profile::Desk).is_err());
        assert!(ExperimentConfig::parse("sampler = 1", Profile::Desk).is_err());
        assert!(ExperimentConfig::parse("no equals sign", Profile::Desk).is_err());
    }

    #[test]
    fn sizing_with_cap() {
        let c = ExperimentConfig::desk();
        assert_eq!(c.generate_count(20_000), 5_000);
        assert_eq!(c.generate_count(1_000), 1_000);
    }
}
