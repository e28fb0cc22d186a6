//! Run configuration: a TOML file layered over scale presets, then
//! `COUGHGATE_*` environment variables, then `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use coughgate::cnn::{CnnArchitecture, CnnTrainConfig};
use coughgate::eval::{ABLATION_FRACTIONS, DEFAULT_THRESHOLD};
use coughgate::features::StftConfig;
use coughgate::quality::GateThresholds;
use coughgate::ssl::{DownstreamConfig, EncoderConfig, MaskSpec, UpstreamConfig};
use coughgate::svm::SvmParams;
use coughgate::synth::SynthConfig;

pub const ENV_PREFIX: &str = "COUGHGATE_";
/// Environment variables with the prefix that are not config keys.
const ENV_RESERVED: [&str; 2] = ["COUGHGATE_CONFIG", "COUGHGATE_LOG"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Published model sizes and schedules.
    Paper,
    /// Reduced widths and step counts that train in minutes on a CPU.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSection {
    pub arch: CnnArchitecture,
    pub train: CnnTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslSection {
    pub encoder: EncoderConfig,
    pub stft: StftConfig,
    pub mask: MaskSpec,
    pub upstream: UpstreamConfig,
    pub downstream: DownstreamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Worker threads for screening and featurizing; 0 uses every core.
    pub workers: usize,
    pub quality: GateThresholds,
    pub synth: SynthConfig,
    pub svm: SvmParams,
    pub cnn: CnnSection,
    pub ssl: SslSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn preset(scale: Scale) -> Self {
        let toy = scale == Scale::Toy;
        Self {
            scale,
            seed: 0,
            run_dir: PathBuf::from("run"),
            workers: 0,
            quality: GateThresholds::default(),
            synth: SynthConfig::default(),
            svm: SvmParams::default(),
            cnn: CnnSection {
                arch: if toy { CnnArchitecture::toy() } else { CnnArchitecture::full() },
                train: if toy { CnnTrainConfig::toy() } else { CnnTrainConfig::default() },
            },
            ssl: SslSection {
                encoder: if toy { EncoderConfig::toy() } else { EncoderConfig::paper() },
                stft: StftConfig::default(),
                mask: MaskSpec::default(),
                upstream: if toy { UpstreamConfig::toy() } else { UpstreamConfig::paper() },
                downstream: if toy { DownstreamConfig::toy() } else { DownstreamConfig::paper() },
            },
            eval: EvalSection {
                threshold: DEFAULT_THRESHOLD,
                fractions: ABLATION_FRACTIONS.to_vec(),
                seeds: vec![0],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.quality.validate()?;
        self.svm.validate()?;
        self.cnn.arch.validate()?;
        self.cnn.train.validate()?;
        self.ssl.encoder.validate()?;
        self.ssl.stft.validate()?;
        self.ssl.mask.validate()?;
        self.ssl.upstream.validate()?;
        self.ssl.downstream.validate()?;
        if self.ssl.stft.n_bins() != self.ssl.encoder.input_bins {
            bail!(
                "ssl.stft gives {} bins but ssl.encoder.input_bins is {}",
                self.ssl.stft.n_bins(),
                self.ssl.encoder.input_bins
            );
        }
        let s = &self.synth;
        if s.validation_per_class + s.test_per_class > s.n_per_class {
            bail!("synth: validation and test counts exceed n_per_class");
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            bail!("eval.threshold must lie in [0, 1]");
        }
        if self.eval.fractions.is_empty() || self.eval.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            bail!("eval.fractions must be non-empty and within (0, 1]");
        }
        if self.eval.seeds.is_empty() {
            bail!("eval.seeds must not be empty");
        }
        Ok(())
    }

    /// FNV-1a of the canonical JSON form, stored in checkpoint sidecars.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", coughgate::rng::hash_str(&json))
    }
}

/// Parse an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, path: &[&str], value: Value, origin: &str) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| anyhow!("{origin}: empty key"))?;
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("{origin}: {p} is not a section"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Recursively overlay `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Build the effective configuration. `env` holds `(name, value)` pairs
/// already filtered to the prefix; `sets` are `dotted.key=value` strings.
pub fn load(file: Option<&Path>, env: &[(String, String)], sets: &[String]) -> Result<RunConfig> {
    let mut user = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for (name, raw) in env {
        if ENV_RESERVED.contains(&name.as_str()) {
            continue;
        }
        let key = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let path: Vec<&str> = key.split("__").collect();
        set_path(&mut user, &path, parse_value(raw), name)?;
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set {s:?}: expected KEY=VALUE"))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        set_path(&mut user, &path, parse_value(raw.trim()), &format!("--set {key}"))?;
    }

    let scale = match user.get("scale") {
        None => Scale::Paper,
        Some(v) => v.clone().try_into().context("scale must be \"paper\" or \"toy\"")?,
    };
    let mut base = Table::try_from(RunConfig::preset(scale)).context("serializing presets")?;
    merge(&mut base, user);
    let cfg: RunConfig = base.try_into().context("invalid configuration")?;
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

pub fn env_overrides() -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    v.sort();
    v
}
