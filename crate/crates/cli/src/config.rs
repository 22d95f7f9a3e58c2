//! `PipelineConfig`: one JSON document driving every subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pgm_core::diffusion::DiffusionConfig;
use pgm_core::guidance::GuidanceConfig;
use pgm_core::synth::dataset::DataConfig;
use pgm_core::tracker::TrackerConfig;
use pgm_core::vae::VaeConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CONFIG_SCHEMA: &str = "pgm-config/1";

/// Default artifact locations; relative entries resolve against the config
/// file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub vae: Option<PathBuf>,
    pub latent_denoiser: Option<PathBuf>,
    pub standard_denoiser: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema: String,
    /// Master seed; the data, VAE and diffusion seeds are derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub diffusion: DiffusionConfig,
    pub guidance: GuidanceConfig,
    pub tracker: TrackerConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut cfg = PipelineConfig {
            schema: CONFIG_SCHEMA.into(),
            seed: 0,
            data: DataConfig::default(),
            vae: VaeConfig::default(),
            diffusion: DiffusionConfig::default(),
            guidance: GuidanceConfig::default(),
            tracker: TrackerConfig::default(),
            paths: Paths::default(),
        };
        cfg.set_seed(0);
        cfg
    }
}

const SECTIONS: [&str; 7] = [
    "schema",
    "seed",
    "data",
    "vae",
    "diffusion",
    "guidance",
    "tracker",
];

impl PipelineConfig {
    /// Parse and validate; errors name the offending field as `section.key`.
    pub fn from_json(text: &str, base_dir: &Path) -> CliResult<PipelineConfig> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
        match obj.get("schema") {
            Some(Value::String(s)) if s == CONFIG_SCHEMA => {}
            Some(other) => {
                return Err(CliError::Config(format!(
                    "schema: unsupported version {other}, expected \"{CONFIG_SCHEMA}\""
                )))
            }
            None => {
                return Err(CliError::Config(format!(
                    "schema: missing, expected \"{CONFIG_SCHEMA}\""
                )))
            }
        }
        for key in obj.keys() {
            if !SECTIONS.contains(&key.as_str()) && key != "paths" {
                return Err(CliError::Config(format!("{key}: unknown field")));
            }
        }
        let mut cfg = PipelineConfig::default();
        cfg.seed = section(obj, "seed", cfg.seed)?;
        cfg.data = section(obj, "data", cfg.data)?;
        cfg.vae = section(obj, "vae", cfg.vae)?;
        cfg.diffusion = section(obj, "diffusion", cfg.diffusion)?;
        cfg.guidance = section(obj, "guidance", cfg.guidance)?;
        cfg.tracker = section(obj, "tracker", cfg.tracker)?;
        cfg.paths = section(obj, "paths", cfg.paths)?;
        cfg.paths = cfg.paths.resolved(base_dir);
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<PipelineConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::from_json(&text, dir)
    }

    pub fn validate(&self) -> CliResult<()> {
        let named = |name: &str, r: pgm_core::error::Result<()>| {
            r.map_err(|e| CliError::Config(format!("{name}: {e}")))
        };
        named("data", self.data.validate())?;
        named("vae", self.vae.validate())?;
        named("diffusion", self.diffusion.validate())?;
        named("guidance", self.guidance.validate())?;
        named("tracker", self.tracker.validate())?;
        Ok(())
    }

    /// Set the master seed and the per-stage seeds derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.vae.seed = seed.wrapping_add(1);
        self.diffusion.seed = seed.wrapping_add(2);
    }

    /// SHA-256 over the canonical JSON of everything except artifact paths.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.paths = Paths::default();
        let text = serde_json::to_string(&copy).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn provenance(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_hash".to_string(), self.hash()),
            ("seed".to_string(), self.seed.to_string()),
        ])
    }

    /// Refuse artifacts produced under a different config. Artifacts without
    /// tags are accepted with a warning.
    pub fn check_provenance(&self, what: &str, tags: &BTreeMap<String, String>) -> CliResult<()> {
        match tags.get("config_hash") {
            Some(h) if *h == self.hash() => Ok(()),
            Some(h) => Err(CliError::Config(format!(
                "{what} was produced under config {h}, current config is {}; rerun with the original config and seed",
                self.hash()
            ))),
            None => {
                log::warn!("{what} carries no config hash; reproducibility cannot be checked");
                Ok(())
            }
        }
    }
}

impl Paths {
    fn resolved(self, base: &Path) -> Paths {
        let fix = |p: Option<PathBuf>| p.map(|p| if p.is_relative() { base.join(p) } else { p });
        Paths {
            dataset: fix(self.dataset),
            vae: fix(self.vae),
            latent_denoiser: fix(self.latent_denoiser),
            standard_denoiser: fix(self.standard_denoiser),
        }
    }
}

/// Deserialize one section over its defaults. On failure, retry key by key to
/// report the offending field path.
fn section<T: Serialize + DeserializeOwned>(
    obj: &serde_json::Map<String, Value>,
    name: &str,
    default: T,
) -> CliResult<T> {
    let Some(v) = obj.get(name) else {
        return Ok(default);
    };
    let base = serde_json::to_value(&default).expect("defaults serialize");
    let merged = merge(base.clone(), v.clone());
    match serde_json::from_value::<T>(merged) {
        Ok(t) => Ok(t),
        Err(e) => Err(CliError::Config(format!(
            "{}: {e}",
            locate::<T>(&base, v, name)
        ))),
    }
}

fn merge(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Object(mut b), Value::Object(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Object(b)
        }
        (_, o) => o,
    }
}

fn locate<T: DeserializeOwned>(base: &Value, over: &Value, prefix: &str) -> String {
    let Value::Object(o) = over else {
        return prefix.to_string();
    };
    for (k, v) in o {
        let single = Value::Object(std::iter::once((k.clone(), v.clone())).collect());
        if serde_json::from_value::<T>(merge(base.clone(), single)).is_err() {
            if let (Some(Value::Object(_)), Value::Object(_)) = (base.get(k), v) {
                return deeper(&base[k], v, &format!("{prefix}.{k}"));
            }
            return format!("{prefix}.{k}");
        }
    }
    prefix.to_string()
}

/// Nested objects: report the first key whose value type differs from the
/// default's, or the object itself.
fn deeper(base: &Value, over: &Value, prefix: &str) -> String {
    if let (Value::Object(b), Value::Object(o)) = (base, over) {
        for (k, v) in o {
            match b.get(k) {
                None => return format!("{prefix}.{k}"),
                Some(bv)
                    if std::mem::discriminant(bv) != std::mem::discriminant(v)
                        && !(bv.is_number() && v.is_number()) =>
                {
                    return format!("{prefix}.{k}")
                }
                Some(bv @ Value::Object(_)) => return deeper(bv, v, &format!("{prefix}.{k}")),
                _ => {}
            }
        }
    }
    prefix.to_string()
}
