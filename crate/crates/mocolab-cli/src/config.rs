//! Run configuration: a TOML file materializing the training, evaluation,
//! and analysis settings plus dataset paths. Unknown keys are rejected.
//! Every command writes its resolved config next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mocolab_core::analysis::{CkaConfig, KsConfig};
use mocolab_core::data::SyntheticSpec;
use mocolab_core::error::{Error, Result};
use mocolab_core::eval::{CiMethod, FineTuneConfig, FineTuneMode};
use mocolab_core::tensor::Dtype;
use mocolab_core::train::TrainConfig;

pub const OUTPUT_ROOT_ENV: &str = "MOCOLAB_OUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DtypeChoice {
    #[default]
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DtypeChoice {
    pub fn as_dtype(self) -> Dtype {
        match self {
            DtypeChoice::F32 => Dtype::F32,
            DtypeChoice::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Directory image paths resolve against.
    pub root: PathBuf,
    /// Manifest CSV (path, split, label columns).
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// Label fractions evaluated by the `finetune` command.
    pub fractions: Vec<f64>,
    /// Fine-tune variants evaluated per fraction.
    pub modes: Vec<FineTuneMode>,
    #[serde(flatten)]
    pub inner: FineTuneConfig,
    /// Also run the supervised baseline (random init, E2E).
    pub supervised_baseline: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            fractions: vec![0.01, 0.06, 1.0],
            modes: vec![FineTuneMode::LL, FineTuneMode::E2E],
            inner: FineTuneConfig::default(),
            supervised_baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSection {
    pub replicates: usize,
    pub method: CiMethod,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection {
            replicates: 1000,
            method: CiMethod::NormalOverSqrtN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: DtypeChoice,
    /// Output root; the environment variable MOCOLAB_OUT_ROOT overrides it.
    pub output_root: PathBuf,
    /// Emit plot PNGs with `report`.
    pub plots: bool,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub finetune: FinetuneSection,
    pub probe: FineTuneConfig,
    pub cka: CkaConfig,
    pub ks: KsConfig,
    pub bootstrap: BootstrapSection,
    pub synthetic: SyntheticSpecToml,
}

/// SyntheticSpec mirror with serde support (core keeps the plain struct).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpecToml {
    pub num_classes: usize,
    pub samples: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_level: f64,
}

impl Default for SyntheticSpecToml {
    fn default() -> Self {
        let d = SyntheticSpec::default();
        SyntheticSpecToml {
            num_classes: d.num_classes,
            samples: d.samples,
            image_size: d.image_size,
            channels: d.channels,
            noise_level: d.noise_level,
        }
    }
}

impl SyntheticSpecToml {
    pub fn to_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            samples: self.samples,
            image_size: self.image_size,
            channels: self.channels,
            noise_level: self.noise_level,
            seed,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dtype: DtypeChoice::F32,
            output_root: PathBuf::from("runs"),
            plots: false,
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            finetune: FinetuneSection::default(),
            probe: FineTuneConfig::default(),
            cka: CkaConfig::default(),
            ks: KsConfig::default(),
            bootstrap: BootstrapSection::default(),
            synthetic: SyntheticSpecToml::default(),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Push the master seed into every sub-config and validate everything.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.finetune.inner.seed = self.seed;
        self.probe.seed = self.seed;
        self.train.validate()?;
        self.finetune.inner.metricless_validate()?;
        self.cka.validate()?;
        self.ks.validate()?;
        if self.bootstrap.replicates < 2 {
            return Err(Error::Config("bootstrap.replicates must be >= 2".into()));
        }
        for f in &self.finetune.fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(Error::Config(format!("label fraction {f} outside (0, 1]")));
            }
        }
        if self.finetune.modes.is_empty() {
            return Err(Error::Config("finetune.modes must not be empty".into()));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    /// Output root, with the environment override applied.
    pub fn effective_output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_root.clone(),
        }
    }

    /// Stable FNV-1a hash of the resolved config plus command identity;
    /// embedded in run directory names so different configs never share a
    /// directory.
    pub fn run_hash(&self, command: &str, extras: &[&str]) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.to_toml()?.as_bytes());
        eat(command.as_bytes());
        for e in extras {
            eat(e.as_bytes());
        }
        Ok(h)
    }

    pub fn run_dir(&self, command: &str, extras: &[&str]) -> Result<PathBuf> {
        let hash = self.run_hash(command, extras)?;
        Ok(self
            .effective_output_root()
            .join(format!("{command}-{hash:016x}")))
    }
}

trait MetriclessValidate {
    fn metricless_validate(&self) -> Result<()>;
}

impl MetriclessValidate for FineTuneConfig {
    fn metricless_validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("finetune learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("finetune batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Field-by-field diff of two JSON-serializable configs, as dotted paths.
pub fn config_diff<A: Serialize, B: Serialize>(a: &A, b: &B) -> Vec<String> {
    let va = serde_json::to_value(a).unwrap_or(serde_json::Value::Null);
    let vb = serde_json::to_value(b).unwrap_or(serde_json::Value::Null);
    let mut out = Vec::new();
    walk_diff("", &va, &vb, &mut out);
    out
}

fn walk_diff(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let keys: std::collections::BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
            for k in keys {
                let sub = if path.is_empty() {
                    k.to_string()
                } else {
                    format!("{path}.{k}")
                };
                walk_diff(
                    &sub,
                    ma.get(k).unwrap_or(&Value::Null),
                    mb.get(k).unwrap_or(&Value::Null),
                    out,
                );
            }
        }
        _ if a != b => out.push(format!("{path}: {a} != {b}")),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<RunConfig>("nonsense_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("nonsense_key"));
    }

    #[test]
    fn seed_propagates_on_resolve() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        let resolved = cfg.resolve().unwrap();
        assert_eq!(resolved.train.seed, 99);
        assert_eq!(resolved.probe.seed, 99);
    }

    #[test]
    fn run_dir_depends_on_config_and_command() {
        let cfg = RunConfig::default();
        let a = cfg.run_hash("pretrain", &[]).unwrap();
        let b = cfg.run_hash("probe", &[]).unwrap();
        assert_ne!(a, b);
        let mut cfg2 = RunConfig::default();
        cfg2.seed = 1;
        assert_ne!(a, cfg2.run_hash("pretrain", &[]).unwrap());
    }

    #[test]
    fn diff_lists_dotted_paths() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        a.seed = 1;
        b.train.temperature = 0.2;
        let d = config_diff(&a, &b);
        assert!(d.iter().any(|s| s.starts_with("seed")), "{d:?}");
        assert!(d.iter().any(|s| s.starts_with("train.temperature")), "{d:?}");
    }
}
