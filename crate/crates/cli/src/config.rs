use std::fs;
use std::path::{Path, PathBuf};

use cdecay::data::SynthConfig;
use cdecay::diagnostics::{PairFilter, RankScore};
use cdecay::model::ModelConfig;
use cdecay::optimizer::{OptimizerConfig, RegConfig, RegMode};
use cdecay::quant::QuantConfig;
use cdecay::regularizers::{CdConfig, TweoConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub eval_images: PathBuf,
    pub eval_labels: PathBuf,
}

/// Exactly one data source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthConfig),
    Idx(IdxPaths),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    #[serde(default)]
    pub pairs: PairFilter,
    /// Blocks eligible for the direction-zeroing intervention; all when absent.
    #[serde(default)]
    pub blocks: Option<Vec<usize>>,
    #[serde(default)]
    pub score: RankScore,
    /// Eval samples used for the surrogate scatter.
    #[serde(default = "default_probe")]
    pub probe_samples: usize,
}

fn default_probe() -> usize {
    64
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            pairs: PairFilter::default(),
            blocks: None,
            score: RankScore::default(),
            probe_samples: default_probe(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataSource,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub reg_mode: RegMode,
    /// Required when `reg_mode` is `cd_decay` or `cd_loss`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cd: Option<CdConfig>,
    /// Required when `reg_mode` is `tweo`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tweo: Option<TweoConfig>,
    /// Loss-form CD only: rescale the term to the previous task loss.
    #[serde(default)]
    pub stabilized: bool,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub run_dir: PathBuf,
}

fn default_batch_size() -> usize {
    32
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn config_err(field: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {e}"))
}

impl ExperimentConfig {
    /// The desk defaults on synthetic data.
    pub fn desk(run_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            data: DataSource::Synth(SynthConfig::default()),
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch_size(),
            reg_mode: RegMode::None,
            cd: None,
            tweo: None,
            stabilized: false,
            quant: QuantConfig::default(),
            diagnose: DiagnoseConfig::default(),
            seeds: default_seeds(),
            run_dir: run_dir.into(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.model.validate().map_err(|e| config_err("model", e))?;
        self.optimizer.validate().map_err(|e| config_err("optimizer", e))?;
        self.quant.validate().map_err(|e| config_err("quant", e))?;
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        match self.reg_mode {
            RegMode::CdDecay | RegMode::CdLoss if self.cd.is_none() => {
                return Err(config_err("cd", format!("required for reg_mode {:?}", self.reg_mode)));
            }
            RegMode::Tweo if self.tweo.is_none() => {
                return Err(config_err("tweo", "required for reg_mode tweo"));
            }
            _ => {}
        }
        if self.stabilized && self.reg_mode != RegMode::CdLoss && self.reg_mode != RegMode::Tweo {
            return Err(config_err("stabilized", "only meaningful for cd_loss or tweo"));
        }
        self.reg_config().validate().map_err(|e| config_err("cd/tweo", e))?;
        self.reg_config()
            .budget(self.optimizer.lambda_wd)
            .map_err(|e| config_err("cd.lambda_cd", e))?;
        if let DataSource::Synth(s) = &self.data {
            s.validate().map_err(|e| config_err("data.synth", e))?;
            if s.classes != self.model.classes {
                return Err(config_err(
                    "data.synth.classes",
                    format!("{} does not match model.classes {}", s.classes, self.model.classes),
                ));
            }
            if s.image_side != self.model.image_side || s.channels != self.model.channels {
                return Err(config_err("data.synth.image_side", "image geometry does not match the model"));
            }
        }
        if let Some(b) = &self.diagnose.blocks {
            if let Some(&bad) = b.iter().find(|&&l| l >= self.model.depth) {
                return Err(config_err("diagnose.blocks", format!("block {bad} out of range")));
            }
        }
        Ok(())
    }

    pub fn reg_config(&self) -> RegConfig {
        RegConfig {
            mode: self.reg_mode,
            cd: self.cd.clone().unwrap_or_default(),
            tweo: self.tweo.clone().unwrap_or_default(),
            stabilized: self.stabilized,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Deserialize with the failing field's path in the error.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.inner()))
    })
}

pub fn from_value<T: DeserializeOwned>(v: serde_json::Value) -> CliResult<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.inner()))
    })
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig = parse_json(&text).map_err(|e| e.context(path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// RFC 7386 merge patch: objects merge recursively, `null` deletes, anything
/// else replaces.
pub fn merge_patch(target: &mut serde_json::Value, patch: &serde_json::Value) {
    use serde_json::Value;
    let Value::Object(p) = patch else {
        *target = patch.clone();
        return;
    };
    if !target.is_object() {
        *target = Value::Object(Default::default());
    }
    let t = target.as_object_mut().expect("object");
    for (k, v) in p {
        if v.is_null() {
            t.remove(k);
        } else {
            merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
        }
    }
}
