//! Experiment configuration: one JSON document, every key optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::predictor::{DEFAULT_HIDDEN, DEFAULT_LR};
use crate::runtime::{RuntimeConfig, DEFAULT_RUNS};
use crate::training::{LossVariant, LossWeights, TrainConfig, DEFAULT_BATCH, DEFAULT_EPOCHS};
use crate::vehicle::{ManeuverSpec, VehicleParams};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub variant: LossVariant,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub nis_target: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainingSection {
            variant: w.variant,
            w1: w.w1,
            w2: w.w2,
            w3: w.w3,
            nis_target: w.nis_target,
            lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH,
            epochs: DEFAULT_EPOCHS,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainingSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            variant: self.variant,
            w1: self.w1,
            w2: self.w2,
            w3: self.w3,
            nis_target: self.nis_target,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub runs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { runs: DEFAULT_RUNS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub eval: u64,
    pub run: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            train: 2,
            eval: 3,
            run: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub vehicle: VehicleParams,
    pub maneuvers: Vec<ManeuverSpec>,
    pub dataset: DatasetSpec,
    pub training: TrainingSection,
    pub runtime: RuntimeConfig,
    pub eval: EvalSection,
    pub seeds: Seeds,
    pub output: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            vehicle: VehicleParams::default(),
            maneuvers: ManeuverSpec::default_set(),
            dataset: DatasetSpec::default(),
            training: TrainingSection::default(),
            runtime: RuntimeConfig::default(),
            eval: EvalSection::default(),
            seeds: Seeds::default(),
            output: PathBuf::from("out"),
        }
    }
}

impl Config {
    pub fn from_json(text: &str, path: &Path) -> Result<Config> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.dataset.validate(&self.maneuvers)?;
        self.training.weights().validate()?;
        self.training.train_config().validate()?;
        if self.training.hidden == 0 {
            return Err(Error::Config("hidden size must be at least 1".into()));
        }
        self.runtime.validate()?;
        if self.eval.runs == 0 {
            return Err(Error::Config("eval.runs must be at least 1".into()));
        }
        Ok(())
    }

    /// Writes `{tool, version, command, config}` into the output directory.
    pub fn write_resolved(&self, dir: &Path, command: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Resolved<'a> {
            tool: &'a str,
            version: &'a str,
            command: &'a str,
            config: &'a Config,
        }
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let doc = Resolved {
            tool: TOOL_NAME,
            version: TOOL_VERSION,
            command,
            config: self,
        };
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}
