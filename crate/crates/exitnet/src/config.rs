//! Experiment configuration: a hierarchical key-value (TOML) file with one
//! section per subsystem. Every field has a default; `exitnet config
//! --print-defaults` emits the fully populated file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BlobParams, PartitionConfig};
use crate::error::{Error, Result};
use crate::infer::LatencyModel;
use crate::loss::PersonalisationConfig;
use crate::model::BackboneSpec;
use crate::orchestrator::OrchestratorConfig;
use crate::profile::{default_threshold_grid, CalibrationParams};
use crate::train::GlobalTrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads for batch evaluation; 0 keeps the library default.
    pub threads: usize,
    pub model: ModelSection,
    pub data: DataSection,
    pub global_train: GlobalTrainConfig,
    pub personalisation: PersonalisationConfig,
    pub calibration: CalibrationSection,
    pub inference: InferenceSection,
    pub orchestrator: OrchestratorConfig,
    pub simulation: SimulationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            threads: 0,
            model: ModelSection::default(),
            data: DataSection::default(),
            global_train: GlobalTrainConfig::default(),
            personalisation: PersonalisationConfig::default(),
            calibration: CalibrationSection::default(),
            inference: InferenceSection::default(),
            orchestrator: OrchestratorConfig::default(),
            simulation: SimulationSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    #[serde(flatten)]
    pub backbone: BackboneSpec,
    pub num_exits: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            num_exits: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Synthetic oriented-bar images.
    Blobs,
    /// External IDX image/label archives.
    Idx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub source: DataSource,
    pub num_classes: usize,
    /// Generic training set size for the global model.
    pub train_samples: usize,
    /// Held-out generic test set size.
    pub test_samples: usize,
    /// Pool user datasets are drawn from (kept separate from the generic
    /// training set so personalisation sees fresh samples).
    pub user_pool_samples: usize,
    pub blobs: BlobParams,
    /// IDX archive paths, used when `source = "idx"`.
    pub idx_train_images: String,
    pub idx_train_labels: String,
    pub idx_test_images: String,
    pub idx_test_labels: String,
    pub partition: PartitionConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            num_classes: 10,
            train_samples: 4000,
            test_samples: 1000,
            user_pool_samples: 12000,
            blobs: BlobParams::default(),
            idx_train_images: String::new(),
            idx_train_labels: String::new(),
            idx_test_images: String::new(),
            idx_test_labels: String::new(),
            partition: PartitionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSection {
    #[serde(flatten)]
    pub params: CalibrationParams,
    /// Fraction of the user's stored samples held out for calibration.
    pub calib_fraction: f64,
    pub thresholds: Vec<f32>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            params: CalibrationParams::default(),
            calib_fraction: 0.2,
            thresholds: default_threshold_grid(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSection {
    /// Default confidence threshold for the plain `infer` subcommand.
    pub thr_conf: f32,
    /// Synthetic latency slope; reproducible run to run.
    pub ns_per_flop: f64,
    /// Measure wall-clock time instead of the synthetic model
    /// (non-deterministic; keep off for byte-stable outputs).
    pub wall_clock: bool,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            thr_conf: 0.5,
            ns_per_flop: 0.5,
            wall_clock: false,
        }
    }
}

impl InferenceSection {
    pub fn latency_model(&self) -> LatencyModel {
        if self.wall_clock {
            LatencyModel::WallClock
        } else {
            LatencyModel::FlopProportional {
                ns_per_flop: self.ns_per_flop,
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSection {
    /// Number of sample events to stream.
    pub n_events: usize,
    /// Re-centre the user distribution after this many events (0 = never).
    pub shift_after: usize,
    /// Class-index offset applied to the centre when the shift happens.
    pub shift_offset: usize,
    /// Emit a timer tick every this many events (0 = never).
    pub timer_every: usize,
    /// Emit a device plug-in every this many events (0 = never).
    pub plug_in_every: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            n_events: 3000,
            shift_after: 1000,
            shift_offset: 4,
            timer_every: 0,
            plug_in_every: 500,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::config(format!("cannot read config {path_str}: {e}")))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {path_str}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        if self.model.num_exits == 0 {
            return Err(Error::config("model.num_exits must be >= 1".to_string()));
        }
        if self.data.num_classes != self.model.backbone.num_classes {
            return Err(Error::config(format!(
                "data.num_classes ({}) and model num_classes ({}) disagree",
                self.data.num_classes, self.model.backbone.num_classes
            )));
        }
        self.personalisation.validate()?;
        self.orchestrator.validate()?;
        if !(0.0..1.0).contains(&self.calibration.calib_fraction)
            || self.calibration.calib_fraction == 0.0
        {
            return Err(Error::config(
                "calibration.calib_fraction must be in (0, 1)".to_string(),
            ));
        }
        if self.data.source == DataSource::Idx
            && (self.data.idx_train_images.is_empty() || self.data.idx_train_labels.is_empty())
        {
            return Err(Error::config(
                "idx data source needs idx_train_images and idx_train_labels paths".to_string(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.seed, cfg.seed);
        assert_eq!(parsed.model.num_exits, cfg.model.num_exits);
        assert_eq!(parsed.model.backbone, cfg.model.backbone);
        assert_eq!(parsed.calibration.thresholds, cfg.calibration.thresholds);
        parsed.validate().unwrap();
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: ExperimentConfig = toml::from_str("seed = 99\n[model]\nnum_exits = 2\n").unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.model.num_exits, 2);
        assert_eq!(cfg.data.num_classes, 10);
    }

    #[test]
    fn mismatched_class_counts_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.num_classes = 5;
        assert!(cfg.validate().is_err());
    }
}
