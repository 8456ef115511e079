//! Run configuration: one JSON document with a required version key.
//! Unknown keys are rejected everywhere; every range is validated before a
//! command does any work.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use tscl_core::data::{self, SeriesDataset, SynthSpec};
use tscl_core::loss::DistillAxis;
use tscl_core::model::ModelDims;
use tscl_core::trainer::{Objective, TrainConfig};
use tscl_core::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

fn default_date_column() -> String {
    "date".to_string()
}

fn default_ratios() -> (f64, f64, f64) {
    (0.6, 0.2, 0.2)
}

fn default_instances() -> usize {
    1
}

fn default_lookback() -> usize {
    24
}

fn default_horizons() -> Vec<usize> {
    vec![24]
}

/// The 13-value regularization search space.
pub fn default_alpha_grid() -> Vec<f64> {
    vec![0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0]
}

fn default_temperature() -> f64 {
    1.0
}

fn default_distill_axis() -> DistillAxis {
    DistillAxis::Time
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataSection,
    #[serde(default = "default_ratios")]
    pub split_ratios: (f64, f64, f64),
    pub train: TrainSection,
    pub model: ModelSection,
    #[serde(default)]
    pub forecast: ForecastSection,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default = "default_date_column")]
    pub date_column: String,
    #[serde(default)]
    pub synthetic: Option<SynthSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(default = "default_instances")]
    pub instances: usize,
    pub length: usize,
    pub channels: usize,
    pub sines: Vec<data::SineComponent>,
    pub noise_std: f64,
    pub ar_coeff: f64,
}

impl SynthSection {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            sines: self.sines.clone(),
            noise_std: self.noise_std,
            ar_coeff: self.ar_coeff,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub momentum: f64,
    pub keep_prob: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub crop_len: usize,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub intra_student_negatives: bool,
    #[serde(default = "default_distill_axis")]
    pub distill_axis: DistillAxis,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub proj_hidden: usize,
    pub repr_dim: usize,
    pub conv_width: usize,
    pub blocks: usize,
    pub kernel: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSection {
    #[serde(default = "default_lookback")]
    pub lookback: usize,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    /// Also write metrics denormalized back to the raw data scale.
    #[serde(default)]
    pub denormalized_report: bool,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            lookback: default_lookback(),
            horizons: default_horizons(),
            alpha_grid: default_alpha_grid(),
            denormalized_report: false,
        }
    }
}

impl RunConfig {
    /// Parse and range-check a config document. Nothing is written to disk
    /// before this succeeds.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::Param(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Param(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        match (&self.data.csv_path, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Param(
                    "data section has both csv_path and synthetic; pick one".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Param(
                    "data section needs either csv_path or synthetic".into(),
                ))
            }
            _ => {}
        }
        if let Some(s) = &self.data.synthetic {
            // surface range errors before any generation happens
            data::synth_generate(0, s.instances.max(1), 1, s.channels.max(1), &s.spec())?;
            if s.instances == 0 || s.length == 0 || s.channels == 0 {
                return Err(Error::Param("synthetic extents must all be >= 1".into()));
            }
        }
        if self.forecast.horizons.is_empty() {
            return Err(Error::Param("horizons list is empty".into()));
        }
        if self.forecast.lookback == 0 || self.forecast.horizons.iter().any(|&p| p == 0) {
            return Err(Error::Param("lookback and horizons must be >= 1".into()));
        }
        if self.forecast.alpha_grid.is_empty() {
            return Err(Error::Param("alpha grid is empty".into()));
        }
        if self.forecast.alpha_grid.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Param("alpha grid values must be finite and >= 0".into()));
        }
        // full train-section range validation via the owning module, with a
        // placeholder channel count (the real one comes from the data)
        self.train_config(1)?.validate()
    }

    /// Assemble the trainer configuration for a dataset with `channels`
    /// input channels, applying an optional seed override.
    pub fn train_config(&self, channels: usize) -> Result<TrainConfig> {
        Ok(TrainConfig {
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            lambda: self.train.lambda,
            momentum: self.train.momentum,
            keep_prob: self.train.keep_prob,
            temperature: self.train.temperature,
            crop_len: self.train.crop_len,
            seed: self.seed,
            dims: ModelDims {
                input_channels: channels,
                proj_hidden: self.model.proj_hidden,
                repr_dim: self.model.repr_dim,
                conv_width: self.model.conv_width,
                blocks: self.model.blocks,
                kernel: self.model.kernel,
            },
            objective: self.train.objective,
            intra_student_negatives: self.train.intra_student_negatives,
            distill_axis: self.train.distill_axis,
        })
    }

    /// Load or generate the raw dataset, then split and normalize it.
    pub fn load_dataset(&self) -> Result<SeriesDataset> {
        let raw = self.load_raw_dataset()?;
        raw.split(self.split_ratios)?.normalize()
    }

    /// The dataset before splitting/normalization (what `synth` exports).
    pub fn load_raw_dataset(&self) -> Result<SeriesDataset> {
        match (&self.data.csv_path, &self.data.synthetic) {
            (Some(path), None) => data::load_csv(path, &self.data.date_column),
            (None, Some(s)) => {
                data::synth_generate(self.seed, s.instances, s.length, s.channels, &s.spec())
            }
            _ => Err(Error::Param("invalid data section".into())),
        }
    }
}
