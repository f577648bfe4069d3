//! Run configuration (JSON) with defaults for every field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_json, write_json};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::nocs::{NoiseLevel, NoiseParams, DEFAULT_BINS};
use crate::refiner::RefinerConfig;
use crate::synth::{Category, GeneratorOptions, Script};
use crate::warpfield::WarpConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub categories: Vec<Category>,
    pub scripts: Vec<Script>,
    /// Garment instances per category.
    pub instances: usize,
    /// Sequences per (instance, script).
    pub sequences_per_instance: usize,
    pub frames: usize,
    pub template_resolution: usize,
    /// Instance-level train/val/test ratios.
    pub split_ratios: [f64; 3],
    pub generator: GeneratorOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            categories: vec![Category::Shirt],
            scripts: vec![Script::FoldLr, Script::FoldUd],
            instances: 10,
            sequences_per_instance: 1,
            frames: 20,
            template_resolution: 12,
            split_ratios: [0.8, 0.1, 0.1],
            generator: GeneratorOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub refiner: RefinerConfig,
    pub warp: WarpConfig,
}

impl Default for ModelConfig {
    /// Desk-scale widths: the published widths divided by 4.
    fn default() -> Self {
        Self::scaled(4, 32)
    }
}

impl ModelConfig {
    /// Published widths.
    pub fn full_size() -> Self {
        Self::scaled(1, 32)
    }

    /// All channel widths divided by `div`, warp grid `grid`.
    pub fn scaled(div: usize, grid: usize) -> Self {
        let encoder = EncoderConfig::default().scaled(div);
        let fusion = FusionConfig::default().scaled(div);
        let warp = WarpConfig { grid, ..WarpConfig::default().scaled(div) };
        Self { encoder, fusion, refiner: RefinerConfig::default().scaled(div), warp }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.out_dim != self.fusion.feat_dim {
            return Err(Error::Config(format!(
                "encoder output width {} must equal the fusion feature width {}",
                self.encoder.out_dim, self.fusion.feat_dim
            )));
        }
        if self.warp.in_channels != self.fusion.out_dim() {
            return Err(Error::Config(format!(
                "warp input width {} must equal the fusion output width {}",
                self.warp.in_channels,
                self.fusion.out_dim()
            )));
        }
        if !(self.encoder.voxel_size > 0.0) {
            return Err(Error::Config("voxel size must be positive".into()));
        }
        self.fusion.validate()?;
        self.warp.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub nocs: f64,
    pub refine: f64,
    pub mesh: f64,
    pub warp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { nocs: 1.0, refine: 1.0, mesh: 1.0, warp: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: String,
    pub learning_rate: f64,
    /// Frame pairs per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub pc_samples: usize,
    pub mesh_samples: usize,
    /// Canonical surface samples supervised through the warp field.
    pub warp_queries: usize,
    pub loss_weights: LossWeights,
    /// Augmentation applied to the previous-frame NOCS and the input mesh.
    pub noise: NoiseParams,
    /// Scatter features at ground-truth (instead of predicted) NOCS.
    pub scatter_with_gt_nocs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: "adam".into(),
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 30,
            pc_samples: 4000,
            mesh_samples: 6000,
            warp_queries: 6000,
            loss_weights: LossWeights::default(),
            noise: NoiseParams::training(),
            scatter_with_gt_nocs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer != "adam" {
            return Err(Error::Config(format!("unsupported optimizer {:?} (only \"adam\")", self.optimizer)));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        if self.pc_samples == 0 || self.mesh_samples == 0 || self.warp_queries == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        self.noise.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub pc_samples: usize,
    pub mesh_samples: usize,
    /// Frames with mesh refinement; `None` picks it from the script family.
    pub mesh_refine_budget: Option<usize>,
    /// Mean ground-truth vertex displacement (m) below which a frame counts
    /// as static and is dropped from evaluation runs.
    pub static_threshold: f64,
    /// Noise level of the perturbed first-frame pose.
    pub init_noise: NoiseLevel,
    /// A_d thresholds in centimeters.
    pub thresholds_cm: Vec<f64>,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            pc_samples: 4000,
            mesh_samples: 6000,
            mesh_refine_budget: None,
            static_threshold: 1e-3,
            init_noise: NoiseLevel::X1,
            thresholds_cm: vec![3.0, 5.0, 10.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub bins: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub track: TrackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bins: DEFAULT_BINS,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            track: TrackConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins != self.model.fusion.bins {
            return Err(Error::Config(format!("bins {} differ from the model's {}", self.bins, self.model.fusion.bins)));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_setup() {
        let c = RunConfig::default();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!((c.train.pc_samples, c.train.mesh_samples), (4000, 6000));
        assert_eq!(c.data.split_ratios, [0.8, 0.1, 0.1]);
        assert_eq!(c.bins, 64);
        let full = ModelConfig::full_size();
        assert_eq!(full.encoder.out_dim, 64);
        assert_eq!(full.fusion.out_dim(), 128);
        assert_eq!(full.warp.grid, 32);
        c.validate().unwrap();
        full.validate().unwrap();
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.train.learning_rate = 3.3e-4;
        c.track.mesh_refine_budget = Some(3);
        let a = c.to_json();
        let b = RunConfig::from_json(&a).unwrap().to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn partial_config_fills_defaults_and_bad_values_fail() {
        let c = RunConfig::from_json(r#"{"seed": 5, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 16);
        assert!(RunConfig::from_json(r#"{"train": {"optimizer": "sgd"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"warp": {"grid": 10}}}"#).is_err());
        assert!(RunConfig::from_json("{not json").is_err());
    }
}
