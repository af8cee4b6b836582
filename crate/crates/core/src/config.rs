//! Toolkit configuration file (TOML).
//!
//! Every section and key is optional; missing values take the defaults below.
//! See `configs/default.toml` for an annotated copy.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Preconditioning, TrainConfig, UNetArch};
use crate::error::{Error, Result};
use crate::features::ExtractorDescriptor;
use crate::schedule::{ScheduleParams, DEFAULT_BETA_START, DEFAULT_NUM_STEPS};
use crate::scoring::{BranchConfig, BranchKind, ZNorm};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    pub schedule: ScheduleSection,
    pub train: TrainConfig,
    pub pixel: BranchSection,
    pub feature: FeatureSection,
    pub scoring: ScoringSection,
    pub data: DataSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub num_steps: usize,
    pub beta_start: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_NUM_STEPS,
            beta_start: DEFAULT_BETA_START,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub base_width: usize,
    pub levels: usize,
    pub embed_dim: usize,
    pub preconditioning: Preconditioning,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            base_width: 16,
            levels: 2,
            embed_dim: 16,
            preconditioning: Preconditioning::default(),
        }
    }
}

/// Per-branch replacements for fields of the shared `[train]` table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

impl TrainOverrides {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            beta1: self.beta1.unwrap_or(base.beta1),
            beta2: self.beta2.unwrap_or(base.beta2),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchSection {
    /// Noise ceiling of the trained model (terminal σ of its schedule).
    pub sigma_max: f64,
    pub reconstruction: BranchConfig,
    pub network: NetworkSection,
    pub train: TrainOverrides,
}

impl Default for BranchSection {
    fn default() -> Self {
        Self::for_kind(BranchKind::Pixel)
    }
}

impl BranchSection {
    pub fn for_kind(kind: BranchKind) -> Self {
        let reconstruction = match kind {
            BranchKind::Pixel => BranchConfig::pixel(),
            BranchKind::Feature => BranchConfig::feature(),
        };
        Self {
            sigma_max: reconstruction.sigma_max,
            reconstruction,
            network: NetworkSection::default(),
            train: TrainOverrides::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub sigma_max: f64,
    #[serde(deserialize_with = "feature_reconstruction")]
    pub reconstruction: BranchConfig,
    pub network: NetworkSection,
    pub train: TrainOverrides,
    pub extractor: ExtractorDescriptor,
}

impl Default for FeatureSection {
    fn default() -> Self {
        let b = BranchSection::for_kind(BranchKind::Feature);
        Self {
            sigma_max: b.sigma_max,
            reconstruction: b.reconstruction,
            network: b.network,
            train: b.train,
            extractor: ExtractorDescriptor::default(),
        }
    }
}

/// Keys missing from `[feature.reconstruction]` fall back to the feature
/// preset rather than to [`BranchConfig::default`], which is the pixel one.
fn feature_reconstruction<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BranchConfig, D::Error> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Partial {
        sigma_max: Option<f64>,
        solver_steps: Option<usize>,
        noise_draws: Option<usize>,
        noise_seed: Option<u64>,
    }
    let p = Partial::deserialize(d)?;
    let base = BranchConfig::feature();
    Ok(BranchConfig {
        sigma_max: p.sigma_max.unwrap_or(base.sigma_max),
        solver_steps: p.solver_steps.unwrap_or(base.solver_steps),
        noise_draws: p.noise_draws.unwrap_or(base.noise_draws),
        noise_seed: p.noise_seed.unwrap_or(base.noise_seed),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    /// Standardise branch terms before summing. Off by default.
    pub znorm: Option<ZNorm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Side length images are cropped and resized to.
    pub image_size: usize,
    /// Seed of the synthetic dataset generator.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            image_size: 224,
            seed: 0,
        }
    }
}

impl ToolkitConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.pixel_train().validate()?;
        self.feature_train().validate()?;
        self.pixel.reconstruction.validate()?;
        self.feature.reconstruction.validate()?;
        for (name, ceiling, recon) in [
            ("pixel", self.pixel.sigma_max, &self.pixel.reconstruction),
            ("feature", self.feature.sigma_max, &self.feature.reconstruction),
        ] {
            if recon.sigma_max > ceiling {
                return Err(Error::Config(format!(
                    "{name}: reconstruction sigma_max {} exceeds model sigma_max {ceiling}",
                    recon.sigma_max
                )));
            }
        }
        if self.data.image_size == 0 {
            return Err(Error::Config("data.image_size must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule_for(&self, kind: BranchKind) -> ScheduleParams {
        ScheduleParams {
            num_steps: self.schedule.num_steps,
            sigma_max: match kind {
                BranchKind::Pixel => self.pixel.sigma_max,
                BranchKind::Feature => self.feature.sigma_max,
            },
            beta_start: self.schedule.beta_start,
        }
    }

    pub fn pixel_train(&self) -> TrainConfig {
        self.pixel.train.apply(&self.train)
    }

    pub fn feature_train(&self) -> TrainConfig {
        self.feature.train.apply(&self.train)
    }

    pub fn pixel_arch(&self) -> UNetArch {
        let n = &self.pixel.network;
        UNetArch {
            in_channels: 3,
            height: self.data.image_size,
            width: self.data.image_size,
            base_width: n.base_width,
            levels: n.levels,
            embed_dim: n.embed_dim,
            preconditioning: n.preconditioning,
        }
    }

    /// Feature-branch network sized to the fused map of `extractor`.
    pub fn feature_arch(&self, extractor: &ExtractorDescriptor) -> UNetArch {
        let n = &self.feature.network;
        let [c, h, w] = extractor.fused_shape();
        UNetArch {
            in_channels: c,
            height: h,
            width: w,
            base_width: n.base_width,
            levels: n.levels,
            embed_dim: n.embed_dim,
            preconditioning: n.preconditioning,
        }
    }

    /// Extractor descriptor with its input size tied to `data.image_size`.
    pub fn extractor(&self) -> ExtractorDescriptor {
        ExtractorDescriptor {
            input_size: self.data.image_size,
            ..self.feature.extractor.clone()
        }
    }
}
