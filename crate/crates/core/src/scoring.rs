//! Attack score: the sum of the per-branch reconstruction errors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::features::{ChannelStats, FeatureExtractor};
use crate::sampler::{gaussian_like, reconstruct};
use crate::schedule::VarianceSchedule;
use crate::tensor::Tensor;

/// Per-branch reconstruction settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    /// Noise level the input is pushed to before reconstruction.
    pub sigma_max: f64,
    pub solver_steps: usize,
    /// Number of independent noise draws averaged per image.
    pub noise_draws: usize,
    pub noise_seed: u64,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self::pixel()
    }
}

impl BranchConfig {
    pub fn pixel() -> Self {
        Self {
            sigma_max: 8.0,
            solver_steps: 10,
            noise_draws: 1,
            noise_seed: 0,
        }
    }

    pub fn feature() -> Self {
        Self {
            sigma_max: 2.0,
            ..Self::pixel()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_max > 0.0) || self.solver_steps == 0 || self.noise_draws == 0 {
            return Err(Error::Config(format!("invalid branch config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Pixel,
    Feature,
}

impl BranchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BranchKind::Pixel => "pixel",
            BranchKind::Feature => "feature",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub total: f64,
    pub pixel_term: Option<f64>,
    pub feature_term: Option<f64>,
}

/// Mean squared difference per element.
pub fn branch_error(x: &Tensor, x_rec: &Tensor) -> Result<f64> {
    x.ensure_same_shape(x_rec, "branch_error")?;
    Ok(x.mean_sq_diff(x_rec))
}

/// Seed for one image in one branch: SHA-256 of the identifier, the branch
/// name and the configured seed, truncated to 64 bits.
pub fn sample_seed(sample_id: &str, branch: BranchKind, noise_seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(sample_id.as_bytes());
    h.update([0u8]);
    h.update(branch.as_str().as_bytes());
    h.update(noise_seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A trained denoiser together with its schedule and reconstruction settings.
#[derive(Clone, Copy)]
pub struct Branch<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a VarianceSchedule,
    pub cfg: &'a BranchConfig,
}

impl Branch<'_> {
    /// Mean reconstruction error over `cfg.noise_draws` seeded draws.
    pub fn error(&self, x: &Tensor, sample_id: &str, kind: BranchKind) -> Result<f64> {
        self.cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(sample_id, kind, self.cfg.noise_seed));
        let mut acc = 0.0;
        for _ in 0..self.cfg.noise_draws {
            let noise = gaussian_like(x, &mut rng);
            let rec = reconstruct(self.denoiser, self.schedule, x, self.cfg, &noise)?;
            acc += branch_error(x, &rec)?;
        }
        let term = acc / self.cfg.noise_draws as f64;
        if !term.is_finite() {
            return Err(Error::numeric(
                format!("{} branch", kind.as_str()),
                format!("reconstruction error is {term}"),
            ));
        }
        Ok(term)
    }
}

/// Feature branch: the frozen extractor, the normalisation fitted on bona
/// fide training features, and the feature-space denoiser.
#[derive(Clone, Copy)]
pub struct FeatureBranch<'a> {
    pub extractor: &'a FeatureExtractor,
    pub stats: Option<&'a ChannelStats>,
    pub branch: Branch<'a>,
}

impl FeatureBranch<'_> {
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let fused = self.extractor.extract_fused(image)?.data;
        match self.stats {
            Some(s) => s.normalize(&fused),
            None => Ok(fused),
        }
    }
}

/// Optional per-branch standardisation of terms before summing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZNorm {
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub feature_mean: f64,
    pub feature_std: f64,
}

impl ZNorm {
    /// Fits means and standard deviations on bona fide validation scores.
    pub fn fit(bona_scores: &[AttackScore]) -> Result<Self> {
        let stats = |f: &dyn Fn(&AttackScore) -> Option<f64>| -> Result<(f64, f64)> {
            let v: Vec<f64> = bona_scores.iter().filter_map(f).collect();
            if v.len() < 2 {
                return Err(Error::invalid("z-normalisation needs at least two scores per branch"));
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
            Ok((m, var.sqrt().max(1e-12)))
        };
        let (pixel_mean, pixel_std) = stats(&|s| s.pixel_term)?;
        let (feature_mean, feature_std) = stats(&|s| s.feature_term)?;
        Ok(Self {
            pixel_mean,
            pixel_std,
            feature_mean,
            feature_std,
        })
    }
}

/// Scores images with whichever branches are enabled.
pub struct ScoringPipeline<'a> {
    pub pixel: Option<Branch<'a>>,
    pub feature: Option<FeatureBranch<'a>>,
    pub znorm: Option<ZNorm>,
}

impl ScoringPipeline<'_> {
    pub fn score(&self, sample_id: &str, image: &Tensor) -> Result<AttackScore> {
        if self.pixel.is_none() && self.feature.is_none() {
            return Err(Error::invalid("at least one branch must be enabled"));
        }
        let pixel_term = self
            .pixel
            .map(|b| b.error(image, sample_id, BranchKind::Pixel))
            .transpose()?;
        let feature_term = self
            .feature
            .map(|fb| {
                let f = fb.features(image)?;
                fb.branch.error(&f, sample_id, BranchKind::Feature)
            })
            .transpose()?;
        let total = match &self.znorm {
            None => pixel_term.unwrap_or(0.0) + feature_term.unwrap_or(0.0),
            Some(z) => {
                pixel_term.map_or(0.0, |p| (p - z.pixel_mean) / z.pixel_std)
                    + feature_term.map_or(0.0, |f| (f - z.feature_mean) / z.feature_std)
            }
        };
        Ok(AttackScore {
            total,
            pixel_term,
            feature_term,
        })
    }
}
