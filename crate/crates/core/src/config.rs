//! Model and training configuration, with named size profiles.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{BOX_FURNITURE_CLASS, BOX_FURNITURE_CONNECTIONS, BOX_FURNITURE_PARTS};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::kernel::{DEFAULT_ALPHA_END, DEFAULT_ALPHA_START, DEFAULT_STEPS};
use crate::sampler::{SamplerConfig, DEFAULT_K};
use crate::stylizer::StylizerConfig;

/// Named size presets. `Full` keeps the reference architecture; `Desk`
/// shrinks widths and depths so training fits on one CPU core; `Smoke` is
/// smaller still, for quick checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Desk,
    Smoke,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            "smoke" => Ok(Self::Smoke),
            other => Err(Error::InvalidArgument(format!("unknown profile {other:?} (full|desk|smoke)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub class_id: String,
    pub m: usize,
    pub part_names: Vec<String>,
    pub connections: Vec<[usize; 2]>,
    /// Points per shape used for training and as the default output size.
    pub point_budget: usize,
    pub steps: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub stylizer: StylizerConfig,
    pub sampler: SamplerConfig,
    pub denoiser: DenoiserConfig,
    /// Bound on the canonical-frame clean point implied during sampling;
    /// `None` runs the unbounded chain.
    #[serde(default = "default_sample_clip")]
    pub sample_clip: Option<f64>,
}

pub const DEFAULT_SAMPLE_CLIP: f64 = 4.0;

fn default_sample_clip() -> Option<f64> {
    Some(DEFAULT_SAMPLE_CLIP)
}

/// Per-class noise amplifier for the transformation sampler.
pub fn default_lambda(class_id: &str) -> f64 {
    match class_id {
        "chair" => 100.0,
        "airplane" | "car" => 50.0,
        _ => 10.0,
    }
}

/// Per-class weight of the latent KL term.
pub fn default_lambda1(class_id: &str) -> f64 {
    match class_id {
        "chair" => 5e-4,
        _ => 1e-3,
    }
}

impl ModelConfig {
    pub fn for_class(profile: Profile, class_id: &str, part_names: Vec<String>, connections: Vec<[usize; 2]>) -> Self {
        let m = part_names.len();
        let lambda = default_lambda(class_id);
        let (stylizer, sampler, denoiser, budget) = match profile {
            Profile::Full => (
                StylizerConfig {
                    latent_dim: 256,
                    point_hidden: vec![128, 256, 512],
                    head_hidden: vec![256, 128],
                    flow_layers: 14,
                    flow_hidden: vec![128, 256, 256, 128],
                },
                SamplerConfig { noise_dim: 32, lambda, width: 256, layers: 5, heads: 8, ff_hidden: 512, dropout: 0.0 },
                DenoiserConfig { width: 128, layers: 5, heads: 8, ff_hidden: 256, dropout: 0.2, time_dim: 32 },
                2048,
            ),
            Profile::Desk => (
                StylizerConfig { latent_dim: 32, point_hidden: vec![32, 64], head_hidden: vec![64], flow_layers: 4, flow_hidden: vec![64, 64] },
                SamplerConfig { noise_dim: 32, lambda, width: 64, layers: 3, heads: 4, ff_hidden: 128, dropout: 0.0 },
                DenoiserConfig { width: 64, layers: 3, heads: 4, ff_hidden: 128, dropout: 0.0, time_dim: 16 },
                128,
            ),
            Profile::Smoke => (
                StylizerConfig { latent_dim: 16, point_hidden: vec![16, 32], head_hidden: vec![32], flow_layers: 2, flow_hidden: vec![32] },
                SamplerConfig { noise_dim: 8, lambda, width: 32, layers: 2, heads: 2, ff_hidden: 64, dropout: 0.0 },
                DenoiserConfig { width: 32, layers: 2, heads: 2, ff_hidden: 64, dropout: 0.0, time_dim: 8 },
                128,
            ),
        };
        Self {
            class_id: class_id.to_string(),
            m,
            part_names,
            connections,
            point_budget: budget,
            steps: DEFAULT_STEPS,
            alpha_start: DEFAULT_ALPHA_START,
            alpha_end: DEFAULT_ALPHA_END,
            stylizer,
            sampler,
            denoiser,
            sample_clip: default_sample_clip(),
        }
    }

    pub fn box_furniture(profile: Profile) -> Self {
        Self::for_class(
            profile,
            BOX_FURNITURE_CLASS,
            BOX_FURNITURE_PARTS.iter().map(|s| s.to_string()).collect(),
            BOX_FURNITURE_CONNECTIONS.to_vec(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.sample_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("sample_clip must be positive");
        }
        if self.m == 0 || self.part_names.len() != self.m {
            return bad("part_names must list m >= 1 parts");
        }
        if self.connections.iter().any(|c| c[0] >= self.m || c[1] >= self.m) {
            return bad("connection index out of range");
        }
        if self.point_budget == 0 || self.stylizer.latent_dim == 0 || self.sampler.noise_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.sampler.width % self.sampler.heads != 0 || self.denoiser.width % self.denoiser.heads != 0 {
            return bad("attention width must be divisible by the head count");
        }
        if !(self.sampler.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(0.0..1.0).contains(&self.denoiser.dropout) || !(0.0..1.0).contains(&self.sampler.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub lr: f64,
    /// Learning rate reached at the last stage-1 epoch; decay starts at the midpoint.
    pub lr_final: f64,
    pub lambda1: f64,
    pub stage2_epochs: usize,
    pub stage2_lr: f64,
    pub lambda2: f64,
    pub recache_every: usize,
    pub k: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: Option<f64>,
    /// Train the sampler by plain regression from unselected random codes (ablation).
    pub direct_regression: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk, BOX_FURNITURE_CLASS)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile, class_id: &str) -> Self {
        let base = Self {
            seed: 0,
            batch_size: 128,
            stage1_epochs: 8000,
            lr: 2e-3,
            lr_final: 1e-4,
            lambda1: default_lambda1(class_id),
            stage2_epochs: 4000,
            stage2_lr: 2e-4,
            lambda2: 1.0,
            recache_every: 50,
            k: DEFAULT_K,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: Some(10.0),
            direct_regression: false,
        };
        match profile {
            Profile::Full => base,
            Profile::Desk => Self { batch_size: 16, stage1_epochs: 600, stage2_epochs: 300, stage2_lr: 1e-3, ..base },
            Profile::Smoke => Self { batch_size: 16, stage1_epochs: 200, stage2_epochs: 100, stage2_lr: 1e-3, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.batch_size == 0 || self.k == 0 || self.recache_every == 0 {
            return bad("batch_size, k and recache_every must be positive");
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.stage2_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 > 0.0) {
            return bad("loss weights must be non-negative (lambda2 positive)");
        }
        Ok(())
    }

    /// Stage-1 learning rate at `epoch` (0-based): constant for the first
    /// half, then linear down to `lr_final` at the last epoch.
    pub fn stage1_lr(&self, epoch: usize) -> f64 {
        let total = self.stage1_epochs.max(1);
        let start = total / 2;
        if epoch < start || total <= 1 {
            return self.lr;
        }
        let span = (total - 1 - start).max(1) as f64;
        let frac = ((epoch - start) as f64 / span).min(1.0);
        self.lr + (self.lr_final - self.lr) * frac
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_defaults() {
        assert_eq!(default_lambda1("chair"), 5e-4);
        assert_eq!(default_lambda1("lamp"), 1e-3);
        assert_eq!(default_lambda("chair"), 100.0);
        assert_eq!(default_lambda("airplane"), 50.0);
        assert_eq!(default_lambda(BOX_FURNITURE_CLASS), 10.0);
        let full = TrainConfig::for_profile(Profile::Full, "chair");
        assert_eq!((full.batch_size, full.stage1_epochs, full.k, full.recache_every), (128, 8000, 20, 50));
        assert_eq!((full.lr, full.lr_final, full.lambda2, full.stage2_lr), (2e-3, 1e-4, 1.0, 2e-4));
    }

    #[test]
    fn full_architecture_dims() {
        let c = ModelConfig::box_furniture(Profile::Full);
        assert_eq!(c.stylizer.latent_dim, 256);
        assert_eq!(c.stylizer.flow_layers, 14);
        assert_eq!((c.sampler.noise_dim, c.sampler.layers, c.sampler.width / c.sampler.heads), (32, 5, 32));
        assert_eq!((c.denoiser.width, c.denoiser.layers, c.denoiser.width / c.denoiser.heads), (128, 5, 16));
        assert_eq!(c.denoiser.dropout, 0.2);
        for p in [Profile::Full, Profile::Desk, Profile::Smoke] {
            ModelConfig::box_furniture(p).validate().unwrap();
            TrainConfig::for_profile(p, "x").validate().unwrap();
        }
    }

    #[test]
    fn lr_schedule_decays_from_midpoint() {
        let c = TrainConfig { stage1_epochs: 8000, ..TrainConfig::for_profile(Profile::Full, "chair") };
        assert_eq!(c.stage1_lr(0), 2e-3);
        assert_eq!(c.stage1_lr(3999), 2e-3);
        assert_eq!(c.stage1_lr(4000), 2e-3);
        assert!((c.stage1_lr(7999) - 1e-4).abs() < 1e-15);
        assert!(c.stage1_lr(6000) < 2e-3 && c.stage1_lr(6000) > 1e-4);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"seed": 5, "stage1_epochs": 3}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.stage1_epochs, 3);
        assert_eq!(c.batch_size, TrainConfig::default().batch_size);
        assert_ne!(c.hash(), TrainConfig::default().hash());
    }
}
