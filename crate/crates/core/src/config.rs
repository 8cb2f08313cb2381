//! Run configuration: one JSON document drives dataset generation, network
//! construction, training and evaluation. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub fg: f64,
    pub bg: f64,
    pub per: f64,
    pub recon: f64,
    pub mask: f64,
    pub rot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // all 1 except the perceptual term
        LossWeights {
            fg: 1.0,
            bg: 1.0,
            per: 10.0,
            recon: 1.0,
            mask: 1.0,
            rot: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.fg, self.bg, self.per, self.recon, self.mask, self.rot];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Adversarial objective. `LsGan` is the training default; `Logistic` is the
/// classic saturating log form kept behind this switch.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    #[default]
    Lsgan,
    Logistic,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub resolution: usize,
    /// Number of bottleneck resolutions.
    pub levels: usize,
    /// Depth extent of every encoder-level feature volume.
    pub volume_depth: usize,
    /// Feature channels per level, finest first.
    pub channels: Vec<usize>,
    pub keypoints: usize,
    pub loss_weights: LossWeights,
    pub adv_mode: AdvMode,
    pub optimizer: OptimConfig,
    pub steps: u64,
    pub batch_size: usize,
    /// References per training sample are drawn uniformly from this range.
    pub refs_min: usize,
    pub refs_max: usize,
    pub seed: u64,
    /// Force single-threaded execution. Parallel execution is bit-identical
    /// by construction; this switch exists for verification.
    pub deterministic: bool,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    /// Warp the finer-level skip connections with the predicted flow; when
    /// off they are passed through with identity flows (ablation).
    pub warp_skips: bool,
    /// Train the random-rotation adversarial branch (ablation switch).
    pub rotation_loss: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            resolution: 64,
            levels: 3,
            volume_depth: 16,
            channels: vec![8, 16, 32],
            keypoints: 12,
            loss_weights: LossWeights::default(),
            adv_mode: AdvMode::default(),
            optimizer: OptimConfig::default(),
            steps: 5000,
            batch_size: 4,
            refs_min: 1,
            refs_max: 2,
            seed: 7,
            deterministic: false,
            checkpoint_interval: 1000,
            log_interval: 25,
            warp_skips: true,
            rotation_loss: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.resolution < 16 || self.resolution % 4 != 0 {
            return Err(Error::invalid(format!(
                "resolution must be a multiple of 4 and >= 16, got {}",
                self.resolution
            )));
        }
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(Error::invalid(format!(
                "need one channel count per level: {} levels, {:?} channels",
                self.levels, self.channels
            )));
        }
        let div = 1 << (self.levels - 1);
        if self.volume_depth % div != 0 || (self.resolution / 4) % div != 0 {
            return Err(Error::invalid(format!(
                "volume depth {} and base spatial extent {} must divide by 2^(levels-1) = {div}",
                self.volume_depth,
                self.resolution / 4
            )));
        }
        if self.batch_size == 0 || self.refs_min == 0 || self.refs_min > self.refs_max {
            return Err(Error::invalid("batch_size and refs range must be positive"));
        }
        if self.keypoints == 0 {
            return Err(Error::invalid("keypoints must be positive"));
        }
        Ok(())
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            resolution: self.resolution,
            levels: self.levels,
            volume_depth: self.volume_depth,
            channels: self.channels.clone(),
            keypoints: self.keypoints,
        }
    }

    /// Parse from JSON, rejecting unknown keys.
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The architectural subset of the configuration.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub resolution: usize,
    pub levels: usize,
    pub volume_depth: usize,
    pub channels: Vec<usize>,
    pub keypoints: usize,
}

impl NetConfig {
    /// Spatial extent of the finest bottleneck grid (the encoder reduces the
    /// image by 4x).
    pub fn base_spatial(&self) -> usize {
        self.resolution / 4
    }

    /// `[D, H, W]` of the finest warp grid.
    pub fn base_grid(&self) -> [usize; 3] {
        let s = self.base_spatial();
        [self.volume_depth, s, s]
    }

    /// Extents of the encoder's feature volume at `level`: depth is held
    /// fixed, spatial extents halve per level.
    pub fn encoder_extents(&self, level: usize) -> [usize; 3] {
        let s = self.base_spatial() >> level;
        [self.volume_depth, s, s]
    }

    /// Extents of the warp grid at `level`: all axes halve per level.
    pub fn warp_extents(&self, level: usize) -> [usize; 3] {
        let [d, h, w] = self.base_grid();
        [d >> level, h >> level, w >> level]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.net().encoder_extents(1), [16, 8, 8]);
        assert_eq!(cfg.net().warp_extents(2), [4, 4, 4]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"resolution": 64, "bogus": 1}"#).unwrap_err();
        assert!(format!("{err}").contains("bogus"));
    }

    #[test]
    fn negative_weights_are_rejected() {
        let json = r#"{"loss_weights": {"fg": -1.0, "bg": 1.0, "per": 10.0, "recon": 1.0, "mask": 1.0, "rot": 1.0}}"#;
        assert!(RunConfig::from_json(json).is_err());
    }

    #[test]
    fn weights_default_to_unit_except_perceptual() {
        let w = LossWeights::default();
        assert_eq!(
            (w.fg, w.bg, w.per, w.recon, w.mask, w.rot),
            (1.0, 1.0, 10.0, 1.0, 1.0, 1.0)
        );
    }
}
