use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GcnParams;
use crate::model::{DecoderKind, ModelConfig, Variant};

use super::TrainError;

/// Everything a run needs, as one flat key-value file. Missing keys take the
/// desk-scale defaults below; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: Variant,
    pub decoder: DecoderKind,
    /// Square model input side in pixels.
    pub image_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub train_batch: usize,
    pub valid_batch: usize,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub dice_smooth: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    /// Probabilities strictly above this are foreground when scoring.
    pub threshold: f64,
    pub gcn_lambda: f64,
    pub gcn_epsilon: f64,
    pub gcn_scale: f64,
    pub gcn_subtract_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: Variant::Levit384,
            decoder: DecoderKind::UNetPlusPlus,
            image_size: 64,
            lr_init: 2e-3,
            lr_min: 1e-6,
            train_batch: 4,
            valid_batch: 8,
            epochs: 15,
            folds: 4,
            seed: 42,
            w_bce: 0.5,
            w_dice: 0.5,
            dice_smooth: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.1,
            threshold: 0.5,
            gcn_lambda: 10.0,
            gcn_epsilon: 1e-8,
            gcn_scale: 1.0,
            gcn_subtract_mean: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale batch sizes (64 train / 128 valid); everything else as
    /// [`TrainConfig::default`].
    pub fn full_scale() -> Self {
        Self {
            train_batch: 64,
            valid_batch: 128,
            ..Self::default()
        }
    }

    /// Settings for the 8-sample memorization check: default model, 30
    /// epochs, a larger step size so 60 optimizer steps are enough.
    pub fn overfit_probe() -> Self {
        Self {
            epochs: 30,
            lr_init: 2e-2,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_init) {
            return fail("lr_min must be non-negative and below lr_init");
        }
        if self.folds < 2 {
            return fail("folds must be at least 2");
        }
        if self.train_batch == 0 || self.valid_batch == 0 {
            return fail("batch sizes must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.w_bce < 0.0 || self.w_dice < 0.0 || self.w_bce + self.w_dice == 0.0 {
            return fail("loss weights must be non-negative and not both zero");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(0.0..1.0).contains(&self.threshold) {
            return fail("bn_momentum must lie in [0, 1] and threshold in [0, 1)");
        }
        self.gcn().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.model_config()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.encoder, self.decoder, (self.image_size, self.image_size))
    }

    pub fn gcn(&self) -> GcnParams {
        GcnParams {
            lambda: self.gcn_lambda,
            epsilon: self.gcn_epsilon,
            scale: self.gcn_scale,
            subtract_mean: self.gcn_subtract_mean,
        }
    }
}
