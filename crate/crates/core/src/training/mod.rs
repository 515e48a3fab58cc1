//! Contrastive fine-tuning of encoder adapters on real anchors, synthetic
//! positives and synthetic negatives.

mod augment;
mod losses;
mod optim;
mod sampling;
mod trainer;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_with, rotate_image, rotate_mask, AugmentParams, CROP_AREA, FLIP_PROB, MAX_ROTATION_DEG};
pub use losses::{alt_loss, alt_loss_grad, cosine_grad, info_nce, info_nce_grad, Head, LossGrad};
pub use optim::Adam;
pub use sampling::{sample_pairs, TrainingPair};
pub use trainer::{step_count, train_personalized, write_loss_csv, TrainManifest, TrainOutcome};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    #[serde(rename = "infonce")]
    InfoNce,
    #[serde(rename = "infonce_multipos")]
    InfoNceMultipos,
    Hinge,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub temperature: f64,
    pub include_positive_in_denominator: bool,
    pub n_pairs: usize,
    pub n_neg_per_anchor: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Hinge margin.
    pub margin: f64,
    /// Augment anchors and positives.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::InfoNce,
            temperature: 0.07,
            include_positive_in_denominator: true,
            n_pairs: 4500,
            n_neg_per_anchor: 16,
            epochs: 2,
            batch_size: 16,
            learning_rate: 3e-4,
            seed: 0,
            margin: 0.2,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if self.n_pairs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("n_pairs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}
