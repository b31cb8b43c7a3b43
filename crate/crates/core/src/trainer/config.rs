use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{AugmentParams, PreprocessConfig};
use crate::losses::{DiceVariant, DEFAULT_SMOOTH};
use crate::optim::AdamConfig;

const DESK_LR: f64 = 1e-3;
const DESK_MAX_EPOCHS: u64 = 30;
const DESK_TARGET_MAX_EPOCHS: u64 = 30;
const DESK_TARGET_PATIENCE: u64 = 10;

/// Optimisation and protocol settings shared by every training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Slices per batch on the source domain.
    pub batch_source: usize,
    /// Slices per batch during target fine-tuning and the scratch baseline.
    pub batch_target: usize,
    /// Epoch cap of source training.
    pub max_epochs: u64,
    /// Source epochs without a validation improvement before stopping.
    pub patience: u64,
    /// Epoch cap of each target fold.
    pub target_max_epochs: u64,
    pub target_patience: u64,
    pub loss: DiceVariant,
    /// Additive smoothing of each class term of the loss.
    pub loss_eps: f64,
    /// Augment source training batches.
    pub augment_source: bool,
    /// Augment target training batches (the `adapted+aug` arm forces it on).
    pub augment_target: bool,
    pub augmentation: AugmentParams,
    /// Cross-validation folds over the target fine-tuning subjects.
    pub folds: usize,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    /// Slices per evaluation forward pass.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_source: 16,
            batch_target: 4,
            max_epochs: 60,
            patience: 10,
            target_max_epochs: 60,
            target_patience: 10,
            loss: DiceVariant::FactorTwo,
            loss_eps: DEFAULT_SMOOTH,
            augment_source: false,
            augment_target: false,
            augmentation: AugmentParams::default(),
            folds: 4,
            seed: 42,
            preprocess: PreprocessConfig::default(),
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    /// Settings of the small CPU benchmark. Its source pool gives about 15
    /// updates per epoch, too few for the default learning rate to converge
    /// within the epoch caps, so the rate is ten times higher.
    pub fn desk() -> Self {
        Self {
            lr: DESK_LR,
            max_epochs: DESK_MAX_EPOCHS,
            target_max_epochs: DESK_TARGET_MAX_EPOCHS,
            target_patience: DESK_TARGET_PATIENCE,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.augmentation.validate()?;
        self.preprocess.clahe.validate()?;
        if self.batch_source == 0 || self.batch_target == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::config(format!(
                "cross-validation needs at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.patience == 0 || self.target_patience == 0 {
            return Err(Error::config("patience must be at least one epoch"));
        }
        if !(self.loss_eps >= 0.0 && self.loss_eps.is_finite()) {
            return Err(Error::config(format!(
                "loss eps must be non-negative, got {}",
                self.loss_eps
            )));
        }
        if self.preprocess.target_size == 0 {
            return Err(Error::config("preprocess target size must be positive"));
        }
        Ok(())
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLogEntry {
    /// `source`, `finetune-fold{k}` or `scratch-fold{k}`.
    pub stage: String,
    /// 1-based.
    pub epoch: u64,
    pub train_loss: f64,
    /// Mean foreground Dice on the stage's validation subjects.
    pub val_dice: f64,
    pub seconds: f64,
    /// Set when this epoch is the best so far and a checkpoint was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

/// The four compared protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    /// Source weights applied to the target domain directly.
    #[serde(rename = "source-only")]
    SourceOnly,
    /// Target training from random initialization.
    #[serde(rename = "scratch")]
    Scratch,
    /// Target fine-tuning of the source weights.
    #[serde(rename = "adapted")]
    Adapted,
    /// Fine-tuning with augmentation.
    #[serde(rename = "adapted+aug")]
    AdaptedAug,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::SourceOnly, Arm::Scratch, Arm::Adapted, Arm::AdaptedAug];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::SourceOnly => "source-only",
            Arm::Scratch => "scratch",
            Arm::Adapted => "adapted",
            Arm::AdaptedAug => "adapted+aug",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
