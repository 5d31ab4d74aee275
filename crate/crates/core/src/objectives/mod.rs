//! Losses, optimiser and evaluation metrics.

mod optim;
mod segmentation;
mod survival;

pub use optim::{AdamW, AdamWConfig, CosineSchedule, EarlyStopping, ParamGrads};
pub use segmentation::{argmax_labels, dice_ce_loss, dice_score, DiceCeTerms, DICE_EPS};
pub use survival::{
    antolini_cindex, comparable_pairs, deephit_loss, discretize_times, survival_curves, CIndex, DeepHitConfig,
    DeepHitLoss, SurvivalRecord, TimeBins, DEFAULT_BINS, SURVIVAL_FLOOR,
};
