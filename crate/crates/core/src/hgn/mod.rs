//! Hypothesis generation network: a fully convolutional encoder–decoder
//! with a full-resolution residual stream, its losses and trainer.

mod loss;
mod model;
mod train;

pub use loss::{batch_loss, dice_loss, weighted_cross_entropy, ClassWeights, LossTerms, DICE_EPS, PROB_EPS};
pub use model::{hgn_forward, FrruStage, HgnArch, HgnModel};
pub use train::{
    predict_images, sample_batch, train_hgn, validation_pr_auc, EpochHook, HgnBatch, HgnTrainConfig, HgnTrainOutcome,
    HgnTrainer,
};
