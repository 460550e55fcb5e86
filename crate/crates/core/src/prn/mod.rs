//! Patch-wise refinement network: a residual classifier for the center
//! pixel of a patch, trained with a triplet loss on its pooled embedding,
//! paired cross-entropy, and loss-proportional sampling of negatives.

mod loss;
mod model;
mod pool;
mod train;

pub use loss::{
    cosine_distance, cross_entropy_with_grad, distance, distance_with_grad, triplet_batch_loss, triplet_loss,
    triplet_with_grad, DistanceKind,
};
pub use model::{prn_forward, BlockKind, PrnArch, PrnModel, PrnNodes, PrnStage};
pub use pool::{build_triplet_batch, update_selection_probabilities, update_subset, SamplePool, TripletBatch};
pub use train::{
    patch_pr_auc, rescore_pool, score_centers, score_patches, train_prn, validation_centers, PrnLossTerms,
    PrnTrainConfig, PrnTrainOutcome, PrnTrainer, TripletPatches,
};
