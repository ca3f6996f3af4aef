//! Self-supervised pre-training on fractal pairs.
//!
//! SimSiam minimises the symmetric negative cosine similarity between the
//! predictor output of one view and the projection of the other view, with
//! no gradient through the projection side. InfoNCE uses the other items in
//! the batch as negatives.

mod heads;
mod losses;
mod pretrain;

pub use heads::{PairBatch, ProjectorPredictor, SimSiamModel, SimSiamWeights, SslGradients};
pub use losses::{
    info_nce, info_nce_symmetric, negative_cosine, simsiam_loss, simsiam_objective, InfoNce, NegativeCosine,
    SimSiamOutput, SymmetricCosine,
};
pub use pretrain::{
    channel_stats, load_pairs, match_activation_scale, pairs_to_batch_tensors, pretrain, pretrain_on_pairs,
    PretrainConfig, PretrainOutcome, PretrainSchedule, SslObjective,
};
