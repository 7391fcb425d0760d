//! Masking, the in-batch score matrix, and the contrastive, MLM, Auto-MLM and
//! joint losses.

mod contrastive;
mod joint;
mod masking;
mod mlm;

pub use contrastive::{cl_margin_loss, score_matrix, HingeMode, IndexMode, ScoreMatrix};
pub use joint::{
    evaluate_batch, joint_loss, AutoMlmSide, BatchObjective, LossBreakdown, ObjectiveConfig, ObjectiveMode,
    TrainingBatch,
};
pub use masking::{apply_masking, MaskedSentence, MaskingConfig};
pub use mlm::{auto_mlm_loss, auto_mlm_loss_with_vectors, mlm_loss};
