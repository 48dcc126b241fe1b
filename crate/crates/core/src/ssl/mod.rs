//! SimSiam pretraining: model, loss, optimizer, training loop and checkpoints.

mod checkpoint;
mod model;
mod train;

pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use model::{
    neg_cosine, normalized_std, simsiam_loss, EncoderInit, EncoderKind, EncoderSpec, HeadSpec, LossAndGrad, LossMode,
    ModelSpec, Representation, Sgd, SimSiamModel, Targets,
};
pub use train::{
    init_model, step_on_views, train, train_step, EpochLog, StepStats, TrainConfig, TrainOutcome, COLLAPSE_EPOCHS,
    COLLAPSE_STD,
};
