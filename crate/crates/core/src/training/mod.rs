//! Dice + cross-entropy loss, momentum SGD, and the training loop.

mod loss;
mod optim;
mod train;

pub use loss::{dice_ce_loss, one_hot, LossConfig, LossParts, LOG_FLOOR};
pub use optim::{sgd_step, OptimizerState, Schedule};
pub use train::{
    mean_foreground_dsc, predict_masks, train, train_with, EpochRecord, NetworkOverrides, TrainOutcome,
    TrainRunConfig, FINAL_CHECKPOINT_DIR, LOG_FILE,
};
