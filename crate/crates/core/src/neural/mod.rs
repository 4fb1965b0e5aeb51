//! Multi-layer LSTM language model trained with plain SGD.

mod checkpoint;
mod linalg;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT as CHECKPOINT_FORMAT, VERSION as CHECKPOINT_VERSION};
pub use model::{BatchOutcome, Gradients, LstmConfig, LstmLm, LstmState, TensorInfo};
pub use train::{
    train_stage, Augmentation, EpochLog, GradNorm, HalvingPolicy, LrController, Stage, TrainLog, TrainSchedule,
};

use crate::error::Result;
use crate::rng::rng_for;

/// Seeded initialization, uniform in [-0.1, 0.1].
pub fn init_lstm(cfg: LstmConfig, seed: u64) -> Result<LstmLm> {
    LstmLm::new(cfg, &mut rng_for(seed, &[0x1a17]))
}
