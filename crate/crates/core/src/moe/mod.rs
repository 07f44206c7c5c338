//! Stage-1 multi-expert model: a shared backbone, independent expert heads
//! and the movement/return/uncertainty loss stack.

mod loss;
mod model;
mod train;

pub use loss::{
    loss_collaborative, loss_individual, loss_total, loss_variation_ratio, loss_volatility,
    variation_ratio_hard, LossBreakdown, LossWeights, Objective, TapeLosses, Targets,
};
pub use model::{BoundMoe, ExpertHead, ExpertOutputs, MoEModel, MoeConfig, MoeForward, PrefixStats, DEFAULT_RETURN_SCALE, HEAD_WIDTH};
pub use train::{evaluate, train_stage1, EpochLog, LossValues, SampleMatrix, TrainConfig, TrainLog};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage} diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        step: usize,
        loss: f64,
    },
}
