//! The end-to-end detector: a primary residual encoder fused stage by stage
//! with an auxiliary attention stream, a bottleneck with pooled-sampling
//! attention, and a decoder emitting one confidence map per level.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{check_input_size, check_train_size, ModelConfig};
pub use model::{Model, ResBlock, DSE_PREFIX, LASEA_PREFIX};
pub use train::{train, train_step, AdaGrad, TrainOptions, TrainSummary};

/// Parameter and FLOP totals of a configuration at its input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cost {
    pub params: usize,
    pub flops: u64,
}

pub fn count_params_flops(config: &ModelConfig) -> crate::Result<Cost> {
    let model = Model::new(config.clone(), 0)?;
    Ok(Cost {
        params: model.param_count(),
        flops: model.flops(config.input_height, config.input_width),
    })
}
