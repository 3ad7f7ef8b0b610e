//! Numerics substrate: tensors, decoder block with exact backward, loss, optimizer.

mod block;
mod loss;
mod norm;
mod optim;
mod params;
mod real;
mod tensor;

pub use block::{
    attention_block, block_backward, block_forward, BlockGrads, BlockRecord, BlockShape,
    BlockWeights, LayerCache,
};
pub use loss::{cross_entropy, log_prob, softmax_f64, CrossEntropy};
pub use norm::{rms_norm, rms_norm_backward, rms_norm_forward, RMS_EPS};
pub use optim::{adamw_step, adamw_step_ranges, AdamState, OptimizerConfig};
pub use params::{ParamEntry, ParamStore};
pub use real::{gemm, Real};
pub use tensor::Tensor;
