//! Minimal differentiable-compute kernel.
//!
//! Provides the layer set the era-recognition models need, each with an
//! analytic backward pass. Graphs are static layer sequences with cached
//! activations; there is no general autodiff tape. All arithmetic is f64 so
//! the finite-difference checks in `train::grad_check` certify the same
//! numeric path the training loop runs.

mod checkpoint;
mod graph;
mod layers;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, ParamEntry};
pub use graph::Sequential;
pub use layers::{
    AvgPool2x2, BatchNorm, Conv3x3, Elu, GlobalAvgPool, L2Normalize, Layer, LayerNorm, LayerSpec,
    Linear, MhaBlock, Mode, Softmax,
};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;

/// `c[m,n] = a[m,k] * b[k,n]` for library consumers outside this module.
pub fn tensor_matmul(a: &Tensor, b: &Tensor) -> crate::Result<Tensor> {
    tensor::matmul(a, b)
}
