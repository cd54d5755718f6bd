//! Training and evaluation toolkit for music era recognition.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`dsp`]: waveform resampling, STFT, mel filterbanks and excerpt sampling
//! - [`nncore`]: a small differentiable-compute kernel with analytic backward
//!   passes for every layer the models need
//! - [`models`]: the three network variants (audio-only CNN, its
//!   era-contrastive extension, and the multimodal audio+biography model)
//! - [`losses`]: cross-entropy, era-contrastive (EC), multimodal-contrastive
//!   (MMC) objectives and the weighted total
//! - [`metrics`]: era label granularities and the tolerance accuracy ACC_x
//! - [`data`]: manifests, biography embedding tables, batch assembly and a
//!   synthetic dataset generator
//! - [`train`]: Adam, the training loop, k-fold plans and gradient checking

pub mod data;
pub mod dsp;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nncore;
pub mod train;

pub use error::{Error, Result};
