//! Wide, shallow convolutional denoisers for grayscale images, written from
//! scratch: tensors, layers with hand-written backward passes, the WIN5
//! model family, SGD, Gaussian noise with fresh or frozen realizations,
//! patch pipelines, PSNR/SSIM metrics and the `win` command-line workflows.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
pub use tensor::{Shape, Tensor4};
