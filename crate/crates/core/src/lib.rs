//! Function-space regularized robust fine-tuning on a synthetic
//! covariate-shift benchmark.

pub mod analysis;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod regularizers;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelState, Params};
pub use regularizers::{Method, RegularizerConfig};
pub use tensor::Tensor;
pub use training::TrainConfig;
