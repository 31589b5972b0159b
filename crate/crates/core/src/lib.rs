pub mod annotate;
pub mod ckpt;
pub mod config;
pub mod diffusion;
pub mod downstream;
pub mod embed2d;
pub mod encoder;
pub mod harness;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod safe;
pub mod scenegen;
pub mod tape;
pub mod tensor;
pub mod wasm;

pub use error::{Error, Result};
pub use tensor::Tensor;
