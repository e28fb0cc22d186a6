pub mod audio;
pub mod cnn;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod quality;
pub mod rng;
pub mod ssl;
pub mod svm;
pub mod synth;

pub use error::{Error, Result};
