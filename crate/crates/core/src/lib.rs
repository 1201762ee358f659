pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod digest;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
