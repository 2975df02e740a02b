pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{ParameterStore, Tensor};
