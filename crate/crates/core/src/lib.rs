//! Monocular 3D detection with depth-aware feature enhancement and a
//! depth-aware transformer, sized for CPU experiments.

pub mod config;
pub mod depthbin;
pub mod detect;
pub mod dfe;
pub mod dtr;
pub mod eval;
pub mod gradsuite;
pub mod kittiio;
pub mod loss;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use tensor::{Tensor, TensorError};
