//! Distance-aware uncertainty with radial basis function networks for
//! unknown-object detection.

pub mod config;
pub mod error;
pub mod heads;
mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod propcls;
pub mod propseg;
pub mod rbf;
pub mod regularizer;
pub mod synthbench;
pub mod tensor;
pub mod toy2d;
pub mod train;
pub mod umap;

pub use error::{Error, Result};
pub use tensor::Tensor;
