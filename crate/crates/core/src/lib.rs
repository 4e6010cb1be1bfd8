//! Training lab for small distilled datasets: label smoothing and
//! refinement, a loss zoo centered on a cosine-similarity objective,
//! coupled/decoupled weight-decay optimizers, and an experiment harness.

pub mod data;
pub mod error;
mod fsutil;
pub mod gradcheck;
pub mod graph;
pub mod harness;
mod kernels;
pub mod labels;
pub mod losses;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use graph::{evaluate_with_grad, Bindings, Evaluation, Graph, NodeId};
pub use tensor::Tensor;
