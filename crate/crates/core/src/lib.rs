//! Martingale-consistent self-supervised learning under partial observation.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod mask;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use par::Exec;
pub use params::ParamSet;
pub use rng::Rng;
pub use tensor::Tensor;
