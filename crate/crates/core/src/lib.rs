pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::{ParamId, Parameter, Tensor};
