//! Kernel regression with tree-aggregated features and adaptive-weight
//! bandwidth selection.

pub mod io;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod pilot;
pub mod rng;
pub mod select;
pub mod sim;
pub mod tree;

pub use kernel::{Bandwidth, KernelKind, LossReport};
pub use tree::AggregationTree;
