pub mod autodiff;
pub mod checks;
pub mod config;
pub mod encoder;
pub mod eval;
mod error;
pub mod graph;
pub mod optim;
pub mod parallel;
pub mod persist;
pub mod pretrain;
pub mod prompt;
pub mod seed;
pub mod subgraph;

pub use error::{Error, Result};
