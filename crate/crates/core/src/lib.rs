//! Hierarchical temporal convolutional networks for session-aware
//! next-item recommendation.

pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod parallel;
pub mod real;
pub mod serving;
pub mod train;

pub use error::{Error, Result};
pub use parallel::Exec;
pub use real::Real;
