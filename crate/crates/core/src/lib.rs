//! Importance-sampling SGD laboratory.
//!
//! Non-uniform minibatch sampling schemes, the convergence-speed analytics
//! that compare them, a small from-scratch network, and the experiment
//! runner that trains it on a 100-item binary MNIST task.

pub mod data;
pub mod error;
pub mod experiment;
pub mod metric;
pub mod model;
pub mod optim;
pub mod prob;
pub mod speed;

pub use error::{Error, Result};
