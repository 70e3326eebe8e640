pub mod bddx;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod explainer;
pub mod metrics;
pub mod numerics;
pub mod perception;
pub mod pipeline;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};
