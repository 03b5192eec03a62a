pub mod config;
pub mod dgp;
pub mod error;
pub mod io;
pub mod kmeans;
pub mod math;
pub mod model;
pub mod ot;
pub mod postprocess;
pub mod priors;
pub mod sampler;
pub mod study;

pub use error::{Error, Result};
