pub mod detector;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod ranker;
mod rng;
pub mod simkit;

pub use error::{Error, Result};
