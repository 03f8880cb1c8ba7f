pub mod autodiff;
pub mod classifier;
pub mod clinical;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
