//! Multi-modal knee osteoarthritis progression pipeline.

pub mod baselines;
pub mod cohort;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod imaging;
pub mod interpret;
pub mod io;
pub mod models;
pub mod relaxometry;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
