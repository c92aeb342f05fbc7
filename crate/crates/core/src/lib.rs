//! Few-shot fine-tuning with stability regularization, adaptability
//! calibration and disjoint-partition ensembles, plus worst-case evaluation
//! metrics over pre-sampled episodes.

pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
