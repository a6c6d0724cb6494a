//! Question-type-guided attention over multi-source visual features, compact
//! bilinear pooling with count sketches, the concatenation/QTA model zoo for
//! visual question answering, and the evaluation battery around them.

pub mod checks;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod par;
pub mod sketch;

pub use error::{Error, Result};
