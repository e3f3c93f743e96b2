pub mod bspline;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod error;
pub mod estimation;
pub mod fitting;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod segmentation;
pub mod spectral;
pub mod synth;
pub mod tuning;

pub use error::{Error, Result};
