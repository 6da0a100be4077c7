//! Redundancy reduction attention for frame-sequence classification:
//! data pipeline, model, training, visualization and ablation sweeps.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod heads;
pub mod model;
pub mod optim;
pub mod params;
pub mod rra;
pub mod seeds;
pub mod trainer;
pub mod visualizer;

pub use error::{Error, Result};
