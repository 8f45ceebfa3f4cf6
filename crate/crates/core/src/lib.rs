//! Stream temperature prediction at unmonitored sites.

pub mod config;
pub mod data_model;
pub mod error;
pub mod evaluate;
pub mod experiments;
pub mod fixture;
pub mod gbrt;
pub mod ingest;
pub mod lstm;
pub mod mtl;
pub mod normalize;
pub mod numerics;
pub mod runner;
pub mod thermal_regime;
pub mod trainer;

pub use error::{Error, Result};
