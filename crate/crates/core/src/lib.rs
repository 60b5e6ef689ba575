pub mod augment;
pub mod cds;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod density;
pub mod dlgc;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod saa;
pub mod synth;
pub mod trainer;

pub use error::{CgstaError, Result};
