pub mod error;
pub mod eval;
pub mod experiment;
pub mod ingest;
pub mod io;
pub mod losses;
pub mod model;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
