pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod eval;
pub mod experiment;
pub mod hgn;
pub mod io;
pub mod nn;
pub mod par;
pub mod preprocess;
pub mod prn;
pub mod prob_map;
pub mod raster;

pub use error::{Error, Result};
