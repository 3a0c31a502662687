//! File formats, configuration, experiment drivers and the command-line
//! interface for gamified weakly-supervised segmentation. The algorithms
//! themselves live in [`segplay_core`], re-exported here as [`core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
pub use segplay_core as core;
