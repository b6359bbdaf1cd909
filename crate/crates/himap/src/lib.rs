//! File formats, experiment drivers and the command-line front end for
//! [`himap_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod experiments;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::{ExperimentConfig, ScheduleRef};
