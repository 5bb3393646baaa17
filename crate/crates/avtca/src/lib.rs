//! File formats, dataset IO, the training driver and the command line for
//! the audio-video cross-attention classifier in `avtca-core`.

pub mod avt1;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod metrics_csv;
pub mod run;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
