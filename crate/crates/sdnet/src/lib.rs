//! Dataset simulation, training, evaluation and separation driver for the
//! two-microphone separation network in `sdnet-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod manifest;
pub mod plot;
pub mod separate;
pub mod train;
pub mod wav;

pub use config::RunConfig;

/// Errors caused by how the tool was invoked rather than by data or IO.
#[derive(Debug, thiserror::Error)]
pub enum UsageError {
    #[error("{0}")]
    Invalid(String),
}
