#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod audio;
pub mod datasim;
pub mod error;
pub mod frontend;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod seed;
pub mod separation;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, SeparatedSource, Separation, SeparationMode, TrainExample};
