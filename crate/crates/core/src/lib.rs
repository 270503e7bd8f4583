//! Multi-modal self-supervised pre-training for satellite image time
//! series segmentation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod sits;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Result, S4Error};
