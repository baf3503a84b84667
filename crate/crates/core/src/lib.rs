//! Agent-aware boundary network for temporal action proposal generation.

pub mod boundary_net;
mod container;
pub mod config;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod inference;
pub mod io_synth;
pub mod losses;
pub mod model;
pub mod nn;
pub mod supervision;
pub mod training;

pub use error::{Error, Result};
