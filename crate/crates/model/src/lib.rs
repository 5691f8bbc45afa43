//! Surrogate network, optimiser, training loop and evaluation for the
//! stamping-field workbench.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod params;
pub mod reference;
pub mod train;

pub use config::ModelConfig;
pub use error::{ModelError, Result};
pub use network::{ForwardOptions, StampFormer, Trace};
