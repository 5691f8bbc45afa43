//! Data pipeline for the stamping-field surrogate workbench.

pub mod dataset;
pub mod doe;
pub mod error;
pub mod figures;
pub mod geometry;
pub mod grid;
pub mod materials;
pub mod metrics;
pub mod oracle;
pub mod postproc;
pub mod projection;

pub use error::{Error, Result};
pub use grid::{Grid, Mask};
