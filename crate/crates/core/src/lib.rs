//! Continual atlas-based segmentation with privacy-preserving prototypes.

pub mod continual;
pub mod datagen;
pub mod error;
pub mod grid;
pub mod imageproc;
pub mod io;
pub mod metrics;
pub mod prototypes;
pub mod regnet;
pub mod report;
pub mod cli;

pub use error::{Error, Result};
pub use grid::Grid;
