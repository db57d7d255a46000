//! Face–voice cross-modal verification: the dual-branch fusion model, the
//! pair-weighted loss, dataset handling, scoring and the training pipeline.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod model;
pub mod pairloss;
pub mod scoring;
pub mod train;

pub use error::{FvError, Result};
