//! Lung ultrasound differential diagnosis toolkit.
//!
//! Turns ultrasound recordings into COVID-19 / bacterial pneumonia / healthy /
//! uninformative predictions, with video-grouped cross-validation, class
//! activation maps, kernel two-sample analysis of heatmap geometry, and
//! Monte-Carlo confidence estimates.

pub mod class;
pub mod config;
pub mod cv;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod train;
pub mod uncertainty;

pub use class::{Class, MediaKind, Probe};
pub use error::{Error, Result};
