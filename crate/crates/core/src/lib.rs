//! Learns libraries of bounded-input / bounded-control / bounded-output
//! solution records from a black-box plant, and dispatches their stored
//! controls at runtime.
//!
//! The learning pipeline per origin:
//! 1. [`search::best_control`] finds the control that best maps the origin to
//!    the target output.
//! 2. [`boundary::learn_surface`] casts random rays from the origin, finds
//!    where that control stops keeping the output in its box, and fits a
//!    star-shaped radial surface to the cutoffs.
//! 3. [`library`] grows the record's control set from nearby origins, keeps
//!    the intersection of their regions, and persists records as a library.
//!
//! [`runtime`] classifies live inputs into library regions and [`oracle`]
//! audits regions against direct plant evaluation.

pub mod boundary;
pub mod cli;
pub mod config;
pub mod error;
pub mod library;
pub mod oracle;
pub mod parallel;
pub mod plant;
pub mod runtime;
pub mod search;
pub mod spaces;

pub use error::{Error, Result};
