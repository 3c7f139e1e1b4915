//! Graph-smoothed preprocessing of multi-channel physiological recordings and
//! a two-branch spatio-temporal attention network (STANN) for binary affect
//! classification, with cross-validated training and fine-tuning.

pub mod error;
pub mod graph;
pub mod io;
pub mod model;
pub mod nn;
pub mod par;
pub mod prep;
pub mod protocol;
pub mod signal;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
