//! Knowledge embedding with a text encoder, trained jointly with masked
//! language modeling, plus table-based baselines, dataset splits, and
//! filtered link-prediction evaluation.

pub mod dataset;
mod error;
pub mod eval;
pub mod ke;
pub mod kg;
pub mod text;
pub mod train;

pub use error::{Error, Result};
