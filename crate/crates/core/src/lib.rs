//! Cross-lingual named-entity recognition by multi-channel knowledge
//! distillation with maximum-mean-discrepancy alignment.

pub mod autograd;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod optim;
pub mod training;
pub mod util;

pub use error::{Error, Result};
