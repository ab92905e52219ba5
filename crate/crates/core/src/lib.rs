//! Question-conditioned cascaded segment and region selection with iterative
//! spatial-temporal attention over pre-extracted video features.

pub mod error;
pub mod features;
pub mod numerics;
pub mod rng;

pub use error::{MistError, Result};
pub mod selection;
pub mod ista;
pub mod answer;
