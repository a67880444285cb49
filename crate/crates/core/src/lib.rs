pub mod diffcore;
pub mod ablation;
pub mod backbone;
pub mod candidates;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod heads_losses;
pub mod model;
pub mod scenegen;
pub mod train;

pub use error::{Error, Result};
