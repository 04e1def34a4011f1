//! Sketch-, color- and texture-conditioned image synthesis.

pub mod colorkit;
pub mod error;

pub use error::{Error, Result};
pub mod datagen;
pub mod nets;
pub mod procedural;
pub mod losses;
pub mod train;
pub mod infer;
