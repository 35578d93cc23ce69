//! Promptable video object segmentation at desk scale.

pub mod checkpoint;
pub mod clicks;
pub mod data;
pub mod eval;
mod error;
mod mask;
pub mod model;
mod prompt;
pub mod rle;
pub mod train;

pub use error::{Error, Result};
pub use mask::{BoxXyxy, Mask};
pub use prompt::Prompt;
