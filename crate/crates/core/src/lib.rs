//! Learned prompt embeddings for a frozen promptable segmenter, trained from
//! tight-box weak labels with constrained losses.

pub mod backbone;
pub mod constraints;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod promptnet;
pub mod resize;
pub mod train;

pub use error::{Error, ErrorKind, Result};
