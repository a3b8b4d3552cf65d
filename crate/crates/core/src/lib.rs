//! Joint vision-language multi-modal summarization.
//!
//! A single transformer encoder reads visual tokens (one per image) and
//! document tokens together; a decoder generates the text summary while two
//! auxiliary heads over the visual states learn to restore the original
//! image order and to pick the images that belong in the summary.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod eval;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
