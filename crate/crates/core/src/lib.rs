//! Attention-based multiple instance learning (A-MIL) for weakly supervised
//! image classification and localization.
//!
//! Images are tiled into bags of patches ([`bags`]), each patch is embedded
//! by a small convolutional network and the embeddings are pooled with a
//! learned softmax attention ([`model`]). The model is trained per bag
//! ([`training`]) and its attention weights double as a localization map
//! ([`localization`]). Everything is differentiated by the reverse-mode tape
//! in [`tensor`].

pub mod bags;
pub mod checkpoint;
pub mod error;
pub mod localization;
pub mod model;
mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
