//! Decompose-and-edit speech synthesis at mel-spectrogram level.
//!
//! Global factors (timbre/style) are extracted from a reference feature
//! sequence as a token set and injected back through link-attention; local
//! factors (text, prosody) are predicted with context-aware inpainting.
//! Training runs in two stages (reconstruction, then adversarial); inference
//! supports full-sentence generation and word insertion with frame-exact
//! splicing.

pub mod alignment;
pub mod error;
pub mod inference;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
