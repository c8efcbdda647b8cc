//! Unsupervised text-line segmentation for handwritten pages.
//!
//! A siamese network learns patch similarity from pairs labelled by ink
//! counts alone. Its branch embeds every cell of a page; the first
//! principal component of those embeddings separates text lines from the
//! space between them and is thresholded into blob lines. Connected
//! components are then assigned to blob lines by graph-cut energy
//! minimisation.

pub mod config;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod extractor;
pub mod imaging;
pub mod pipeline;
pub mod sampler;
pub mod siamese;
pub mod synth;

pub use error::{Error, Result};
