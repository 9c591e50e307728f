//! Unsupervised shortcut detection and mitigation for vision transformers.
//!
//! The pipeline clusters images in the embedding space of a trained ViT,
//! scores patch keys by how far they sit from other clusters, picks the
//! cluster most likely to carry a shortcut, removes matching tokens at
//! inference and retrains the classifier head on the ablated embeddings.

pub mod concepts;
pub mod detection;
pub mod error;
pub mod image;
pub mod mitigation;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod service;
pub mod store;
pub mod synth;
pub mod vit;

pub use error::{Error, Result};
