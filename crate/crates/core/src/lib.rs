//! Action recognition on deforming mesh sequences.
//!
//! The pipeline builds geodesic and euclidean vertex patches per frame,
//! encodes them with intra-frame offset-attention, relates patches across
//! frames with inter-frame self-attention, and classifies the sequence. The
//! encoder can be pretrained without labels by reconstructing masked patches
//! and future frames under a chamfer loss, on corpora enlarged by recombining
//! body parts of different motions.

pub mod augment;
pub mod autograd;
mod binio;
pub mod data;
pub mod datagen;
pub mod geometry;
pub mod mesh;
pub mod model;
pub mod params;
pub mod real;
pub mod seed;
pub mod ssl;
pub mod train;

pub use binio::FormatError;
