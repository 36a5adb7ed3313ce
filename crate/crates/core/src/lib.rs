//! Semantic segmentation from generator feature maps.
//!
//! Per-pixel features dumped from a generative model are clustered with
//! k-means; the clusters label new samples, producing a synthetic
//! (image, mask) dataset that trains a small fully-convolutional network.
//! Linear latent directions fitted to binary attribute labels let rare
//! classes be amplified before clustering. Everything works on plain file
//! dumps (FT01 tensors, JSON manifests, PNG masks).

pub mod clustering;
pub mod distill;
pub mod error;
pub mod latentdir;
pub mod maskgen;
pub mod metrics;
pub mod rng;
pub mod tensorio;
pub mod toygen;

pub use error::{Error, ErrorKind, Result};
