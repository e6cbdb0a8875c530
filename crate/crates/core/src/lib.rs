//! Semantic segmentation by classifying superpixels.
//!
//! An image is over-segmented into SLIC superpixels; each superpixel is
//! described by features pooled from four nested spatial scopes (local,
//! proximal, distant, global), concatenated into one "zoom-out" vector and
//! fed to a feedforward classifier trained with an inverse-class-frequency
//! weighted log-loss. The crate also ships the supporting tooling: codebook
//! training (textons, SIFT visual words), a small from-scratch neural net
//! core with gradient checking, mean-IoU evaluation, and binary file formats
//! for superpixelizations, codebooks, feature stores and models.

pub mod descriptors;
pub mod embeddings;
pub mod eval;
pub mod imagecore;
pub mod neuralnet;
pub mod pipeline;
pub mod superpixel;
pub mod synth;

mod binio;

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("decode error on {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
