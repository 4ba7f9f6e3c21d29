//! Unsupervised segmentation and clustering of unlabelled speech into
//! word-like units.
//!
//! Variable-length segments are mapped to fixed-dimensional embeddings by
//! kernel eigenmaps over DTW alignments; a collapsed Bayesian GMM over those
//! embeddings is sampled jointly with the segmentation by blocked Gibbs
//! sampling, and the reference set of the embedding is refined from the
//! resulting clusters.

pub mod cache;
pub mod config;
pub mod corpus;
pub mod dtw;
pub mod embed;
pub mod error;
pub mod eval;
pub mod format;
pub mod gmm;
pub mod output;
pub mod pipeline;
pub mod rng;
pub mod segmenter;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
