//! Text polarity classification with string kernels and bag-of-word-embeddings.
//!
//! The crate covers the whole pipeline: corpus ingestion and preprocessing
//! ([`corpus`]), the histogram intersection string kernel ([`hisk`]), word
//! vectors from a CBOW model or pre-computed dumps ([`embed`]), k-means and
//! self-organizing-map codebooks ([`cluster`]), bag-of-word-embeddings
//! histograms with the PQ kernel ([`bowe`]), SVMs over precomputed kernels
//! ([`learn`]) and a cached end-to-end runner ([`pipeline`]).

pub mod bowe;
pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod hisk;
pub mod kernel;
pub mod learn;
pub mod pipeline;

pub use error::{Error, Result};
pub use kernel::{CrossKernel, KernelMatrix};
