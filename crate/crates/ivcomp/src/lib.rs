//! Compensation back-ends for i-vector speaker verification.
//!
//! The library covers the full desk-scale pipeline: a synthetic i-vector
//! generator with controllable speaker/channel structure, three compensation
//! back-ends (plain LDA, two-covariance PLDA, and a neural embedding trained
//! under joint softmax + center loss), trial scoring (cosine, Euclidean,
//! PLDA log-likelihood ratio) and equal-error-rate evaluation.
//!
//! All numerics are double precision and hand-rolled on a small dense
//! linear-algebra kernel ([`linalg`]); nothing here depends on BLAS.
//! Every training routine is deterministic under a fixed seed.

pub mod cli;
pub mod dataset;
pub mod dda;
pub mod error;
pub mod eval;
pub mod lda;
pub mod linalg;
pub mod plda;
mod textio;

pub use error::{Error, Result};
pub use linalg::Matrix;
