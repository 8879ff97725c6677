//! Symmetry-aware alignment and merging of independently trained transformers.
//!
//! Transformers trained from different random seeds land in different basins of
//! the loss landscape, but the basins are often related by weight-space
//! symmetries: neuron permutations, attention-head permutations and splits, and
//! orthogonal changes of basis on the residual stream. This crate finds such
//! symmetries between checkpoints, applies them as function-preserving
//! reparameterizations, and measures the loss barrier along linear
//! interpolations between the aligned models — pairwise or across a whole set
//! merged into a shared "universe" basis.
//!
//! The building blocks are deliberately self-contained: dense `f64` matrices,
//! a one-sided Jacobi SVD, a shortest-augmenting-path linear assignment solver,
//! Sinkhorn normalization, a reverse-mode autodiff tape, and a small pre-norm
//! transformer with a binary checkpoint format.

pub mod autodiff;
pub mod barrier;
pub mod error;
pub mod linalg;
pub mod matching;
pub mod merging;
pub mod rng;
pub mod symmetry;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use linalg::Matrix;
