//! Anchored discrete factor analysis.
//!
//! Learns models with binary latent variables connected by an arbitrary
//! Bayesian network and linked to binary observations through noisy-or
//! gates, given one expert-specified anchor observation per latent:
//!
//! 1. [`moments`]: recover low-order latent moments from anchor moments,
//!    optionally constrained to the local or marginal polytope.
//! 2. [`structure`]: learn the latent network from recovered moments.
//! 3. [`loadings`]: estimate noisy-or failures and leaks.
//!
//! [`evalem`] holds posterior inference, evaluation tasks and Monte-Carlo
//! EM refinement; [`noise`] estimates anchor noise rates; [`pipeline`] and
//! [`io`] wire the stages to files.

pub mod dataset;
pub mod error;
pub mod evalem;
pub mod generate;
pub mod inference;
pub mod io;
pub mod loadings;
pub mod model;
pub mod moments;
pub mod noise;
pub mod pipeline;
pub mod structure;
pub mod table;

pub use dataset::BinaryDataset;
pub use error::{AdfaError, Result};
pub use model::{AdfaModel, AnchorMap, LatentNetwork, NoisyOrLoadings, VariableSpace};
pub use table::{SubsetMoment, Var};
