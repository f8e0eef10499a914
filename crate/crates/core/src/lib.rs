//! Neural operator flows: an invertible map between a Gaussian-process latent
//! function space and a data function space.
//!
//! The crate is organised bottom-up:
//!
//! - [`grid`]: regular grids, functions sampled on them, partition masks.
//! - [`gp`]: Matérn Gaussian processes, exact regression, truncated samplers and
//!   Wasserstein-2 distances between Gaussian measures.
//! - [`spectral`]: the Fourier neural operator used inside every coupling block.
//! - [`flow`]: actnorm + affine coupling blocks, exact point-evaluation likelihood.
//! - [`train`]: two-phase likelihood / Wasserstein training.
//! - [`regression`]: MAP estimation and latent-space Langevin sampling.
//! - [`metrics`], [`datasets`], [`config`], [`cli`]: evaluation and plumbing.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod flow;
pub mod gp;
pub mod grid;
pub(crate) mod linalg;
pub mod metrics;
pub mod observations;
pub mod plot;
pub mod regression;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
pub use flow::{OpFlowModel, ModelConfig, PartitionMode};
pub use gp::{GaussianMomentPair, GaussianProcessSpec, Roughness, TruncationBounds};
pub use grid::{FunctionBatch, Grid, GridFunction, IndexSet};
pub use observations::Observations;
