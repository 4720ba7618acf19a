//! Heteroscedastic-uncertainty diffusion for multi-agent trajectory completion.
//!
//! The crate implements the full pipeline:
//!
//! - [`schedule`] — quadratic noise schedule, skip-step plans and the
//!   deterministic denoising update coefficients;
//! - [`gaussian2d`] — bi-variate Gaussian algebra (NLL, Mahalanobis
//!   confidence tests, eigen-decomposition, uncertainty summaries);
//! - [`scene`] — scene tensors, masking strategies, synthetic multi-agent
//!   data generation and JSONL persistence;
//! - [`denoiser`] — the denoiser contract plus three implementations: an
//!   exact analytic oracle for Gaussian data, a per-step affine model, and
//!   a trainable social-temporal network with hand-rolled exact gradients;
//! - [`training`] — losses (`L_simple`, `L_nll` with stop-gradient on the
//!   mean) and the optimization loop;
//! - [`sampler`] — reverse Gaussian sampling: joint mean/covariance
//!   propagation with `u2diff` / `u2diffine` / `full_jacobian` variants,
//!   plus Monte-Carlo validation oracles and a timing probe;
//! - [`metrics`] — displacement errors, likelihoods, calibration, Spearman
//!   correlation and the Top-k ranking protocol;
//! - [`ranker`] — a permutation-equivariant mode ranker trained through a
//!   differentiable Spearman objective;
//! - [`config`] / [`checkpoint`] — run configuration and the named-tensor
//!   checkpoint container shared by all models.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod gaussian2d;
pub mod metrics;
pub mod nn;
pub mod ranker;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
