//! Estimation of spatially varying excitable-tissue parameters from surface
//! measurements, by Bayesian optimization over the latent space of a
//! variational auto-encoder.
//!
//! Pipeline: build a mesh ([`geometry`]), generate heterogeneous parameter
//! phantoms ([`datagen`]), train a VAE over them ([`vae`]), summarize its
//! aggregated posterior ([`latentprior`]), then recover an unknown field
//! from simulated surface data ([`epsim`]) with a GP surrogate ([`gp`])
//! driving prior-informed expected improvement ([`bayesopt`]). Accuracy is
//! scored by [`metrics`].
//!
//! With the default `parallel` feature the inner data-parallel loops run on
//! rayon; disabling it falls back to sequential execution with bit-identical
//! results.

pub mod bayesopt;
pub mod datagen;
pub mod epsim;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod gp;
pub mod latentprior;
pub mod linalg;
pub mod metrics;
pub mod seed;
pub mod vae;

pub use error::{CoreError, Result};
