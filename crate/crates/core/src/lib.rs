//! Online fair decision learning under label bias and selective labels.
//!
//! The pipeline learns a sensitive-attribute-conditioned representation with a
//! two-phase semi-supervised VAE and trains stochastic decision policies on the
//! latent space, alongside IPS-corrected logistic baselines, a synthetic causal
//! benchmark with an exact counterfactual oracle, and a utility/fairness
//! metrics suite.

pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod scm;
pub mod vae;

mod error;

pub use error::{Error, Result};
