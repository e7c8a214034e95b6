//! Counterfactual generation for RL agents over a jointly trained VAE
//! latent: environments, agent, dataset, model, quality measures,
//! generators and the experiment harness.

pub mod agent;
pub mod counterfactual;
pub mod dataset;
pub mod envs;
pub mod experiments;
mod error;
pub mod jvae;
pub mod manifest;
pub mod measures;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
