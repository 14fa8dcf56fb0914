//! Federated posterior networks on synthetic data: Dirichlet-based
//! uncertainty, radial-flow densities over learned embeddings, FedAvg
//! simulation with personalized local models, and uncertainty-driven
//! switching between local and global predictors.

pub mod cli;
pub mod config;
pub mod data;
pub mod dirichlet;
pub mod error;
pub mod experiments;
pub mod federated;
pub mod inference;
pub mod models;
pub mod numerics;
pub mod seeding;

pub use error::{Error, Result};
