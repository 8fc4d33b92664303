//! Simulator for federated adversarial training under label skew.
//!
//! Clients hold Dirichlet-skewed shares of a classification task and run
//! adversarial training locally; a server averages their parameters. The
//! calibrated trainer shifts logits by the log of each client's class prior
//! in both the adversary's objective and the training loss, which keeps
//! local models homogeneous when label marginals differ across clients.
//!
//! Modules map onto the pipeline:
//!
//! - [`nn`]: dense network, exact gradients, momentum SGD
//! - [`losses`]: CE / calibrated CE / calibrated KL / TRADES
//! - [`attacks`]: FGSM, BIM, PGD under an L∞ budget
//! - [`data`]: synthetic data, file formats, Dirichlet partitioning
//! - [`federation`]: local trainers, FedAvg / FedProx, the round loop
//! - [`metrics`]: natural / robust / per-class accuracy, `s²`
//! - [`theory`]: identifiable toy models for the heterogeneity claims
//! - [`config`], [`cli`]: experiment configuration and commands

pub mod attacks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod modelio;
pub mod nn;
pub mod seed;
pub mod theory;

pub use error::{Error, Result};
