//! Personalized federated learning with server-side dynamic weight adjustment.
//!
//! The parameter server collects each participant's locally trained model together
//! with a one-step-ahead "guidance" model, then gives every client its own
//! aggregate whose weights are the normalized inverse squared distances between the
//! client's guidance model and the uploaded models.
//!
//! Module map:
//! - [`numkit`]: parameter vectors, seeded random streams, small linear algebra
//! - [`models`]: softmax regression and a tanh MLP with analytic gradients
//! - [`datagen`]: synthetic tasks, CSV loading and non-IID partitioners
//! - [`fedcore`]: local SGD, participant sampling, traffic/compute ledgers, the round engine
//! - [`dwa`]: guidance models, weight computation, top-K, personalized aggregation
//! - [`baselines`]: FedAvg, FedProx, local-only and FedAvg with fine-tuning
//! - [`config`] and [`experiment`]: run configuration, report files and sweeps

pub mod baselines;
pub mod config;
pub mod datagen;
pub mod dwa;
pub mod error;
pub mod experiment;
pub mod fedcore;
pub mod models;
pub mod numkit;

pub use error::{Error, Result};
