//! Comparison methods sharing the round engine: FedAvg, FedProx, local-only training
//! and FedAvg with per-client fine-tuning at evaluation time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dwa::GuidanceConfig;
use crate::error::{Error, Result};
use crate::fedcore::{batching_rng, local_train, sgd, ClientState, Proximal};
use crate::models::{accuracy, ModelSpec};
use crate::numkit::{weighted_sum, ParamVector, Purpose, Rng};

/// Default number of collaborators kept per row.
pub const DEFAULT_K: usize = 5;

/// Federated method and its method-specific settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum MethodConfig {
    FedAvg,
    FedProx {
        mu: f64,
    },
    Local,
    FedAvgFt {
        ft_epochs: usize,
    },
    FedDwa {
        k: usize,
        guidance: GuidanceConfig,
        /// Measure round-1 distances between the downloaded models, which all equal the
        /// shared initial model, so round-1 weights are uniform.
        first_round_uniform: bool,
    },
}

impl MethodConfig {
    pub fn feddwa() -> Self {
        MethodConfig::FedDwa {
            k: DEFAULT_K,
            guidance: GuidanceConfig::default(),
            first_round_uniform: true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::FedAvg => "fedavg",
            MethodConfig::FedProx { .. } => "fedprox",
            MethodConfig::Local => "local",
            MethodConfig::FedAvgFt { .. } => "fedavg_ft",
            MethodConfig::FedDwa { .. } => "feddwa",
        }
    }

    /// True for methods that keep a single global model.
    pub fn is_global(&self) -> bool {
        matches!(
            self,
            MethodConfig::FedAvg | MethodConfig::FedProx { .. } | MethodConfig::FedAvgFt { .. }
        )
    }

    pub fn uplink_models(&self) -> u64 {
        match self {
            MethodConfig::Local => 0,
            MethodConfig::FedDwa { guidance, .. } => guidance.uplink_models(),
            _ => 1,
        }
    }

    pub fn downlink_models(&self) -> u64 {
        match self {
            MethodConfig::Local => 0,
            _ => 1,
        }
    }

    /// Per-participant, per-round traffic in units of the model size.
    pub fn multiplier(&self) -> u64 {
        self.uplink_models() + self.downlink_models()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MethodConfig::FedProx { mu } if !(*mu >= 0.0 && mu.is_finite()) => {
                Err(Error::config("method.mu", format!("must be finite and >= 0, got {mu}")))
            }
            MethodConfig::FedAvgFt { ft_epochs: 0 } => {
                Err(Error::config("method.ft_epochs", "must be at least 1"))
            }
            MethodConfig::FedDwa { k: 0, .. } => Err(Error::config("method.k", "must be at least 1")),
            MethodConfig::FedDwa { guidance, .. } => guidance.validate(),
            _ => Ok(()),
        }
    }
}

/// How the global model weights each participant's upload.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Proportional to the participant's training-set size.
    DataSize,
}

pub fn fedavg_weights(sizes: &[usize], weighting: Weighting) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Empty("no participants to weight"));
    }
    Ok(match weighting {
        Weighting::Uniform => vec![1.0 / sizes.len() as f64; sizes.len()],
        Weighting::DataSize => {
            let total: usize = sizes.iter().sum();
            sizes.iter().map(|&s| s as f64 / total as f64).collect()
        }
    })
}

/// New global model: the weighted mean of the uploaded models.
pub fn fedavg_round(trained: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if trained.is_empty() {
        return Err(Error::Empty("fedavg_round needs at least one participant"));
    }
    let refs: Vec<&ParamVector> = trained.iter().collect();
    weighted_sum(weights, &refs)
}

/// Local SGD on `f_i(w) + mu/2 ||w - start||^2`.
pub fn fedprox_local(
    client: &ClientState,
    start: &ParamVector,
    mu: f64,
    spec: &ModelSpec,
    rng: &mut Rng,
) -> Result<ParamVector> {
    client.validate()?;
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::InvalidArgument(format!("mu must be finite and >= 0, got {mu}")));
    }
    sgd(
        client.id,
        &client.train,
        start,
        spec,
        client.lr,
        client.batch_size,
        client.local_epochs,
        Some(Proximal { mu, anchor: start }),
        rng,
    )
}

/// Test accuracy of every client after fine-tuning its own copy of `global` for
/// `ft_epochs` local epochs. `global` itself is left untouched.
pub fn fedavg_ft_eval(
    global: &ParamVector,
    clients: &[ClientState],
    ft_epochs: usize,
    spec: &ModelSpec,
    seed: u64,
    round: usize,
) -> Result<Vec<f64>> {
    if ft_epochs == 0 {
        return Err(Error::InvalidArgument("ft_epochs must be at least 1".into()));
    }
    clients
        .par_iter()
        .map(|c| {
            let mut rng = Rng::stream(seed, Purpose::FineTune, &[round as u64, c.id as u64]);
            let tuned = sgd(
                c.id,
                &c.train,
                global,
                spec,
                c.lr,
                c.batch_size,
                ft_epochs,
                None,
                &mut rng,
            )?;
            accuracy(&tuned, &c.test, spec)
        })
        .collect()
}

/// Every participant trains its own model on its own shard; nothing is communicated.
pub fn local_only_round(
    clients: &mut [ClientState],
    participants: &[usize],
    spec: &ModelSpec,
    seed: u64,
    round: usize,
) -> Result<()> {
    let trained = participants
        .par_iter()
        .map(|&i| {
            let c = &clients[i];
            local_train(c, &c.model, spec, &mut batching_rng(seed, round, c.id))
        })
        .collect::<Result<Vec<_>>>()?;
    for (&i, w) in participants.iter().zip(trained) {
        clients[i].model = w;
    }
    Ok(())
}
