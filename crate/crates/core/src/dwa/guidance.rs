use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedcore::{sgd, ClientState};
use crate::models::{grad, ModelSpec};
use crate::numkit::{axpy, ParamVector, Rng};

/// Which model stands in for a client's ideal personalized model when weights are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Extra gradient step(s) from the freshly trained model.
    OneStepAhead,
    /// The model the client uploaded the previous time it participated.
    LastIteration,
    /// The freshly trained model itself.
    Current,
}

/// Gradient used by the one-step-ahead adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptBatch {
    /// One full-batch gradient step per adapt step.
    Full,
    /// One epoch of mini-batch SGD per adapt step.
    Minibatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub adapt_steps: usize,
    pub adapt_batch: AdaptBatch,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::OneStepAhead,
            adapt_steps: 1,
            adapt_batch: AdaptBatch::Full,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adapt_steps == 0 {
            return Err(Error::config("guidance.adapt_steps", "must be at least 1"));
        }
        Ok(())
    }

    /// Models each participant uploads per round.
    ///
    /// The current-model mode sends only the trained model, since the server can use it
    /// directly as guidance.
    pub fn uplink_models(&self) -> u64 {
        match self.mode {
            GuidanceMode::Current => 1,
            GuidanceMode::OneStepAhead | GuidanceMode::LastIteration => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Guidance {
    pub model: ParamVector,
    /// True when last-iteration mode had no history and used the trained model.
    pub fell_back: bool,
}

/// Builds client `client`'s guidance model from its freshly trained model `trained`.
///
/// One-step-ahead mode applies `adapt_steps` updates at the client's learning rate:
/// full-batch gradient steps by default, or mini-batch epochs driven by `rng`.
pub fn guidance_model(
    client: &ClientState,
    trained: &ParamVector,
    cfg: &GuidanceConfig,
    spec: &ModelSpec,
    rng: &mut Rng,
) -> Result<Guidance> {
    cfg.validate()?;
    match cfg.mode {
        GuidanceMode::Current => Ok(Guidance {
            model: trained.clone(),
            fell_back: false,
        }),
        GuidanceMode::LastIteration => match &client.last_trained {
            Some(prev) => Ok(Guidance {
                model: prev.clone(),
                fell_back: false,
            }),
            None => {
                log::info!(
                    "client {}: no previous upload for last-iteration guidance, using the trained model",
                    client.id
                );
                Ok(Guidance {
                    model: trained.clone(),
                    fell_back: true,
                })
            }
        },
        GuidanceMode::OneStepAhead => {
            let model = match cfg.adapt_batch {
                AdaptBatch::Full => {
                    let mut w = trained.clone();
                    for _ in 0..cfg.adapt_steps {
                        let g = grad(&w, &client.train, spec)?;
                        w = axpy(-client.lr, &g, &w)?;
                    }
                    w
                }
                AdaptBatch::Minibatch => sgd(
                    client.id,
                    &client.train,
                    trained,
                    spec,
                    client.lr,
                    client.batch_size,
                    cfg.adapt_steps,
                    None,
                    rng,
                )?,
            };
            Ok(Guidance {
                model,
                fell_back: false,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, Dataset};

    fn setup(lr: f64) -> (ClientState, ModelSpec, ParamVector) {
        let spec = ModelSpec::softmax(2, 3);
        let train = Dataset::new(
            vec![0.5, 0.1, -0.3, 0.8, 0.9, -0.7, 0.0, 0.2],
            vec![0, 1, 2, 1],
            2,
            3,
        )
        .unwrap();
        let model = init_params(&spec, &mut Rng::new(2)).unwrap();
        let c = ClientState {
            id: 4,
            test: train.clone(),
            train,
            model: model.clone(),
            lr,
            batch_size: 2,
            local_epochs: 1,
            last_trained: None,
        };
        (c, spec, model)
    }

    #[test]
    fn zero_lr_guidance_is_trained() {
        let (c, spec, w) = setup(0.0);
        let g = guidance_model(&c, &w, &GuidanceConfig::default(), &spec, &mut Rng::new(1)).unwrap();
        assert_eq!(g.model, w);
    }

    #[test]
    fn one_full_step_matches_definition() {
        let (c, spec, w) = setup(0.3);
        let g = guidance_model(&c, &w, &GuidanceConfig::default(), &spec, &mut Rng::new(1)).unwrap();
        let grad_w = grad(&w, &c.train, &spec).unwrap();
        for k in 0..w.len() {
            let expect = w.values()[k] - 0.3 * grad_w.values()[k];
            assert_eq!(g.model.values()[k], expect);
        }
    }

    #[test]
    fn last_iteration_falls_back_then_uses_history() {
        let (mut c, spec, w) = setup(0.1);
        let cfg = GuidanceConfig {
            mode: GuidanceMode::LastIteration,
            ..GuidanceConfig::default()
        };
        let g = guidance_model(&c, &w, &cfg, &spec, &mut Rng::new(1)).unwrap();
        assert!(g.fell_back);
        assert_eq!(g.model, w);
        let prev = w.scale(0.5).unwrap();
        c.last_trained = Some(prev.clone());
        let g = guidance_model(&c, &w, &cfg, &spec, &mut Rng::new(1)).unwrap();
        assert!(!g.fell_back);
        assert_eq!(g.model, prev);
    }

    #[test]
    fn uplink_counts() {
        assert_eq!(GuidanceConfig::default().uplink_models(), 2);
        let cur = GuidanceConfig {
            mode: GuidanceMode::Current,
            ..GuidanceConfig::default()
        };
        assert_eq!(cur.uplink_models(), 1);
    }

    #[test]
    fn zero_adapt_steps_rejected() {
        let cfg = GuidanceConfig {
            adapt_steps: 0,
            ..GuidanceConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
