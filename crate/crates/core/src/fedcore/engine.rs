use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{
    fedavg_ft_eval, fedavg_round, fedavg_weights, fedprox_local, local_only_round, MethodConfig,
    Weighting,
};
use crate::datagen::FederatedData;
use crate::dwa::{aggregate_personalized, compute_weights, guidance_model, top_k, WeightMatrix};
use crate::error::{Error, Result};
use crate::models::{accuracy, init_params, ModelSpec};
use crate::numkit::{ParamVector, Purpose, Rng};

use super::client::{local_train, select_participants, ClientState};
use super::ledger::{ComputeLedger, Direction, TrafficLedger};
use super::batching_rng;

/// Everything the engine needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub spec: ModelSpec,
    pub method: MethodConfig,
    pub rounds: usize,
    pub fraction: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
    pub weighting: Weighting,
}

impl EngineConfig {
    pub fn new(spec: ModelSpec, method: MethodConfig) -> Self {
        EngineConfig {
            spec,
            method,
            rounds: 100,
            fraction: 1.0,
            lr: 0.01,
            batch_size: 20,
            local_epochs: 1,
            seed: 0,
            weighting: Weighting::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.method.validate()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config("frac", format!("must lie in (0, 1], got {}", self.fraction)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("training.lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("training.local_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Test accuracy of every client, participants or not.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Aggregation weights after top-K, for FedDWA.
    pub weights: Option<WeightMatrix>,
    pub uplink: u64,
    pub downlink: u64,
    #[serde(serialize_with = "as_secs")]
    pub duration: Duration,
}

fn as_secs<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub method: String,
    pub rounds: usize,
    pub best_mean_accuracy: Option<f64>,
    pub best_round: Option<usize>,
    pub final_mean_accuracy: Option<f64>,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub model_bytes: u64,
    pub multiplier: u64,
    pub server_weight_ops: u64,
    pub server_aggregation_ops: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub traffic: TrafficLedger,
    pub compute: ComputeLedger,
    /// Each client's model at the end of the run (the global model for global methods).
    pub models: Vec<ParamVector>,
    pub global: Option<ParamVector>,
    pub summary: RunSummary,
}

/// A federation in progress: clients, the global model if any, and the ledgers.
#[derive(Debug, Clone)]
pub struct Federation {
    cfg: EngineConfig,
    clients: Vec<ClientState>,
    global: Option<ParamVector>,
    round: usize,
    traffic: TrafficLedger,
    compute: ComputeLedger,
}

impl Federation {
    pub fn new(cfg: EngineConfig, data: &FederatedData) -> Result<Self> {
        cfg.validate()?;
        if data.num_clients() == 0 {
            return Err(Error::Empty("federation needs at least one client"));
        }
        if data.dim() != cfg.spec.input_dim || data.num_classes() != cfg.spec.num_classes {
            return Err(Error::Dimension(format!(
                "data has {} features and {} classes, model expects {} and {}",
                data.dim(),
                data.num_classes(),
                cfg.spec.input_dim,
                cfg.spec.num_classes
            )));
        }
        let w0 = init_params(&cfg.spec, &mut Rng::stream(cfg.seed, Purpose::Init, &[]))?;
        let clients = data
            .shards
            .iter()
            .enumerate()
            .map(|(id, s)| ClientState {
                id,
                train: s.train.clone(),
                test: s.test.clone(),
                model: w0.clone(),
                lr: cfg.lr,
                batch_size: cfg.batch_size,
                local_epochs: cfg.local_epochs,
                last_trained: None,
            })
            .collect();
        let global = cfg.method.is_global().then(|| w0.clone());
        Ok(Federation {
            traffic: TrafficLedger::new(w0.byte_size()),
            compute: ComputeLedger::default(),
            cfg,
            clients,
            global,
            round: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global(&self) -> Option<&ParamVector> {
        self.global.as_ref()
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn traffic(&self) -> &TrafficLedger {
        &self.traffic
    }

    pub fn compute(&self) -> &ComputeLedger {
        &self.compute
    }

    /// Runs one communication round.
    pub fn step(&mut self) -> Result<RoundReport> {
        let t = self.round + 1;
        let report = self.step_inner(t).map_err(|e| Error::Round {
            round: t,
            source: Box::new(e),
        })?;
        self.round = t;
        Ok(report)
    }

    fn step_inner(&mut self, t: usize) -> Result<RoundReport> {
        let started = Instant::now();
        let n = self.clients.len();
        let seed = self.cfg.seed;
        let spec = self.cfg.spec.clone();
        let participants = select_participants(
            n,
            self.cfg.fraction,
            &mut Rng::stream(seed, Purpose::Participation, &[t as u64]),
        )?;

        for &i in &participants {
            self.traffic
                .record(t, i, Direction::Downlink, self.cfg.method.downlink_models());
            self.traffic
                .record(t, i, Direction::Uplink, self.cfg.method.uplink_models());
        }

        let d = spec.num_params() as u64;
        let s = participants.len() as u64;
        let mut weights = None;
        match self.cfg.method.clone() {
            MethodConfig::Local => {
                local_only_round(&mut self.clients, &participants, &spec, seed, t)?;
            }
            method @ (MethodConfig::FedAvg
            | MethodConfig::FedProx { .. }
            | MethodConfig::FedAvgFt { .. }) => {
                let global = self.global.clone().expect("global method keeps a global model");
                let mu = match method {
                    MethodConfig::FedProx { mu } => Some(mu),
                    _ => None,
                };
                let trained = participants
                    .par_iter()
                    .map(|&i| {
                        let c = &self.clients[i];
                        let mut rng = batching_rng(seed, t, c.id);
                        match mu {
                            Some(mu) => fedprox_local(c, &global, mu, &spec, &mut rng),
                            None => local_train(c, &global, &spec, &mut rng),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sizes: Vec<usize> = participants.iter().map(|&i| self.clients[i].train.len()).collect();
                let p = fedavg_weights(&sizes, self.cfg.weighting)?;
                self.global = Some(fedavg_round(&trained, &p)?);
                self.compute.record(t, 0, s * d);
            }
            MethodConfig::FedDwa {
                k,
                guidance,
                first_round_uniform,
            } => {
                let starts: Vec<ParamVector> =
                    participants.iter().map(|&i| self.clients[i].model.clone()).collect();
                let uploads = participants
                    .par_iter()
                    .zip(&starts)
                    .map(|(&i, start)| {
                        let c = &self.clients[i];
                        let trained = local_train(c, start, &spec, &mut batching_rng(seed, t, c.id))?;
                        let mut grng = Rng::stream(seed, Purpose::Guidance, &[t as u64, c.id as u64]);
                        let g = guidance_model(c, &trained, &guidance, &spec, &mut grng)?;
                        Ok((trained, g.model))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (trained, guides): (Vec<ParamVector>, Vec<ParamVector>) = uploads.into_iter().unzip();

                let keep = k.min(participants.len());
                let rows = (0..participants.len())
                    .into_par_iter()
                    .map(|r| {
                        if t == 1 && first_round_uniform {
                            // Every download equals w0, so all distances are zero and the
                            // row is uniform. Trimming it to K would only break ties by id.
                            return compute_weights(&starts[r], &starts);
                        }
                        top_k(&compute_weights(&guides[r], &trained)?, keep)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let matrix = WeightMatrix::from_rows(t, participants.clone(), rows)?;
                let personalized = aggregate_personalized(&matrix, &trained)?;
                let kept: u64 = (0..matrix.size()).map(|r| matrix.support(r).len() as u64).sum();
                self.compute.record(t, s * s * d, kept * d);
                for ((&i, w), up) in participants.iter().zip(personalized).zip(trained) {
                    let c = &mut self.clients[i];
                    c.model = w;
                    c.last_trained = Some(up);
                }
                weights = Some(matrix);
            }
        }

        let accuracies = self.evaluate(t)?;
        let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        let traffic = self.traffic.round_total(t);
        Ok(RoundReport {
            round: t,
            participants,
            accuracies,
            mean_accuracy,
            weights,
            uplink: traffic.uplink,
            downlink: traffic.downlink,
            duration: started.elapsed(),
        })
    }

    /// Test accuracy of every client under the current method's notion of its model.
    pub fn evaluate(&self, round: usize) -> Result<Vec<f64>> {
        let spec = &self.cfg.spec;
        match (&self.cfg.method, &self.global) {
            (MethodConfig::FedAvgFt { ft_epochs }, Some(g)) => {
                fedavg_ft_eval(g, &self.clients, *ft_epochs, spec, self.cfg.seed, round)
            }
            (_, Some(g)) => self
                .clients
                .par_iter()
                .map(|c| accuracy(g, &c.test, spec))
                .collect(),
            (_, None) => self
                .clients
                .par_iter()
                .map(|c| accuracy(&c.model, &c.test, spec))
                .collect(),
        }
    }

    pub fn into_outcome(self, reports: Vec<RoundReport>) -> RunOutcome {
        let best = reports
            .iter()
            .fold(None::<&RoundReport>, |best, r| match best {
                Some(b) if b.mean_accuracy >= r.mean_accuracy => Some(b),
                _ => Some(r),
            });
        let traffic = self.traffic.total();
        let compute = self.compute.total();
        let summary = RunSummary {
            method: self.cfg.method.name().to_string(),
            rounds: reports.len(),
            best_mean_accuracy: best.map(|r| r.mean_accuracy),
            best_round: best.map(|r| r.round),
            final_mean_accuracy: reports.last().map(|r| r.mean_accuracy),
            uplink_bytes: traffic.uplink,
            downlink_bytes: traffic.downlink,
            model_bytes: self.traffic.model_bytes(),
            multiplier: self.cfg.method.multiplier(),
            server_weight_ops: compute.weight_ops,
            server_aggregation_ops: compute.aggregation_ops,
        };
        let models = match &self.global {
            Some(g) => vec![g.clone(); self.clients.len()],
            None => self.clients.iter().map(|c| c.model.clone()).collect(),
        };
        RunOutcome {
            reports,
            traffic: self.traffic,
            compute: self.compute,
            models,
            global: self.global,
            summary,
        }
    }
}

/// Runs `cfg.rounds` rounds on `data`.
pub fn run(cfg: &EngineConfig, data: &FederatedData) -> Result<RunOutcome> {
    let mut fed = Federation::new(cfg.clone(), data)?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let r = fed.step()?;
        log::debug!("round {}: mean accuracy {:.4}", r.round, r.mean_accuracy);
        reports.push(r);
    }
    Ok(fed.into_outcome(reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::synth_clusters;

    fn data() -> FederatedData {
        synth_clusters(2, 3, 4, 3, 40, 0.0, &mut Rng::new(5)).unwrap()
    }

    fn cfg(method: MethodConfig) -> EngineConfig {
        EngineConfig {
            rounds: 3,
            lr: 0.1,
            batch_size: 8,
            seed: 11,
            ..EngineConfig::new(ModelSpec::softmax(4, 3), method)
        }
    }

    #[test]
    fn zero_rounds_keep_initial_models() {
        let d = data();
        let c = EngineConfig { rounds: 0, ..cfg(MethodConfig::feddwa()) };
        let out = run(&c, &d).unwrap();
        assert!(out.reports.is_empty());
        let w0 = init_params(&c.spec, &mut Rng::stream(c.seed, Purpose::Init, &[])).unwrap();
        assert!(out.models.iter().all(|m| *m == w0));
        assert_eq!(out.summary.best_mean_accuracy, None);
    }

    #[test]
    fn non_participants_unchanged() {
        let d = data();
        let c = EngineConfig { fraction: 0.5, ..cfg(MethodConfig::feddwa()) };
        let mut fed = Federation::new(c, &d).unwrap();
        fed.step().unwrap();
        let before: Vec<ParamVector> = fed.clients().iter().map(|c| c.model.clone()).collect();
        let r = fed.step().unwrap();
        for (i, c) in fed.clients().iter().enumerate() {
            if !r.participants.contains(&i) {
                assert_eq!(c.model, before[i]);
            }
        }
    }

    #[test]
    fn traffic_matches_closed_form() {
        let d = data();
        for (method, mult) in [
            (MethodConfig::feddwa(), 3),
            (MethodConfig::FedAvg, 2),
            (MethodConfig::FedProx { mu: 1.0 }, 2),
            (MethodConfig::Local, 0),
        ] {
            let out = run(&cfg(method), &d).unwrap();
            let sigma = out.traffic.model_bytes();
            assert_eq!(sigma, 8 * 15);
            let total = out.traffic.total().total();
            assert_eq!(total, 6 * mult * sigma * 3);
        }
    }

    #[test]
    fn mean_is_over_all_clients() {
        let d = data();
        let c = EngineConfig { fraction: 0.34, ..cfg(MethodConfig::Local) };
        let out = run(&c, &d).unwrap();
        for r in &out.reports {
            assert_eq!(r.accuracies.len(), 6);
            let m = r.accuracies.iter().sum::<f64>() / 6.0;
            assert_eq!(m, r.mean_accuracy);
        }
    }

    #[test]
    fn mismatched_model_rejected() {
        let d = data();
        let c = EngineConfig {
            spec: ModelSpec::softmax(5, 3),
            ..cfg(MethodConfig::FedAvg)
        };
        assert!(matches!(Federation::new(c, &d), Err(Error::Dimension(_))));
    }

    #[test]
    fn errors_carry_round_index() {
        let d = data();
        let c = EngineConfig { lr: 1e308, batch_size: 1, ..cfg(MethodConfig::FedAvg) };
        let err = run(&c, &d).unwrap_err();
        assert!(matches!(err, Error::Round { round: 1, .. }), "{err}");
    }
}
