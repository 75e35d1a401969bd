use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientTraffic {
    pub uplink: u64,
    pub downlink: u64,
}

impl ClientTraffic {
    pub fn total(&self) -> u64 {
        self.uplink + self.downlink
    }
}

/// Bytes moved between the server and each client, per round.
///
/// Every transfer is a whole number of models of `model_bytes` each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficLedger {
    model_bytes: u64,
    rounds: BTreeMap<usize, BTreeMap<usize, ClientTraffic>>,
}

impl TrafficLedger {
    pub fn new(model_bytes: u64) -> Self {
        TrafficLedger {
            model_bytes,
            rounds: BTreeMap::new(),
        }
    }

    pub fn model_bytes(&self) -> u64 {
        self.model_bytes
    }

    /// Adds `n_models` model transfers. Recording zero models leaves the ledger unchanged.
    pub fn record(&mut self, round: usize, client: usize, direction: Direction, n_models: u64) {
        if n_models == 0 {
            return;
        }
        let entry = self
            .rounds
            .entry(round)
            .or_default()
            .entry(client)
            .or_default();
        let bytes = n_models * self.model_bytes;
        match direction {
            Direction::Uplink => entry.uplink += bytes,
            Direction::Downlink => entry.downlink += bytes,
        }
    }

    pub fn client_round(&self, round: usize, client: usize) -> ClientTraffic {
        self.rounds
            .get(&round)
            .and_then(|r| r.get(&client))
            .copied()
            .unwrap_or_default()
    }

    pub fn round_total(&self, round: usize) -> ClientTraffic {
        self.rounds.get(&round).map_or_else(ClientTraffic::default, |r| {
            r.values().fold(ClientTraffic::default(), |acc, t| ClientTraffic {
                uplink: acc.uplink + t.uplink,
                downlink: acc.downlink + t.downlink,
            })
        })
    }

    pub fn total(&self) -> ClientTraffic {
        self.rounds
            .keys()
            .map(|&r| self.round_total(r))
            .fold(ClientTraffic::default(), |acc, t| ClientTraffic {
                uplink: acc.uplink + t.uplink,
                downlink: acc.downlink + t.downlink,
            })
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }
}

/// Server-side arithmetic per round, in multiply-adds.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ComputeLedger {
    rounds: BTreeMap<usize, ServerCompute>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServerCompute {
    /// Distance evaluations behind the aggregation weights.
    pub weight_ops: u64,
    /// Weighted sums producing the aggregated models.
    pub aggregation_ops: u64,
}

impl ComputeLedger {
    pub fn record(&mut self, round: usize, weight_ops: u64, aggregation_ops: u64) {
        let e = self.rounds.entry(round).or_default();
        e.weight_ops += weight_ops;
        e.aggregation_ops += aggregation_ops;
    }

    pub fn round(&self, round: usize) -> ServerCompute {
        self.rounds.get(&round).copied().unwrap_or_default()
    }

    pub fn total(&self) -> ServerCompute {
        self.rounds.values().fold(ServerCompute::default(), |a, c| ServerCompute {
            weight_ops: a.weight_ops + c.weight_ops,
            aggregation_ops: a.aggregation_ops + c.aggregation_ops,
        })
    }
}
