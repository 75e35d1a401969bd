//! Round-based federated training: local SGD, participant sampling, traffic and
//! compute accounting, and the engine that drives every method.

mod client;
mod engine;
mod ledger;

pub(crate) use client::{sgd, Proximal};
pub use client::{local_train, select_participants, ClientState};
pub use engine::{run, EngineConfig, Federation, RoundReport, RunOutcome, RunSummary};
pub use ledger::{ClientTraffic, ComputeLedger, Direction, ServerCompute, TrafficLedger};

use crate::numkit::{Purpose, Rng};

/// Mini-batch order for client `client` in round `round`; shared by every method.
pub fn batching_rng(seed: u64, round: usize, client: usize) -> Rng {
    Rng::stream(seed, Purpose::Batching, &[round as u64, client as u64])
}
