//! Two-tier communication accounting: a slow client-server link and fast
//! client-client links. Time is charged per round trip, bytes per message.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkCostModel {
    /// Simulated seconds for one client-server exchange.
    pub server_rtt: f64,
    /// Simulated seconds for one client-client transfer.
    pub peer_rtt: f64,
}

impl NetworkCostModel {
    pub fn new(server_rtt: f64, peer_rtt: f64) -> Result<Self> {
        if !(server_rtt >= peer_rtt && peer_rtt >= 0.0 && server_rtt.is_finite()) {
            return Err(Error::Config(format!(
                "network model needs server_rtt >= peer_rtt >= 0, got {server_rtt} / {peer_rtt}"
            )));
        }
        Ok(NetworkCostModel {
            server_rtt,
            peer_rtt,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Server,
    Peer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    /// Before round 1: model distribution and encrypted-data exchange.
    Setup,
    Round(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Params,
    Delta,
    EncryptedDataset,
    StochasticLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Message {
    pub tier: Tier,
    pub phase: Phase,
    pub kind: MessageKind,
    pub from: Option<usize>,
    pub to: Option<usize>,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageLog {
    pub entries: Vec<Message>,
}

impl MessageLog {
    pub fn push(
        &mut self,
        tier: Tier,
        phase: Phase,
        kind: MessageKind,
        from: Option<usize>,
        to: Option<usize>,
        bytes: u64,
    ) {
        self.entries.push(Message {
            tier,
            phase,
            kind,
            from,
            to,
            bytes,
        });
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CommTotals {
    pub server_seconds: f64,
    pub peer_seconds: f64,
    pub server_bytes: u64,
    pub peer_bytes: u64,
}

impl CommTotals {
    pub fn total_seconds(&self) -> f64 {
        self.server_seconds + self.peer_seconds
    }
}

/// Accumulates both tiers separately.
///
/// Server time is one `server_rtt` per aggregation round that carries server
/// traffic; setup-phase distribution is counted in bytes only. Peer transfers
/// within one phase run concurrently and cost a single `peer_rtt`.
pub fn simulate_comm_cost(model: &NetworkCostModel, log: &MessageLog) -> CommTotals {
    simulate_until(model, log, None)
}

/// Totals over the setup phase and rounds `1..=round`.
pub fn simulate_until(
    model: &NetworkCostModel,
    log: &MessageLog,
    round: Option<usize>,
) -> CommTotals {
    let mut totals = CommTotals::default();
    let mut server_phases = Vec::new();
    let mut peer_phases = Vec::new();
    for m in &log.entries {
        if let (Some(limit), Phase::Round(t)) = (round, m.phase) {
            if t > limit {
                continue;
            }
        }
        match m.tier {
            Tier::Server => {
                totals.server_bytes += m.bytes;
                if matches!(m.phase, Phase::Round(_)) && !server_phases.contains(&m.phase) {
                    server_phases.push(m.phase);
                }
            }
            Tier::Peer => {
                totals.peer_bytes += m.bytes;
                if !peer_phases.contains(&m.phase) {
                    peer_phases.push(m.phase);
                }
            }
        }
    }
    totals.server_seconds = server_phases.len() as f64 * model.server_rtt;
    totals.peer_seconds = peer_phases.len() as f64 * model.peer_rtt;
    totals
}
