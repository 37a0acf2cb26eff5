//! Latency samples collected by gateways.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Leader: proposal until the decision is reached.
    BlockConsensus,
    /// Leader: decision until the block is in its chain.
    AddBlockLeader,
    /// Follower: block arrival until it is in the chain.
    UpdateBlockchainBlock,
    /// Home gateway: reading arrival until the transaction is appended.
    AppendTransactionGw,
    /// Follower: transaction arrival until it is appended.
    UpdateBlockchainTrans,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::BlockConsensus,
        Metric::AddBlockLeader,
        Metric::UpdateBlockchainBlock,
        Metric::AppendTransactionGw,
        Metric::UpdateBlockchainTrans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::BlockConsensus => "blockConsensus",
            Metric::AddBlockLeader => "addBlockLeader",
            Metric::UpdateBlockchainBlock => "updateBlockchainBlock",
            Metric::AppendTransactionGw => "appendTransactionGw",
            Metric::UpdateBlockchainTrans => "updateBlockchainTrans",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Raw samples in microseconds, one vector per metric.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Samples {
    values: [Vec<u64>; 5],
}

impl Samples {
    pub fn record(&mut self, metric: Metric, micros: u64) {
        self.values[metric.slot()].push(micros);
    }

    pub fn get(&self, metric: Metric) -> &[u64] {
        &self.values[metric.slot()]
    }

    pub fn merge(&mut self, other: &Samples) {
        for m in Metric::ALL {
            self.values[m.slot()].extend_from_slice(other.get(m));
        }
    }

    pub fn summary(&self, metric: Metric) -> Summary {
        Summary::of(self.get(metric))
    }
}

/// Median of a sample set, `None` when empty. Even-sized sets use the mean
/// of the two middle values.
pub fn median(values: &[u64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid] as f64
    } else {
        (v[mid - 1] as f64 + v[mid] as f64) / 2.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    /// Median in milliseconds; `None` means not applicable.
    pub median_ms: Option<f64>,
}

impl Summary {
    pub fn of(micros: &[u64]) -> Self {
        Self {
            count: micros.len(),
            median_ms: median(micros).map(|us| us / 1000.0),
        }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.median_ms {
            Some(ms) => write!(f, "{ms:.3}"),
            None => f.write_str("n/a"),
        }
    }
}
