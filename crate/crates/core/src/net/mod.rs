//! Transports binding gateways and devices.
//!
//! Nodes are sans-IO state machines implementing [`Node`]. They see the
//! outside world only through [`Env`], which the deterministic simulator
//! ([`sim`]) and the TCP transport ([`socket`]) both provide.

pub mod sim;
#[cfg(feature = "socket")]
pub mod socket;

use std::any::Any;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::chain::Timestamp;
use crate::crypto::PublicKey;
use crate::wire::Frame;

/// Transport-level node address. Gateways occupy ids `0..gateway_count`
/// in membership order; devices and other clients follow.
pub type NodeId = u32;

/// Virtual-time origin mapped onto wall-clock milliseconds, so chain
/// timestamps look like real ones.
pub const EPOCH_MS: Timestamp = 1_600_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    ConsensusTimeout { round: u64, index: u64 },
    /// Re-check a pending join; `mark` is the leader-activity counter when
    /// the timer was set.
    JoinRetry { key: PublicKey, mark: u64 },
    SyncCheck,
    KeyUpdateTimeout { old_key: PublicKey, attempt: u32 },
    /// Ask a device that timed out for a new key again.
    KeyUpdateRetry { old_key: PublicKey, attempt: u32 },
    DeviceConnect,
    DeviceEmit,
    /// Join this gateway's own key to the chain.
    Bootstrap,
}

/// Unit of CPU work billed by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Receiving and parsing one message.
    Decode,
    Verify,
    Sign,
    Hash,
    /// Inserting into the chain store.
    Append,
}

/// Virtual CPU cost in microseconds per operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub decode_us: u64,
    pub verify_us: u64,
    pub sign_us: u64,
    pub hash_us: u64,
    pub append_us: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            decode_us: 5,
            verify_us: 15,
            sign_us: 8,
            hash_us: 1,
            append_us: 2,
        }
    }
}

impl CostModel {
    pub const FREE: CostModel = CostModel {
        decode_us: 0,
        verify_us: 0,
        sign_us: 0,
        hash_us: 0,
        append_us: 0,
    };

    pub fn cost(&self, op: Op) -> u64 {
        match op {
            Op::Decode => self.decode_us,
            Op::Verify => self.verify_us,
            Op::Sign => self.sign_us,
            Op::Hash => self.hash_us,
            Op::Append => self.append_us,
        }
    }
}

/// What a node may do while handling an input.
pub trait Env {
    /// Current time in microseconds, including work charged so far.
    fn now_us(&self) -> u64;
    /// When the input being handled reached this node's inbox.
    fn arrival_us(&self) -> u64;
    /// Wall-clock-style timestamp for chain fields.
    fn now_ms(&self) -> Timestamp;
    /// Bill `count` operations of kind `op`.
    fn charge(&mut self, op: Op, count: u32);
    fn send(&mut self, to: NodeId, frame: Frame);
    fn set_timer(&mut self, delay_us: u64, timer: Timer);
}

pub trait Node: Send {
    fn on_frame(&mut self, from: NodeId, frame: &Frame, env: &mut dyn Env);
    fn on_timer(&mut self, timer: Timer, env: &mut dyn Env);
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    InMemory,
    Socket,
}

/// One-way delay distribution, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Latency {
    Fixed(u64),
    Uniform { min: u64, max: u64 },
}

impl Latency {
    pub fn fixed_ms(ms: u64) -> Self {
        Latency::Fixed(ms * 1000)
    }

    pub fn uniform_ms(min: u64, max: u64) -> Self {
        Latency::Uniform {
            min: min * 1000,
            max: max * 1000,
        }
    }

    /// Map a uniform 64-bit draw onto the distribution.
    pub fn sample(&self, draw: u64) -> u64 {
        match *self {
            Latency::Fixed(us) => us,
            Latency::Uniform { min, max } if max <= min => min,
            Latency::Uniform { min, max } => min + draw % (max - min + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Equivocate,
    MuteLeader,
    /// Flip one byte in every frame the node sends to another gateway.
    CorruptPayload,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetConfigError {
    #[error("drop rate {0} outside [0, 1]")]
    DropRate(f64),
    #[error("node {0} appears in more than one partition")]
    OverlappingPartitions(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub mode: Mode,
    /// Gateway-to-gateway delay.
    pub latency: Latency,
    /// Device-to-home-gateway delay.
    pub device_latency: Latency,
    /// Loss probability on gateway-to-gateway links.
    pub drop_rate: f64,
    /// How many earlier messages on the same link a message may overtake.
    pub reorder_window: usize,
    /// Gateway groups that can only reach each other. Gateways not listed
    /// form one more group.
    pub partitions: Vec<Vec<NodeId>>,
    pub byzantine: Vec<(NodeId, Strategy)>,
    /// Gateway pairs whose links, in both directions, use their own delay
    /// instead of `latency`.
    pub link_latency: Vec<(NodeId, NodeId, Latency)>,
    pub seed: u64,
    /// Record one trace line per delivery.
    pub trace: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            mode: Mode::InMemory,
            latency: Latency::uniform_ms(1, 5),
            device_latency: Latency::Fixed(0),
            drop_rate: 0.0,
            reorder_window: 0,
            partitions: Vec::new(),
            byzantine: Vec::new(),
            link_latency: Vec::new(),
            seed: 0,
            trace: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetConfigError> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(NetConfigError::DropRate(self.drop_rate));
        }
        let mut seen = HashSet::new();
        for node in self.partitions.iter().flatten() {
            if !seen.insert(*node) {
                return Err(NetConfigError::OverlappingPartitions(*node));
            }
        }
        Ok(())
    }

    pub fn strategy_of(&self, node: NodeId) -> Option<Strategy> {
        self.byzantine
            .iter()
            .find(|(n, _)| *n == node)
            .map(|(_, s)| *s)
    }
}

/// Messages whose delays are drawn from the same stream. Consensus legs
/// that play the same role under both algorithms share a class, so runs
/// that differ only in algorithm or load see matching delays.
pub fn latency_class(type_byte: u8) -> u8 {
    match type_byte {
        0x10 | 0x13 => 0,
        0x11 => 1,
        0x12 | 0x14 => 2,
        0x15 | 0x21 => 3,
        0x20 => 4,
        0x24 | 0x25 => 5,
        _ => 6,
    }
}

/// Deterministic 64-bit draw keyed by seed, purpose, link and sequence.
pub fn keyed_draw(seed: u64, purpose: u8, from: NodeId, to: NodeId, class: u8, counter: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update([purpose, class]);
    h.update(from.to_be_bytes());
    h.update(to.to_be_bytes());
    h.update(counter.to_be_bytes());
    let out = h.finalize();
    u64::from_be_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Draw mapped to `[0, 1)`.
pub fn unit(draw: u64) -> f64 {
    (draw >> 11) as f64 / (1u64 << 53) as f64
}
