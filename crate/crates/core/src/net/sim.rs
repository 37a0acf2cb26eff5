//! Deterministic discrete-event network.
//!
//! Time is virtual and counted in microseconds. Each node is a single
//! server with a FIFO inbox: an input that arrives while the node is busy
//! waits, and handling an input advances the node's clock by the work it
//! charges under the [`CostModel`]. Delays, drops and corruptions are drawn
//! from keyed hashes of the seed, so a run is a pure function of its
//! configuration.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::Timestamp;
use crate::consensus::ConsensusMsg;
use crate::crypto::Digest;
use crate::wire::{Frame, Message};

use super::{
    keyed_draw, latency_class, unit, CostModel, Env, NetConfig, Node, NodeId, Op, Strategy, Timer,
    EPOCH_MS,
};

const DRAW_LATENCY: u8 = 1;
const DRAW_DROP: u8 = 2;
const DRAW_CORRUPT: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("virtual time limit of {limit_us} us reached with events pending")]
    LimitExceeded { limit_us: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub time_us: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub msg_type: u8,
    pub size: usize,
}

impl std::fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}, {}, {}, {:#04x}, {}",
            self.time_us, self.from, self.to, self.msg_type, self.size
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub partitioned: u64,
    pub corrupted: u64,
    pub timers: u64,
}

enum Item {
    Frame { from: NodeId, frame: Frame },
    Timer(Timer),
}

enum EventKind {
    Arrive { to: NodeId, item: Item },
    Service(NodeId),
}

struct Event {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

#[derive(Default)]
struct Link {
    counters: [u64; 8],
    /// Per class: the consensus block and round last seen, and messages
    /// sent for it.
    rounds: [(u64, u64); 8],
    /// Delivery times of the last `reorder_window` messages, oldest first.
    recent: VecDeque<u64>,
    /// Latest delivery time among all older messages.
    floor: u64,
}

struct Slot {
    node: Option<Box<dyn Node>>,
    inbox: VecDeque<(u64, Item)>,
    scheduled: bool,
    busy_until: u64,
    busy_total: u64,
    billed: bool,
}

struct SimEnv<'a> {
    start: u64,
    arrival: u64,
    charged: u64,
    cost: &'a CostModel,
    billed: bool,
    sends: Vec<(u64, NodeId, Frame)>,
    timers: Vec<(u64, Timer)>,
}

impl Env for SimEnv<'_> {
    fn now_us(&self) -> u64 {
        self.start + self.charged
    }

    fn arrival_us(&self) -> u64 {
        self.arrival
    }

    fn now_ms(&self) -> Timestamp {
        EPOCH_MS + self.now_us() / 1000
    }

    fn charge(&mut self, op: Op, count: u32) {
        if self.billed {
            self.charged += self.cost.cost(op) * count as u64;
        }
    }

    fn send(&mut self, to: NodeId, frame: Frame) {
        self.sends.push((self.now_us(), to, frame));
    }

    fn set_timer(&mut self, delay_us: u64, timer: Timer) {
        self.timers.push((self.now_us() + delay_us, timer));
    }
}

pub struct Sim {
    cfg: NetConfig,
    cost: CostModel,
    gateway_count: usize,
    group_of: HashMap<NodeId, usize>,
    slots: Vec<Slot>,
    events: BinaryHeap<Reverse<Event>>,
    links: HashMap<(NodeId, NodeId), Link>,
    now: u64,
    /// Latest time any node is busy until.
    horizon: u64,
    seq: u64,
    stats: NetStats,
    trace: Vec<TraceEntry>,
    /// Header digest to block id, for keying votes.
    block_ids: HashMap<Digest, u64>,
}

impl Sim {
    /// Nodes with ids below `gateway_count` are gateways; they are billed
    /// for work and subject to the inter-gateway link rules.
    pub fn new(cfg: NetConfig, cost: CostModel, gateway_count: usize) -> Self {
        let mut sim = Self {
            cfg,
            cost,
            gateway_count,
            group_of: HashMap::new(),
            slots: Vec::new(),
            events: BinaryHeap::new(),
            links: HashMap::new(),
            now: 0,
            horizon: 0,
            seq: 0,
            stats: NetStats::default(),
            trace: Vec::new(),
            block_ids: HashMap::new(),
        };
        let parts = sim.cfg.partitions.clone();
        sim.set_partitions(parts);
        sim
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Register a node and return its id.
    pub fn add_node(&mut self, node: Box<dyn Node>) -> NodeId {
        let id = self.slots.len();
        self.slots.push(Slot {
            node: Some(node),
            inbox: VecDeque::new(),
            scheduled: false,
            busy_until: 0,
            busy_total: 0,
            billed: id < self.gateway_count,
        });
        id as NodeId
    }

    pub fn node_count(&self) -> usize {
        self.slots.len()
    }

    pub fn is_gateway(&self, id: NodeId) -> bool {
        (id as usize) < self.gateway_count
    }

    pub fn node<T: 'static>(&self, id: NodeId) -> Option<&T> {
        self.slots
            .get(id as usize)?
            .node
            .as_ref()?
            .as_any()
            .downcast_ref()
    }

    pub fn node_mut<T: 'static>(&mut self, id: NodeId) -> Option<&mut T> {
        self.slots
            .get_mut(id as usize)?
            .node
            .as_mut()?
            .as_any_mut()
            .downcast_mut()
    }

    pub fn now_us(&self) -> u64 {
        self.now
    }

    /// Remove node `id` so another transport can drive it.
    pub fn take_node(&mut self, id: NodeId) -> Option<Box<dyn Node>> {
        self.slots.get_mut(id as usize)?.node.take()
    }

    /// Return a node removed with [`Sim::take_node`].
    pub fn put_node(&mut self, id: NodeId, node: Box<dyn Node>) {
        if let Some(slot) = self.slots.get_mut(id as usize) {
            slot.node = Some(node);
        }
    }

    /// Total virtual time node `id` spent handling inputs.
    pub fn busy_us(&self, id: NodeId) -> u64 {
        self.slots.get(id as usize).map_or(0, |s| s.busy_total)
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Replace the partition layout; takes effect for messages sent from
    /// now on.
    pub fn set_partitions(&mut self, partitions: Vec<Vec<NodeId>>) {
        self.group_of.clear();
        for (g, members) in partitions.iter().enumerate() {
            for m in members {
                self.group_of.insert(*m, g + 1);
            }
        }
        self.cfg.partitions = partitions;
    }

    fn push(&mut self, time: u64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Reverse(Event {
            time,
            seq: self.seq,
            kind,
        }));
    }

    /// Fire `timer` at `node` at absolute virtual time `at_us`.
    pub fn schedule_timer(&mut self, node: NodeId, at_us: u64, timer: Timer) {
        let at = at_us.max(self.now);
        self.push(
            at,
            EventKind::Arrive {
                to: node,
                item: Item::Timer(timer),
            },
        );
    }

    /// Hand `frame` to `to` as if `from` had sent it, bypassing link rules
    /// and delay.
    pub fn inject(&mut self, from: NodeId, to: NodeId, frame: Frame) {
        self.stats.sent += 1;
        let now = self.now;
        self.push(
            now,
            EventKind::Arrive {
                to,
                item: Item::Frame { from, frame },
            },
        );
    }

    /// Process the next event. Returns false when none is left.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(ev)) = self.events.pop() else {
            return false;
        };
        debug_assert!(ev.time >= self.now, "virtual time went backwards");
        self.now = ev.time;
        match ev.kind {
            EventKind::Arrive { to, item } => self.arrive(ev.time, to, item),
            EventKind::Service(id) => self.service(id),
        }
        true
    }

    /// Run until no events remain or the clock would pass `now + limit_us`.
    /// Returns the virtual time elapsed.
    pub fn run_until_quiescent(&mut self, limit_us: u64) -> Result<u64, SimError> {
        let start = self.now;
        let deadline = start.saturating_add(limit_us);
        while let Some(Reverse(ev)) = self.events.peek() {
            if ev.time > deadline {
                return Err(SimError::LimitExceeded { limit_us });
            }
            self.step();
        }
        self.now = self.now.max(self.horizon);
        Ok(self.now - start)
    }

    /// Process every event scheduled at or before `t`, then set the clock
    /// to `t`.
    pub fn run_until(&mut self, t: u64) {
        while self.events.peek().is_some_and(|Reverse(ev)| ev.time <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    pub fn is_quiescent(&self) -> bool {
        self.events.is_empty()
    }

    fn arrive(&mut self, time: u64, to: NodeId, item: Item) {
        let Some(slot) = self.slots.get_mut(to as usize) else {
            return;
        };
        match &item {
            Item::Frame { from, frame } => {
                self.stats.delivered += 1;
                if self.cfg.trace {
                    self.trace.push(TraceEntry {
                        time_us: time,
                        from: *from,
                        to,
                        msg_type: frame.type_byte().unwrap_or(0),
                        size: frame.len(),
                    });
                }
            }
            Item::Timer(_) => self.stats.timers += 1,
        }
        slot.inbox.push_back((time, item));
        if !slot.scheduled {
            slot.scheduled = true;
            let at = time.max(slot.busy_until);
            self.push(at, EventKind::Service(to));
        }
    }

    fn service(&mut self, id: NodeId) {
        let start = self.now;
        let slot = &mut self.slots[id as usize];
        let Some((arrival, item)) = slot.inbox.pop_front() else {
            slot.scheduled = false;
            return;
        };
        let mut node = slot.node.take().expect("node present outside its own handler");
        let mut env = SimEnv {
            start,
            arrival,
            charged: 0,
            cost: &self.cost,
            billed: slot.billed,
            sends: Vec::new(),
            timers: Vec::new(),
        };
        match item {
            Item::Frame { from, frame } => {
                env.charge(Op::Decode, 1);
                node.on_frame(from, &frame, &mut env);
            }
            Item::Timer(t) => node.on_timer(t, &mut env),
        }
        let end = env.now_us();
        let SimEnv { sends, timers, .. } = env;
        let slot = &mut self.slots[id as usize];
        slot.node = Some(node);
        slot.busy_until = end;
        slot.busy_total += end - start;
        self.horizon = self.horizon.max(end);
        if slot.inbox.is_empty() {
            slot.scheduled = false;
        } else {
            self.push(end, EventKind::Service(id));
        }
        for (at, timer) in timers {
            self.push(
                at,
                EventKind::Arrive {
                    to: id,
                    item: Item::Timer(timer),
                },
            );
        }
        for (at, to, frame) in sends {
            self.transmit(at, id, to, frame);
        }
    }

    /// 55-bit id of the block and round a consensus message belongs to.
    /// Blocks are named by their owner key, which does not depend on timing.
    fn consensus_id(&mut self, m: &ConsensusMsg) -> u64 {
        let word = |b: &[u8]| u64::from_be_bytes(b[..8].try_into().expect("8 bytes"));
        let block = match m {
            ConsensusMsg::PrePrepare { header, .. } | ConsensusMsg::WitnessRequest { header, .. } => {
                let id = word(header.owner_key.as_bytes());
                self.block_ids.insert(header.digest(), id);
                id
            }
            ConsensusMsg::Decision(d) => word(d.header.owner_key.as_bytes()),
            ConsensusMsg::Prepare { vote, .. } | ConsensusMsg::Commit { vote, .. } | ConsensusMsg::WitnessVote { vote, .. } => {
                let h = vote.header_hash;
                self.block_ids.get(&h).copied().unwrap_or_else(|| word(h.as_bytes()))
            }
        };
        (block ^ m.round().wrapping_mul(0x9e37_79b9_7f4a_7c15)) & ((1 << 55) - 1)
    }

    fn transmit(&mut self, at: u64, from: NodeId, to: NodeId, mut frame: Frame) {
        self.stats.sent += 1;
        if to as usize >= self.slots.len() {
            return;
        }
        let peer_link = self.is_gateway(from) && self.is_gateway(to);
        let class = latency_class(frame.type_byte().unwrap_or(0));
        let consensus = match frame.message() {
            Ok(Message::Consensus(m)) => Some(self.consensus_id(&m)),
            _ => None,
        };
        let link = self.links.entry((from, to)).or_default();
        let counter = match consensus {
            // Consensus delays follow the block and round, so a block sees
            // the same delays whatever else the link carried before it.
            Some(id) => {
                let slot = &mut link.rounds[class as usize];
                if slot.0 != id || slot.1 == 0 {
                    *slot = (id, 0);
                }
                slot.1 += 1;
                (1 << 63) | (id << 8) | (slot.1 - 1).min(0xff)
            }
            None => {
                link.counters[class as usize] += 1;
                link.counters[class as usize] - 1
            }
        };

        if peer_link {
            let g_from = self.group_of.get(&from).copied().unwrap_or(0);
            let g_to = self.group_of.get(&to).copied().unwrap_or(0);
            if g_from != g_to {
                self.stats.partitioned += 1;
                return;
            }
            if self.cfg.drop_rate > 0.0
                && unit(keyed_draw(self.cfg.seed, DRAW_DROP, from, to, class, counter)) < self.cfg.drop_rate
            {
                self.stats.dropped += 1;
                return;
            }
            if self.cfg.strategy_of(from) == Some(Strategy::CorruptPayload) && !frame.is_empty() {
                let draw = keyed_draw(self.cfg.seed, DRAW_CORRUPT, from, to, class, counter);
                let mut bytes = frame.bytes().to_vec();
                let pos = (draw % bytes.len() as u64) as usize;
                bytes[pos] ^= 1 << ((draw >> 32) % 8);
                frame = Frame::from_bytes(bytes);
                self.stats.corrupted += 1;
            }
        }

        let dist = if peer_link {
            self.cfg
                .link_latency
                .iter()
                .find(|(a, b, _)| (*a, *b) == (from, to) || (*a, *b) == (to, from))
                .map_or(self.cfg.latency, |l| l.2)
        } else {
            self.cfg.device_latency
        };
        let delay = dist.sample(keyed_draw(self.cfg.seed, DRAW_LATENCY, from, to, class, counter));
        let window = self.cfg.reorder_window;
        let link = self.links.get_mut(&(from, to)).expect("created above");
        let when = (at + delay).max(link.floor);
        link.recent.push_back(when);
        if link.recent.len() > window {
            let oldest = link.recent.pop_front().expect("non-empty");
            link.floor = link.floor.max(oldest);
        }
        self.push(
            when,
            EventKind::Arrive {
                to,
                item: Item::Frame { from, frame },
            },
        );
    }
}
