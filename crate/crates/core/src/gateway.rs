//! Gateway state machine.
//!
//! A gateway serves its home devices (onboarding, readings, key updates,
//! queries), takes part in header consensus with the other gateways, and
//! replicates every block and transaction it learns about.

use std::any::Any;
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use log::{debug, warn};

use crate::chain::{
    BlockHeader, Blockchain, DeviceInfo, Rejection, Rules, Transaction, DEFAULT_POLICY,
};
use crate::consensus::{
    build_candidate, AbortReason, Behaviour, ConsensusConfig, ConsensusDecision, ConsensusMsg,
    Effect, Engine, Output,
};
use crate::crypto::{Digest, KeyPair, PublicKey, VerifyCache};
use crate::journal::JournalWriter;
use crate::metrics::{Metric, Samples};
use crate::net::{Env, Node, NodeId, Op, Timer};
use crate::wire::{Frame, Message, Status, SyncBlock};

/// Tunables that are not part of the consensus configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewaySettings {
    pub policy: String,
    /// Lifetime of a device block.
    pub ttl_ms: u64,
    /// How long a pending join waits before it is re-checked.
    pub join_retry_ms: u64,
    pub max_join_attempts: u32,
    /// How long a device has to answer a key update request.
    pub key_update_timeout_ms: u64,
    pub max_new_key_attempts: u32,
    /// Back-off suggested to a device whose onboarding failed.
    pub retry_after_ms: u64,
    /// Out-of-order peer transactions held per peer.
    pub redelivery_cap: usize,
    pub sync_delay_ms: u64,
    /// Blocks per sync response.
    pub sync_batch: usize,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            policy: DEFAULT_POLICY.to_string(),
            ttl_ms: 24 * 3600 * 1000,
            join_retry_ms: 1000,
            max_join_attempts: 20,
            key_update_timeout_ms: 2000,
            max_new_key_attempts: 3,
            retry_after_ms: 1000,
            redelivery_cap: 64,
            sync_delay_ms: 20,
            sync_batch: 64,
        }
    }
}

/// Counters for events that do not change the chain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub rejections: BTreeMap<Rejection, u64>,
    /// Frames that failed to decode.
    pub malformed: u64,
    /// Peer traffic from a device or device traffic from a gateway.
    pub role_violations: u64,
    pub unexpected: u64,
    pub blocks_applied: u64,
    pub transactions_home: u64,
    pub transactions_replicated: u64,
    pub key_updates: u64,
    pub key_update_timeouts: u64,
    pub aborts: u64,
    /// A peer showed a different header at an index already filled.
    pub conflicts: u64,
    pub sync_requests_sent: u64,
    pub redelivery_overflow: u64,
    /// Peer transactions held back because they arrived early.
    pub buffered_transactions: u64,
    /// Blocks held back because they arrived ahead of the tip.
    pub parked_blocks: u64,
    pub join_failures: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JoinPurpose {
    Connect { device: NodeId },
    KeyUpdate { device: NodeId, old_key: PublicKey },
    Bootstrap,
}

#[derive(Debug, Clone)]
struct PendingJoin {
    purpose: JoinPurpose,
    attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SessionState {
    Active,
    /// Waiting for the device's new key, or for its block.
    Rotating { attempts: u32, answered: bool },
    /// The device did not rotate in time; readings are refused.
    TimedOut { attempts: u32 },
}

#[derive(Debug, Clone)]
struct Session {
    device: NodeId,
    state: SessionState,
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Leader { decided_at: u64 },
    Peer { arrival: u64 },
    Sync,
}

struct Parked {
    tx: Arc<Transaction>,
    header_hash: Digest,
    arrival: u64,
}

pub struct Gateway {
    id: NodeId,
    keys: KeyPair,
    cfg: Arc<ConsensusConfig>,
    settings: GatewaySettings,
    sigs: Arc<VerifyCache>,
    behaviour: Behaviour,
    chain: Blockchain,
    engine: Engine,

    queue: VecDeque<(PublicKey, NodeId)>,
    queued: HashSet<PublicKey>,
    in_flight: Option<(PublicKey, NodeId)>,
    proposal_started: Option<u64>,
    pending: BTreeMap<PublicKey, PendingJoin>,
    leader_activity: u64,

    sessions: HashMap<PublicKey, Session>,
    successor: HashMap<PublicKey, PublicKey>,
    predecessor: HashMap<PublicKey, PublicKey>,

    parked_blocks: BTreeMap<u64, (BlockHeader, ConsensusDecision, NodeId)>,
    redelivery: BTreeMap<NodeId, VecDeque<Parked>>,
    sync_peer: Option<NodeId>,
    sync_known: u64,
    sync_armed: bool,

    samples: Samples,
    stats: GatewayStats,
    journal: Option<JournalWriter>,
}

impl Gateway {
    /// `id` must equal this gateway's position in `cfg.gateways`.
    pub fn new(
        id: NodeId,
        keys: KeyPair,
        cfg: Arc<ConsensusConfig>,
        settings: GatewaySettings,
        sigs: Arc<VerifyCache>,
        behaviour: Behaviour,
    ) -> Self {
        debug_assert_eq!(cfg.position(&keys.public), Some(id as usize));
        let engine = Engine::new(cfg.clone(), keys.clone(), behaviour);
        Self {
            id,
            keys,
            cfg,
            settings,
            sigs,
            behaviour,
            chain: Blockchain::new(),
            engine,
            queue: VecDeque::new(),
            queued: HashSet::new(),
            in_flight: None,
            proposal_started: None,
            pending: BTreeMap::new(),
            leader_activity: 0,
            sessions: HashMap::new(),
            successor: HashMap::new(),
            predecessor: HashMap::new(),
            parked_blocks: BTreeMap::new(),
            redelivery: BTreeMap::new(),
            sync_peer: None,
            sync_known: 0,
            sync_armed: false,
            samples: Samples::default(),
            stats: GatewayStats::default(),
            journal: None,
        }
    }

    /// Write every chain change from now on to `journal`.
    pub fn with_journal(mut self, journal: JournalWriter) -> Self {
        self.journal = Some(journal);
        self
    }

    pub fn set_journal(&mut self, journal: JournalWriter) {
        self.journal = Some(journal);
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.cfg
    }

    pub fn chain(&self) -> &Blockchain {
        &self.chain
    }

    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    pub fn round(&self) -> u64 {
        self.engine.round()
    }

    pub fn behaviour(&self) -> Behaviour {
        self.behaviour
    }

    /// Keys of devices whose sessions are active here.
    pub fn home_devices(&self) -> Vec<PublicKey> {
        let mut keys: Vec<_> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.state == SessionState::Active)
            .map(|(k, _)| *k)
            .collect();
        keys.sort();
        keys
    }

    /// Rotation lineage of `key` known here, oldest first.
    pub fn lineage(&self, key: &PublicKey) -> Vec<PublicKey> {
        let mut root = *key;
        let mut guard = 0;
        while let Some(p) = self.predecessor.get(&root) {
            root = *p;
            guard += 1;
            if guard > self.predecessor.len() {
                break;
            }
        }
        let mut out = vec![root];
        while let Some(n) = self.successor.get(out.last().expect("non-empty")) {
            if out.contains(n) {
                break;
            }
            out.push(*n);
        }
        out
    }

    /// Pending joins, for diagnostics.
    pub fn pending_joins(&self) -> usize {
        self.pending.len()
    }

    pub fn flush_journal(&mut self) {
        if let Some(j) = self.journal.as_mut() {
            if let Err(e) = j.flush() {
                warn!("gateway {}: journal flush failed: {e}", self.id);
            }
        }
    }

    fn n(&self) -> NodeId {
        self.cfg.n() as NodeId
    }

    fn gateway_id(&self, key: &PublicKey) -> Option<NodeId> {
        self.cfg.position(key).map(|p| p as NodeId)
    }

    fn leader_id(&self) -> NodeId {
        self.gateway_id(&self.engine.leader()).expect("leader is a member")
    }

    fn muted(&self) -> bool {
        self.behaviour == Behaviour::MuteLeader && self.engine.is_leader()
    }

    fn reject(&mut self, r: Rejection) {
        *self.stats.rejections.entry(r).or_default() += 1;
    }

    fn is_bootstrap(&self, header: &BlockHeader) -> bool {
        self.cfg.is_gateway(&header.owner_key)
    }

    fn send(&self, env: &mut dyn Env, to: NodeId, msg: Message) {
        env.send(to, Frame::from_message(msg));
    }

    fn broadcast(&self, env: &mut dyn Env, msg: Message) {
        let frame = Frame::from_message(msg);
        for to in 0..self.n() {
            if to != self.id {
                env.send(to, frame.clone());
            }
        }
    }

    fn journal_block(&mut self, header: &BlockHeader, decision: &ConsensusDecision) {
        if let Some(j) = self.journal.as_mut() {
            if let Err(e) = j.block(header, decision) {
                warn!("gateway {}: journal write failed: {e}", self.id);
            }
        }
    }

    fn journal_tx(&mut self, block: u64, tx: &Transaction) {
        if let Some(j) = self.journal.as_mut() {
            if let Err(e) = j.transaction(block, tx) {
                warn!("gateway {}: journal write failed: {e}", self.id);
            }
        }
    }

    // ---- consensus plumbing ----

    fn drive(&mut self, out: Output, round_before: u64, env: &mut dyn Env) {
        env.charge(Op::Verify, out.work.verifies);
        env.charge(Op::Sign, out.work.signs);
        env.charge(Op::Hash, out.work.hashes);
        for effect in out.effects {
            match effect {
                Effect::Send { to, msg } => {
                    if self.muted() {
                        continue;
                    }
                    if let Some(id) = self.gateway_id(&to) {
                        self.send(env, id, Message::Consensus(msg));
                    }
                }
                Effect::Multicast { to, msg } => {
                    if self.muted() {
                        continue;
                    }
                    let frame = Frame::from_message(Message::Consensus(msg));
                    for key in &to {
                        if let Some(id) = self.gateway_id(key) {
                            env.send(id, frame.clone());
                        }
                    }
                }
                Effect::Decided(decision) => self.on_decided(decision, env),
                Effect::Aborted { header, reason } => self.on_aborted(header, reason, env),
                Effect::Sync { peer, known } => {
                    if let Some(id) = self.gateway_id(&peer) {
                        self.want_sync(id, known, env);
                    }
                }
            }
        }
        if self.engine.round() != round_before {
            self.after_round_change(env);
        }
    }

    fn advance_round(&mut self, round: u64, env: &mut dyn Env) {
        let r0 = self.engine.round();
        let mut out = Output::default();
        self.engine.advance_round(round, &mut out);
        self.drive(out, r0, env);
    }

    fn after_round_change(&mut self, env: &mut dyn Env) {
        if self.engine.is_leader() {
            self.try_propose(env);
            return;
        }
        // Hand queued joins to the new leader.
        let round = self.engine.round();
        let leader = self.leader_id();
        let queue = std::mem::take(&mut self.queue);
        self.queued.clear();
        for (key, _) in queue {
            if !self.chain.contains_key(&key) {
                self.send(env, leader, Message::JoinRequest { round, key });
            }
        }
    }

    fn enqueue(&mut self, key: PublicKey, requester: NodeId) {
        if self.in_flight.is_some_and(|(k, _)| k == key) || !self.queued.insert(key) {
            return;
        }
        self.queue.push_back((key, requester));
    }

    fn try_propose(&mut self, env: &mut dyn Env) {
        if !self.engine.is_leader() || self.engine.proposal().is_some() {
            return;
        }
        let header = match self.engine.locked_candidate(&self.chain) {
            Some(h) => Some(h),
            None => loop {
                let Some((key, requester)) = self.queue.pop_front() else {
                    break None;
                };
                if self.chain.contains_key(&key) {
                    self.queued.remove(&key);
                    if requester == self.id {
                        self.complete_join(key, env);
                    } else {
                        self.send(
                            env,
                            requester,
                            Message::JoinResult {
                                key,
                                status: Some(Rejection::DuplicateKey),
                            },
                        );
                    }
                    continue;
                }
                match build_candidate(
                    &self.chain,
                    &key,
                    &self.settings.policy,
                    env.now_ms(),
                    self.settings.ttl_ms,
                ) {
                    Ok(h) => {
                        self.in_flight = Some((key, requester));
                        break Some(h);
                    }
                    Err(r) => {
                        self.queued.remove(&key);
                        self.reject(r);
                        if requester != self.id {
                            self.send(env, requester, Message::JoinResult { key, status: Some(r) });
                        } else {
                            self.fail_join(key, r, env);
                        }
                    }
                }
            },
        };
        let Some(header) = header else { return };
        let index = header.index;
        let r0 = self.engine.round();
        let mut out = Output::default();
        match self.engine.propose(&self.chain, header, &mut out) {
            Ok(_) => {
                self.proposal_started = Some(env.now_us());
                env.set_timer(
                    self.cfg.timeout_ms * 1000,
                    Timer::ConsensusTimeout { round: r0, index },
                );
                self.drive(out, r0, env);
            }
            Err(r) => {
                debug!("gateway {}: proposal refused: {r}", self.id);
                if let Some((key, req)) = self.in_flight.take() {
                    self.queued.remove(&key);
                    self.enqueue(key, req);
                }
            }
        }
    }

    fn on_decided(&mut self, decision: ConsensusDecision, env: &mut dyn Env) {
        let now = env.now_us();
        let started = self.proposal_started.take();
        let header = decision.header.clone();
        if let (Some(t0), false) = (started, self.is_bootstrap(&header)) {
            self.samples.record(Metric::BlockConsensus, now - t0);
        }
        if self
            .apply_block(header.clone(), decision.clone(), Source::Leader { decided_at: now }, env)
            .is_ok()
            && !self.muted()
        {
            self.broadcast(env, Message::PeerBlock { header, decision });
        }
        self.try_propose(env);
    }

    fn on_aborted(&mut self, header: BlockHeader, reason: AbortReason, env: &mut dyn Env) {
        self.stats.aborts += 1;
        self.proposal_started = None;
        debug!(
            "gateway {}: proposal for index {} aborted: {reason:?}",
            self.id, header.index
        );
        if let Some((key, req)) = self.in_flight.take() {
            if !self.chain.contains_key(&key) {
                self.queued.insert(key);
                self.queue.push_front((key, req));
            } else {
                self.queued.remove(&key);
            }
        }
        if reason == AbortReason::Conflict {
            self.try_propose(env);
        }
    }

    /// Validate and append a committed block, then let everything that was
    /// waiting on it proceed.
    fn apply_block(
        &mut self,
        header: BlockHeader,
        decision: ConsensusDecision,
        source: Source,
        env: &mut dyn Env,
    ) -> Result<(), Rejection> {
        env.charge(Op::Verify, decision.votes.len() as u32);
        env.charge(Op::Hash, 1);
        let rules = Rules::new(&self.cfg, &*self.sigs);
        if let Err(r) = self.chain.append_block(&header, &decision, &rules) {
            self.reject(r);
            return Err(r);
        }
        env.charge(Op::Append, 1);
        self.journal_block(&header, &decision);
        self.stats.blocks_applied += 1;
        if !self.is_bootstrap(&header) {
            let now = env.now_us();
            match source {
                Source::Leader { decided_at } => {
                    self.samples.record(Metric::AddBlockLeader, now - decided_at)
                }
                Source::Peer { arrival } => {
                    self.samples.record(Metric::UpdateBlockchainBlock, now - arrival)
                }
                Source::Sync => {}
            }
        }
        if let Some((key, _)) = self.in_flight {
            if key == header.owner_key {
                self.in_flight = None;
                self.queued.remove(&key);
            }
        }

        let r0 = self.engine.round();
        let mut out = Output::default();
        self.engine.advance_round(decision.round, &mut out);
        self.engine.on_block_applied(&self.chain, &*self.sigs, &mut out);
        self.drive(out, r0, env);

        self.complete_join(header.owner_key, env);

        let next = self.chain.len() + 1;
        self.parked_blocks.retain(|idx, _| *idx >= next);
        if let Some((h, d, _)) = self.parked_blocks.remove(&next) {
            // Parked blocks are not sampled: their arrival time is stale.
            let _ = self.apply_block(h, d, Source::Sync, env);
        }
        self.redeliver(env);
        self.try_propose(env);
        Ok(())
    }

    fn want_sync(&mut self, peer: NodeId, known: u64, env: &mut dyn Env) {
        self.sync_peer = Some(peer);
        self.sync_known = self.sync_known.max(known);
        if !self.sync_armed {
            self.sync_armed = true;
            env.set_timer(self.settings.sync_delay_ms * 1000, Timer::SyncCheck);
        }
    }

    fn on_sync_check(&mut self, env: &mut dyn Env) {
        self.sync_armed = false;
        let Some(peer) = self.sync_peer.take() else { return };
        if self.chain.len() < self.sync_known {
            self.stats.sync_requests_sent += 1;
            self.send(
                env,
                peer,
                Message::SyncRequest {
                    from_index: self.chain.len() + 1,
                },
            );
        }
    }

    // ---- joins ----

    fn start_join(&mut self, key: PublicKey, env: &mut dyn Env) {
        if self.engine.is_leader() {
            self.enqueue(key, self.id);
            self.try_propose(env);
        } else {
            let round = self.engine.round();
            self.send(env, self.leader_id(), Message::JoinRequest { round, key });
        }
        env.set_timer(
            self.settings.join_retry_ms * 1000,
            Timer::JoinRetry {
                key,
                mark: self.leader_activity,
            },
        );
    }

    fn on_join_retry(&mut self, key: PublicKey, mark: u64, env: &mut dyn Env) {
        let Some(p) = self.pending.get_mut(&key) else { return };
        p.attempts += 1;
        let attempts = p.attempts;
        if self.chain.contains_key(&key) {
            self.complete_join(key, env);
            return;
        }
        if attempts > self.settings.max_join_attempts {
            self.fail_join(key, Rejection::ConsensusFailed, env);
            return;
        }
        if mark == self.leader_activity {
            // The leader made no visible progress: move on to the next one.
            let next = self.engine.round() + 1;
            self.advance_round(next, env);
        }
        self.start_join(key, env);
    }

    fn complete_join(&mut self, key: PublicKey, env: &mut dyn Env) {
        let Some(p) = self.pending.remove(&key) else { return };
        match p.purpose {
            JoinPurpose::Bootstrap => {}
            JoinPurpose::Connect { device } => {
                self.sessions.insert(
                    key,
                    Session {
                        device,
                        state: SessionState::Active,
                    },
                );
                self.send(env, device, connect_result(key, None, 0));
            }
            JoinPurpose::KeyUpdate { device, old_key } => {
                self.sessions.remove(&old_key);
                self.sessions.insert(
                    key,
                    Session {
                        device,
                        state: SessionState::Active,
                    },
                );
                self.successor.insert(old_key, key);
                self.predecessor.insert(key, old_key);
                self.stats.key_updates += 1;
                self.send(env, device, connect_result(key, None, 0));
            }
        }
    }

    fn fail_join(&mut self, key: PublicKey, status: Rejection, env: &mut dyn Env) {
        let Some(p) = self.pending.remove(&key) else { return };
        self.stats.join_failures += 1;
        let retry = self.settings.retry_after_ms;
        match p.purpose {
            JoinPurpose::Bootstrap => warn!("gateway {}: bootstrap join failed: {status}", self.id),
            JoinPurpose::Connect { device } => {
                self.send(env, device, connect_result(key, Some(status), retry));
            }
            JoinPurpose::KeyUpdate { device, old_key } => {
                let attempts = self.settings.max_new_key_attempts;
                if let Some(s) = self.sessions.get_mut(&old_key) {
                    s.state = SessionState::TimedOut { attempts };
                }
                self.send(env, device, connect_result(key, Some(status), retry));
            }
        }
    }

    fn on_join_request(&mut self, from: NodeId, round: u64, key: PublicKey, env: &mut dyn Env) {
        self.advance_round(round, env);
        if self.chain.contains_key(&key) {
            self.send(
                env,
                from,
                Message::JoinResult {
                    key,
                    status: Some(Rejection::DuplicateKey),
                },
            );
            return;
        }
        if self.engine.is_leader() {
            self.enqueue(key, from);
            self.try_propose(env);
        } else {
            let round = self.engine.round();
            self.send(env, self.leader_id(), Message::JoinRequest { round, key });
        }
    }

    fn on_join_result(&mut self, from: NodeId, key: PublicKey, status: Status, env: &mut dyn Env) {
        if Some(from) == Some(self.leader_id()) {
            self.leader_activity += 1;
        }
        match status {
            None => {}
            Some(Rejection::DuplicateKey) => {
                if self.chain.contains_key(&key) {
                    self.complete_join(key, env);
                } else {
                    let known = self.chain.len() + 1;
                    self.want_sync(from, known, env);
                }
            }
            Some(r) => {
                if self.pending.contains_key(&key) {
                    self.fail_join(key, r, env);
                }
            }
        }
    }

    // ---- peer replication ----

    fn on_peer_block(
        &mut self,
        from: NodeId,
        header: BlockHeader,
        decision: ConsensusDecision,
        env: &mut dyn Env,
    ) {
        if Some(&self.cfg.gateways[from as usize]) == Some(self.cfg.leader(decision.round)) {
            self.leader_activity += 1;
        }
        if decision.header != header {
            self.reject(Rejection::InsufficientQuorum);
            return;
        }
        let next = self.chain.len() + 1;
        if header.index < next {
            env.charge(Op::Hash, 1);
            let local = self.chain.block(header.index).map(|b| b.header_hash());
            if local != Some(header.digest()) {
                self.stats.conflicts += 1;
                self.reject(Rejection::BadPrevHash);
            }
            return;
        }
        if header.index > next {
            self.stats.parked_blocks += 1;
            if self.parked_blocks.len() < 256 {
                self.parked_blocks
                    .insert(header.index, (header.clone(), decision, from));
            }
            self.want_sync(from, header.index, env);
            return;
        }
        let arrival = env.arrival_us();
        if let Err(r) = self.apply_block(header, decision, Source::Peer { arrival }, env) {
            if r == Rejection::BadPrevHash {
                let known = self.chain.len() + 1;
                self.want_sync(from, known, env);
            }
        }
    }

    fn on_peer_transaction(
        &mut self,
        from: NodeId,
        tx: Arc<Transaction>,
        header_hash: Digest,
        env: &mut dyn Env,
    ) {
        let arrival = env.arrival_us();
        match self.try_replicate(&tx, &header_hash, arrival, env) {
            Ok(()) => self.redeliver(env),
            Err(Rejection::UnknownBlock) | Err(Rejection::BadIndex) => {
                let cap = self.settings.redelivery_cap;
                let buf = self.redelivery.entry(from).or_default();
                if buf.len() >= cap {
                    buf.pop_front();
                    self.stats.redelivery_overflow += 1;
                }
                self.stats.buffered_transactions += 1;
                buf.push_back(Parked {
                    tx,
                    header_hash,
                    arrival,
                });
                if self.chain.find_by_header_hash(&header_hash).is_none() {
                    let known = self.chain.len() + 1;
                    self.want_sync(from, known, env);
                }
            }
            Err(Rejection::Duplicate) => {}
            Err(r) => self.reject(r),
        }
    }

    fn try_replicate(
        &mut self,
        tx: &Arc<Transaction>,
        header_hash: &Digest,
        arrival: u64,
        env: &mut dyn Env,
    ) -> Result<(), Rejection> {
        let block = self
            .chain
            .find_by_header_hash(header_hash)
            .ok_or(Rejection::UnknownBlock)?;
        let ledger_len = self.chain.block(block).map_or(0, |b| b.len() as u64);
        if tx.index > ledger_len + 1 {
            return Err(Rejection::BadIndex);
        }
        let rules = Rules::new(&self.cfg, &*self.sigs);
        let result = self.chain.append_transaction(block, tx.clone(), &rules);
        if matches!(
            result,
            Ok(()) | Err(Rejection::BadDeviceSig) | Err(Rejection::BadGatewaySig)
        ) {
            env.charge(Op::Verify, 2);
            env.charge(Op::Hash, 1);
        }
        result?;
        env.charge(Op::Append, 1);
        self.samples
            .record(Metric::UpdateBlockchainTrans, env.now_us() - arrival);
        self.stats.transactions_replicated += 1;
        self.journal_tx(block, tx);
        Ok(())
    }

    /// Re-offer buffered peer transactions until none makes progress.
    fn redeliver(&mut self, env: &mut dyn Env) {
        if self.redelivery.values().all(VecDeque::is_empty) {
            return;
        }
        loop {
            let mut progress = false;
            let peers: Vec<NodeId> = self.redelivery.keys().copied().collect();
            for peer in peers {
                let items = std::mem::take(self.redelivery.get_mut(&peer).expect("listed"));
                let mut keep = VecDeque::with_capacity(items.len());
                for p in items {
                    match self.try_replicate(&p.tx, &p.header_hash, p.arrival, env) {
                        Ok(()) => progress = true,
                        Err(Rejection::UnknownBlock) | Err(Rejection::BadIndex) => keep.push_back(p),
                        Err(Rejection::Duplicate) => {}
                        Err(r) => self.reject(r),
                    }
                }
                *self.redelivery.get_mut(&peer).expect("listed") = keep;
            }
            if !progress {
                break;
            }
        }
    }

    fn on_sync_request(&mut self, from: NodeId, from_index: u64, env: &mut dyn Env) {
        let start = from_index.max(1);
        let end = self
            .chain
            .len()
            .min(start.saturating_add(self.settings.sync_batch as u64) - 1);
        let mut blocks = Vec::new();
        for idx in start..=end {
            if let Some(b) = self.chain.block(idx) {
                blocks.push(SyncBlock {
                    decision: b.proof().clone(),
                    ledger: b.ledger().to_vec(),
                });
            }
        }
        let next = (end < self.chain.len()).then_some(end + 1);
        self.send(env, from, Message::SyncResponse { blocks, next });
    }

    fn on_sync_response(
        &mut self,
        from: NodeId,
        blocks: Vec<SyncBlock>,
        next: Option<u64>,
        env: &mut dyn Env,
    ) {
        for b in blocks {
            let idx = b.decision.header.index;
            let len = self.chain.len();
            if idx == len + 1 {
                let header = b.decision.header.clone();
                if self.apply_block(header, b.decision, Source::Sync, env).is_err() {
                    break;
                }
            } else if idx > len + 1 {
                break;
            } else {
                env.charge(Op::Hash, 1);
                let local = self.chain.block(idx).map(|blk| blk.header_hash());
                if local != Some(b.decision.header.digest()) {
                    self.stats.conflicts += 1;
                    continue;
                }
            }
            let have = self.chain.block(idx).map_or(0, |blk| blk.len());
            let rules = Rules::new(&self.cfg, &*self.sigs);
            for tx in b.ledger.iter().skip(have) {
                env.charge(Op::Verify, 2);
                env.charge(Op::Append, 1);
                match self.chain.append_transaction(idx, tx.clone(), &rules) {
                    Ok(()) => {
                        if let Some(j) = self.journal.as_mut() {
                            if let Err(e) = j.transaction(idx, tx) {
                                warn!("gateway {}: journal write failed: {e}", self.id);
                            }
                        }
                    }
                    Err(r) => {
                        *self.stats.rejections.entry(r).or_default() += 1;
                        break;
                    }
                }
            }
        }
        self.redeliver(env);
        self.try_propose(env);
        if let Some(n) = next {
            self.stats.sync_requests_sent += 1;
            self.send(env, from, Message::SyncRequest { from_index: n });
        }
    }

    fn on_consensus(&mut self, from: NodeId, msg: ConsensusMsg, env: &mut dyn Env) {
        let from_key = self.cfg.gateways[from as usize];
        if let ConsensusMsg::Decision(d) = msg {
            let header = d.header.clone();
            self.on_peer_block(from, header, d, env);
            return;
        }
        if matches!(
            msg,
            ConsensusMsg::PrePrepare { .. } | ConsensusMsg::WitnessRequest { .. }
        ) && from_key == *self.cfg.leader(msg.round())
        {
            self.leader_activity += 1;
        }
        let r0 = self.engine.round();
        let mut out = Output::default();
        self.engine
            .on_message(&self.chain, from_key, msg, &*self.sigs, &mut out);
        self.drive(out, r0, env);
    }

    // ---- device traffic ----

    fn on_connect(&mut self, device: NodeId, key: PublicKey, env: &mut dyn Env) {
        if self.chain.contains_key(&key) {
            let status = match self.sessions.get(&key) {
                Some(s) if s.device != device => Some(Rejection::NotHome),
                _ if self.cfg.is_gateway(&key) => Some(Rejection::DuplicateKey),
                _ => {
                    self.sessions.entry(key).or_insert(Session {
                        device,
                        state: SessionState::Active,
                    });
                    None
                }
            };
            self.send(env, device, connect_result(key, status, 0));
            return;
        }
        if self.pending.contains_key(&key) {
            return;
        }
        self.pending.insert(
            key,
            PendingJoin {
                purpose: JoinPurpose::Connect { device },
                attempts: 0,
            },
        );
        self.start_join(key, env);
    }

    fn ack(&self, env: &mut dyn Env, to: NodeId, key: PublicKey, produced_at: u64, status: Status) {
        self.send(
            env,
            to,
            Message::DataAck {
                key,
                produced_at,
                status,
            },
        );
    }

    fn on_data(&mut self, device: NodeId, key: PublicKey, info: DeviceInfo, env: &mut dyn Env) {
        let produced_at = info.produced_at;
        let state = match self.sessions.get(&key) {
            Some(s) if s.device == device => s.state,
            Some(_) => {
                self.reject(Rejection::NotHome);
                return self.ack(env, device, key, produced_at, Some(Rejection::NotHome));
            }
            None => {
                let r = if self.chain.contains_key(&key) {
                    Rejection::NotHome
                } else {
                    Rejection::UnknownKey
                };
                self.reject(r);
                return self.ack(env, device, key, produced_at, Some(r));
            }
        };
        match state {
            SessionState::Active => {}
            SessionState::Rotating { .. } => {
                return self.ack(env, device, key, produced_at, Some(Rejection::ExpiredBlock));
            }
            SessionState::TimedOut { .. } => {
                self.reject(Rejection::KeyUpdateTimeout);
                self.begin_key_update(key, device, 1, env);
                return self.ack(env, device, key, produced_at, Some(Rejection::KeyUpdateTimeout));
            }
        }
        env.charge(Op::Verify, 1);
        if !info.verify(&key, &*self.sigs) {
            self.reject(Rejection::BadDeviceSig);
            return self.ack(env, device, key, produced_at, Some(Rejection::BadDeviceSig));
        }
        let block = self.chain.lookup_block(&key).expect("active sessions have blocks");
        let tx = match self.chain.build_transaction(block, info, &self.keys) {
            Ok(tx) => tx,
            Err(Rejection::ExpiredBlock) => {
                self.reject(Rejection::ExpiredBlock);
                self.begin_key_update(key, device, 1, env);
                return self.ack(env, device, key, produced_at, Some(Rejection::ExpiredBlock));
            }
            Err(r) => {
                self.reject(r);
                return self.ack(env, device, key, produced_at, Some(r));
            }
        };
        env.charge(Op::Sign, 1);
        env.charge(Op::Hash, 1);
        self.sigs
            .record_signed(&self.keys.public, &tx.gateway_signing_bytes(), &tx.gateway_sig);
        let tx = Arc::new(tx);
        let rules = Rules::new(&self.cfg, &*self.sigs);
        if let Err(r) = self.chain.append_transaction(block, tx.clone(), &rules) {
            self.reject(r);
            return self.ack(env, device, key, produced_at, Some(r));
        }
        env.charge(Op::Append, 1);
        self.samples
            .record(Metric::AppendTransactionGw, env.now_us() - env.arrival_us());
        self.stats.transactions_home += 1;
        self.journal_tx(block, &tx);
        let header_hash = self.chain.block(block).expect("exists").header_hash();
        self.broadcast(env, Message::PeerTransaction { tx, header_hash });
        self.ack(env, device, key, produced_at, None);
    }

    fn begin_key_update(&mut self, old_key: PublicKey, device: NodeId, attempt: u32, env: &mut dyn Env) {
        if let Some(s) = self.sessions.get_mut(&old_key) {
            s.state = SessionState::Rotating {
                attempts: attempt,
                answered: false,
            };
        }
        self.send(env, device, Message::NewKeyRequest { old_key });
        env.set_timer(
            self.settings.key_update_timeout_ms * 1000,
            Timer::KeyUpdateTimeout { old_key, attempt },
        );
    }

    fn on_key_update_timeout(&mut self, old_key: PublicKey, attempt: u32, env: &mut dyn Env) {
        let Some(s) = self.sessions.get_mut(&old_key) else { return };
        if s.state
            != (SessionState::Rotating {
                attempts: attempt,
                answered: false,
            })
        {
            return;
        }
        s.state = SessionState::TimedOut { attempts: attempt };
        self.stats.key_update_timeouts += 1;
        if attempt < self.settings.max_new_key_attempts {
            env.set_timer(
                self.settings.retry_after_ms * 1000,
                Timer::KeyUpdateRetry { old_key, attempt },
            );
        }
    }

    fn on_key_update_retry(&mut self, old_key: PublicKey, attempt: u32, env: &mut dyn Env) {
        let Some(s) = self.sessions.get(&old_key) else { return };
        if s.state == (SessionState::TimedOut { attempts: attempt }) {
            let device = s.device;
            self.begin_key_update(old_key, device, attempt + 1, env);
        }
    }

    fn on_new_key_response(
        &mut self,
        device: NodeId,
        old_key: PublicKey,
        new_key: PublicKey,
        env: &mut dyn Env,
    ) {
        let Some(s) = self.sessions.get(&old_key) else {
            return self.reject(Rejection::UnknownKey);
        };
        if s.device != device {
            return self.reject(Rejection::NotHome);
        }
        let attempts = match s.state {
            SessionState::Rotating {
                answered: false,
                attempts,
            } => attempts,
            SessionState::TimedOut { .. } => 0,
            _ => return,
        };
        let invalid = new_key == old_key
            || self.chain.contains_key(&new_key)
            || self.pending.contains_key(&new_key)
            || self.sessions.contains_key(&new_key)
            || self.queued.contains(&new_key);
        if invalid {
            self.reject(Rejection::InvalidNewKey);
            self.send(
                env,
                device,
                connect_result(new_key, Some(Rejection::InvalidNewKey), 0),
            );
            let s = self.sessions.get_mut(&old_key).expect("checked");
            if attempts < self.settings.max_new_key_attempts {
                let device = s.device;
                self.begin_key_update(old_key, device, attempts + 1, env);
            } else {
                s.state = SessionState::TimedOut { attempts };
            }
            return;
        }
        self.sessions.get_mut(&old_key).expect("checked").state = SessionState::Rotating {
            attempts,
            answered: true,
        };
        self.pending.insert(
            new_key,
            PendingJoin {
                purpose: JoinPurpose::KeyUpdate { device, old_key },
                attempts: 0,
            },
        );
        self.start_join(new_key, env);
    }

    fn on_query(&mut self, from: NodeId, key: PublicKey, level: u64, env: &mut dyn Env) {
        let mut entries = Vec::new();
        let mut found = false;
        for k in self.lineage(&key) {
            if let Some(block) = self.chain.lookup_block(&k) {
                found = true;
                entries.extend(self.chain.readable_entries(block, level).cloned());
            }
        }
        let status = (!found).then_some(Rejection::UnknownKey);
        self.send(
            env,
            from,
            Message::QueryResponse {
                key,
                status,
                entries,
            },
        );
    }
}

fn connect_result(key: PublicKey, status: Status, retry_after_ms: u64) -> Message {
    Message::ConnectResult {
        key,
        status,
        retry_after_ms,
    }
}

impl Node for Gateway {
    fn on_frame(&mut self, from: NodeId, frame: &Frame, env: &mut dyn Env) {
        let Some(kind) = frame.type_byte() else {
            self.stats.malformed += 1;
            return;
        };
        let from_gateway = from < self.n();
        if Message::is_peer_type(kind) != from_gateway || from == self.id {
            self.stats.role_violations += 1;
            return;
        }
        let msg = match frame.message() {
            Ok(m) => m.clone(),
            Err(e) => {
                debug!("gateway {}: dropping frame from {from}: {e}", self.id);
                self.stats.malformed += 1;
                return;
            }
        };
        match msg {
            Message::Consensus(m) => self.on_consensus(from, m, env),
            Message::PeerTransaction { tx, header_hash } => {
                self.on_peer_transaction(from, tx, header_hash, env)
            }
            Message::PeerBlock { header, decision } => self.on_peer_block(from, header, decision, env),
            Message::SyncRequest { from_index } => self.on_sync_request(from, from_index, env),
            Message::SyncResponse { blocks, next } => self.on_sync_response(from, blocks, next, env),
            Message::JoinRequest { round, key } => self.on_join_request(from, round, key, env),
            Message::JoinResult { key, status } => self.on_join_result(from, key, status, env),
            Message::Connect { key } => self.on_connect(from, key, env),
            Message::Data { key, info } => self.on_data(from, key, info, env),
            Message::NewKeyResponse { old_key, new_key } => {
                self.on_new_key_response(from, old_key, new_key, env)
            }
            Message::Query { key, level } => self.on_query(from, key, level, env),
            Message::NewKeyRequest { .. }
            | Message::QueryResponse { .. }
            | Message::ConnectResult { .. }
            | Message::DataAck { .. } => self.stats.unexpected += 1,
        }
    }

    fn on_timer(&mut self, timer: Timer, env: &mut dyn Env) {
        match timer {
            Timer::ConsensusTimeout { round, index } => {
                let r0 = self.engine.round();
                let mut out = Output::default();
                self.engine.on_timeout(round, index, &mut out);
                self.drive(out, r0, env);
            }
            Timer::JoinRetry { key, mark } => self.on_join_retry(key, mark, env),
            Timer::SyncCheck => self.on_sync_check(env),
            Timer::KeyUpdateTimeout { old_key, attempt } => {
                self.on_key_update_timeout(old_key, attempt, env)
            }
            Timer::KeyUpdateRetry { old_key, attempt } => self.on_key_update_retry(old_key, attempt, env),
            Timer::Bootstrap => {
                let key = self.keys.public;
                if !self.chain.contains_key(&key) && !self.pending.contains_key(&key) {
                    self.pending.insert(
                        key,
                        PendingJoin {
                            purpose: JoinPurpose::Bootstrap,
                            attempts: 0,
                        },
                    );
                    self.start_join(key, env);
                }
            }
            Timer::DeviceConnect | Timer::DeviceEmit => self.stats.unexpected += 1,
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
