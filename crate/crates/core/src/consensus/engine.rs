//! Per-gateway consensus state machine.
//!
//! The engine does no I/O. Callers feed it messages, timeouts and chain
//! changes; it answers with [`Effect`]s and a count of the cryptographic
//! work performed, which the caller carries out and bills.
//!
//! Rounds are global and only move forward. A gateway adopts any higher
//! round it hears about, and the leader of the current round proposes one
//! header at a time. Under PBFT a gateway that has seen a prepare quorum
//! for a header locks it for that index and never votes for a different
//! header there; a locked gateway that becomes leader re-proposes its lock.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use crate::chain::{BlockHeader, Blockchain, Rejection};
use crate::crypto::{hash, Digest, KeyPair, PublicKey, SignatureCheck};

use super::{validate_candidate, Algorithm, ConsensusConfig, ConsensusDecision, ConsensusMsg, Phase, Vote};

/// Buffered messages for future indices, across all indices.
const FUTURE_CAP: usize = 256;
/// Prepare-vote sets kept for headers not yet seen.
const ORPHAN_CAP: usize = 4096;

/// How a gateway takes part in consensus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Behaviour {
    #[default]
    Honest,
    /// Leader: sends conflicting candidates to different peers.
    /// Validator: votes for every candidate plus fabricated digests.
    /// Witness: approves anything.
    Equivocate,
    /// Drops its own consensus traffic while leader. Enforced by the
    /// gateway; the engine itself runs honestly.
    MuteLeader,
}

/// Cryptographic operations performed while handling one input.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Work {
    pub verifies: u32,
    pub signs: u32,
    pub hashes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    Timeout,
    /// Another header was applied at the proposal's index.
    Conflict,
    /// A higher round was adopted.
    Superseded,
}

#[derive(Debug, Clone)]
pub enum Effect {
    Send { to: PublicKey, msg: ConsensusMsg },
    Multicast { to: Vec<PublicKey>, msg: ConsensusMsg },
    /// The local proposal gathered enough votes.
    Decided(ConsensusDecision),
    /// The local proposal was abandoned.
    Aborted { header: BlockHeader, reason: AbortReason },
    /// `peer` referred to an index beyond the local tip; blocks up to
    /// `known` must exist.
    Sync { peer: PublicKey, known: u64 },
}

#[derive(Debug, Default)]
pub struct Output {
    pub effects: Vec<Effect>,
    pub work: Work,
}

#[derive(Debug)]
struct Proposal {
    round: u64,
    index: u64,
    variants: Vec<(BlockHeader, Digest)>,
    votes: HashMap<Digest, Vec<Vote>>,
}

#[derive(Debug)]
pub struct Engine {
    cfg: Arc<ConsensusConfig>,
    keys: KeyPair,
    behaviour: Behaviour,
    round: u64,
    proposal: Option<Proposal>,
    accepted: HashMap<(u64, u64), Digest>,
    headers: HashMap<Digest, BlockHeader>,
    prepares: HashMap<Digest, HashSet<PublicKey>>,
    prepare_sent: HashSet<(Digest, u64)>,
    commit_sent: HashSet<(Digest, u64)>,
    locks: BTreeMap<u64, Digest>,
    witness_voted: HashMap<(u64, u64), Digest>,
    future: BTreeMap<u64, Vec<(PublicKey, ConsensusMsg)>>,
    future_len: usize,
}

impl Engine {
    pub fn new(cfg: Arc<ConsensusConfig>, keys: KeyPair, behaviour: Behaviour) -> Self {
        Self {
            cfg,
            keys,
            behaviour,
            round: 0,
            proposal: None,
            accepted: HashMap::new(),
            headers: HashMap::new(),
            prepares: HashMap::new(),
            prepare_sent: HashSet::new(),
            commit_sent: HashSet::new(),
            locks: BTreeMap::new(),
            witness_voted: HashMap::new(),
            future: BTreeMap::new(),
            future_len: 0,
        }
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.cfg
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn leader(&self) -> PublicKey {
        *self.cfg.leader(self.round)
    }

    pub fn is_leader(&self) -> bool {
        self.leader() == self.keys.public
    }

    pub fn behaviour(&self) -> Behaviour {
        self.behaviour
    }

    /// `(round, index)` of the running local proposal.
    pub fn proposal(&self) -> Option<(u64, u64)> {
        self.proposal.as_ref().map(|p| (p.round, p.index))
    }

    fn me(&self) -> PublicKey {
        self.keys.public
    }

    fn peers(&self) -> Vec<PublicKey> {
        let me = self.me();
        self.cfg.gateways.iter().copied().filter(|g| *g != me).collect()
    }

    /// Header this gateway is locked on for the next index, if any.
    pub fn locked_candidate(&self, chain: &Blockchain) -> Option<BlockHeader> {
        self.locks
            .get(&(chain.len() + 1))
            .and_then(|h| self.headers.get(h))
            .cloned()
    }

    /// Move to `round` if it is ahead of the current one.
    pub fn advance_round(&mut self, round: u64, out: &mut Output) {
        if round <= self.round {
            return;
        }
        self.round = round;
        if self.proposal.as_ref().is_some_and(|p| p.round < round) {
            let p = self.proposal.take().expect("checked");
            out.effects.push(Effect::Aborted {
                header: p.variants[0].0.clone(),
                reason: AbortReason::Superseded,
            });
        }
        // Votes are never cast in a past round again.
        self.accepted.retain(|(_, r), _| *r >= round);
        self.witness_voted.retain(|(_, r), _| *r >= round);
        self.prepare_sent.retain(|(_, r)| *r >= round);
        self.commit_sent.retain(|(_, r)| *r >= round);
    }

    /// Start consensus on `header` as leader of the current round.
    pub fn propose(
        &mut self,
        chain: &Blockchain,
        header: BlockHeader,
        out: &mut Output,
    ) -> Result<Digest, Rejection> {
        if !self.is_leader() || self.proposal.is_some() {
            return Err(Rejection::ConsensusFailed);
        }
        validate_candidate(chain, &header)?;
        let round = self.round;
        let index = header.index;
        let mut variants = vec![(header.clone(), header.digest())];
        out.work.hashes += 1;
        if self.behaviour == Behaviour::Equivocate {
            let mut twin = header;
            twin.created_at += 1;
            twin.expires_at += 1;
            let d = twin.digest();
            out.work.hashes += 1;
            variants.push((twin, d));
        }
        let primary = variants[0].1;
        self.proposal = Some(Proposal {
            round,
            index,
            variants: variants.clone(),
            votes: HashMap::new(),
        });

        let peers = self.peers();
        let groups: Vec<Vec<PublicKey>> = if variants.len() == 1 {
            vec![peers]
        } else {
            let half = peers.len().div_ceil(2);
            vec![peers[..half].to_vec(), peers[half..].to_vec()]
        };
        for ((header, digest), to) in variants.iter().zip(groups) {
            match self.cfg.algorithm {
                Algorithm::Witness => {
                    out.effects.push(Effect::Multicast {
                        to,
                        msg: ConsensusMsg::WitnessRequest {
                            round,
                            header: header.clone(),
                        },
                    });
                }
                Algorithm::Pbft => {
                    self.headers.insert(*digest, header.clone());
                    out.effects.push(Effect::Multicast {
                        to,
                        msg: ConsensusMsg::PrePrepare {
                            round,
                            header: header.clone(),
                        },
                    });
                }
            }
        }
        if self.cfg.algorithm == Algorithm::Pbft {
            if self.behaviour == Behaviour::Equivocate {
                for (_, d) in &variants {
                    self.send_prepare(*d, round, out);
                    self.send_commit(*d, round, out);
                }
            } else {
                self.accepted.insert((index, round), primary);
                self.send_prepare(primary, round, out);
                self.check_prepared(primary, index, out);
            }
        }
        Ok(primary)
    }

    /// Abandon the proposal for `(round, index)` if it is still running.
    pub fn on_timeout(&mut self, round: u64, index: u64, out: &mut Output) {
        if self.proposal() != Some((round, index)) {
            return;
        }
        let p = self.proposal.take().expect("checked");
        out.effects.push(Effect::Aborted {
            header: p.variants[0].0.clone(),
            reason: AbortReason::Timeout,
        });
        self.advance_round(round.saturating_add(1), out);
    }

    /// Garbage-collect state for applied indices and replay buffered
    /// messages for the new next index.
    pub fn on_block_applied(
        &mut self,
        chain: &Blockchain,
        sigs: &dyn SignatureCheck,
        out: &mut Output,
    ) {
        let len = chain.len();
        if self.proposal.as_ref().is_some_and(|p| p.index <= len) {
            let p = self.proposal.take().expect("checked");
            let applied = chain.block(p.index).map(|b| b.header_hash());
            let own = p.variants.iter().find(|(_, d)| Some(*d) == applied);
            match own {
                // Our own header arrived through another path; the
                // proposal is complete rather than conflicting.
                Some(_) => {}
                None => out.effects.push(Effect::Aborted {
                    header: p.variants[0].0.clone(),
                    reason: AbortReason::Conflict,
                }),
            }
        }
        self.locks.retain(|idx, _| *idx > len);
        self.accepted.retain(|(idx, _), _| *idx > len);
        self.witness_voted.retain(|(idx, _), _| *idx > len);
        let stale: Vec<Digest> = self
            .headers
            .iter()
            .filter(|(_, h)| h.index <= len)
            .map(|(d, _)| *d)
            .collect();
        for d in &stale {
            self.headers.remove(d);
            self.prepares.remove(d);
        }
        if self.prepares.len() > ORPHAN_CAP {
            let headers = &self.headers;
            self.prepares.retain(|d, _| headers.contains_key(d));
        }
        let headers = &self.headers;
        self.prepare_sent.retain(|(d, _)| headers.contains_key(d));
        self.commit_sent.retain(|(d, _)| headers.contains_key(d));

        let stale_keys: Vec<u64> = self.future.range(..=len).map(|(k, _)| *k).collect();
        for k in stale_keys {
            if let Some(v) = self.future.remove(&k) {
                self.future_len -= v.len();
            }
        }
        if let Some(ready) = self.future.remove(&(len + 1)) {
            self.future_len -= ready.len();
            for (from, msg) in ready {
                self.on_message(chain, from, msg, sigs, out);
            }
        }
    }

    /// Handle a consensus message from gateway `from`.
    ///
    /// Decisions only move the round forward here; applying them is the
    /// caller's job.
    pub fn on_message(
        &mut self,
        chain: &Blockchain,
        from: PublicKey,
        msg: ConsensusMsg,
        sigs: &dyn SignatureCheck,
        out: &mut Output,
    ) {
        if from == self.me() || !self.cfg.is_gateway(&from) {
            return;
        }
        let round = msg.round();
        if let ConsensusMsg::Decision(_) = msg {
            self.advance_round(round, out);
            return;
        }
        if round < self.round {
            // Prepare votes are round-independent; keep counting them.
            if let ConsensusMsg::Prepare { vote, .. } = msg {
                self.on_prepare(from, vote, sigs, out);
            }
            return;
        }
        self.advance_round(round, out);
        match msg {
            ConsensusMsg::PrePrepare { round, header } => {
                self.on_pre_prepare(chain, from, round, header, out)
            }
            ConsensusMsg::Prepare { vote, .. } => self.on_prepare(from, vote, sigs, out),
            ConsensusMsg::Commit { round, vote } => self.on_vote(from, round, vote, Phase::Commit, sigs, out),
            ConsensusMsg::WitnessRequest { round, header } => {
                self.on_witness_request(chain, from, round, header, out)
            }
            ConsensusMsg::WitnessVote { round, vote } => {
                self.on_vote(from, round, vote, Phase::Validate, sigs, out)
            }
            ConsensusMsg::Decision(_) => unreachable!("handled above"),
        }
    }

    /// True when `index` is the next index; buffers future ones.
    fn index_ready(
        &mut self,
        chain: &Blockchain,
        from: PublicKey,
        index: u64,
        msg: impl FnOnce() -> ConsensusMsg,
        out: &mut Output,
    ) -> bool {
        let next = chain.len() + 1;
        if index < next {
            return false;
        }
        if index > next {
            if self.future_len < FUTURE_CAP {
                self.future.entry(index).or_default().push((from, msg()));
                self.future_len += 1;
            }
            out.effects.push(Effect::Sync {
                peer: from,
                known: index - 1,
            });
            return false;
        }
        true
    }

    fn on_pre_prepare(
        &mut self,
        chain: &Blockchain,
        from: PublicKey,
        round: u64,
        header: BlockHeader,
        out: &mut Output,
    ) {
        if self.cfg.algorithm != Algorithm::Pbft || from != *self.cfg.leader(round) {
            return;
        }
        let index = header.index;
        let copy = header.clone();
        if !self.index_ready(chain, from, index, || ConsensusMsg::PrePrepare { round, header: copy }, out) {
            return;
        }
        if validate_candidate(chain, &header).is_err() {
            return;
        }
        let digest = header.digest();
        out.work.hashes += 1;
        if self.behaviour == Behaviour::Equivocate {
            self.headers.insert(digest, header);
            self.send_prepare(digest, round, out);
            self.send_prepare(fabricate(&digest), round, out);
            self.send_commit(digest, round, out);
            return;
        }
        if self.accepted.get(&(index, round)).is_some_and(|d| *d != digest)
            || self.locks.get(&index).is_some_and(|d| *d != digest)
        {
            return;
        }
        self.accepted.insert((index, round), digest);
        self.headers.insert(digest, header);
        if !self.prepare_sent.contains(&(digest, round)) {
            self.send_prepare(digest, round, out);
        }
        self.check_prepared(digest, index, out);
    }

    fn on_prepare(&mut self, from: PublicKey, vote: Vote, sigs: &dyn SignatureCheck, out: &mut Output) {
        if self.cfg.algorithm != Algorithm::Pbft || vote.phase != Phase::Prepare || vote.voter != from {
            return;
        }
        let digest = vote.header_hash;
        if self.prepares.get(&digest).is_some_and(|s| s.contains(&from)) {
            return;
        }
        if !self.headers.contains_key(&digest) && self.prepares.len() >= ORPHAN_CAP {
            return;
        }
        out.work.verifies += 1;
        if !vote.verify(sigs) {
            return;
        }
        self.prepares.entry(digest).or_default().insert(from);
        if self.behaviour == Behaviour::Equivocate {
            return;
        }
        if let Some(index) = self.headers.get(&digest).map(|h| h.index) {
            self.check_prepared(digest, index, out);
        }
    }

    fn check_prepared(&mut self, digest: Digest, index: u64, out: &mut Output) {
        let round = self.round;
        let prepared = self.accepted.get(&(index, round)) == Some(&digest)
            && self.prepares.get(&digest).map_or(0, |s| s.len()) >= self.cfg.quorum()
            && !self.commit_sent.contains(&(digest, round))
            && self.locks.get(&index).is_none_or(|d| *d == digest);
        if prepared {
            self.locks.insert(index, digest);
            self.send_commit(digest, round, out);
        }
    }

    fn send_prepare(&mut self, digest: Digest, round: u64, out: &mut Output) {
        let vote = Vote::sign(&self.keys, digest, Phase::Prepare);
        out.work.signs += 1;
        let me = self.me();
        self.prepares.entry(digest).or_default().insert(me);
        self.prepare_sent.insert((digest, round));
        out.effects.push(Effect::Multicast {
            to: self.peers(),
            msg: ConsensusMsg::Prepare { round, vote },
        });
    }

    fn send_commit(&mut self, digest: Digest, round: u64, out: &mut Output) {
        let vote = Vote::sign(&self.keys, digest, Phase::Commit);
        out.work.signs += 1;
        self.commit_sent.insert((digest, round));
        let leader = *self.cfg.leader(round);
        if leader == self.me() {
            self.add_vote(digest, vote, out);
        } else {
            out.effects.push(Effect::Send {
                to: leader,
                msg: ConsensusMsg::Commit { round, vote },
            });
        }
    }

    fn on_witness_request(
        &mut self,
        chain: &Blockchain,
        from: PublicKey,
        round: u64,
        header: BlockHeader,
        out: &mut Output,
    ) {
        if self.cfg.algorithm != Algorithm::Witness || from != *self.cfg.leader(round) {
            return;
        }
        let digest = header.digest();
        out.work.hashes += 1;
        if self.behaviour == Behaviour::Equivocate {
            let vote = Vote::sign(&self.keys, digest, Phase::Validate);
            out.work.signs += 1;
            out.effects.push(Effect::Send {
                to: from,
                msg: ConsensusMsg::WitnessVote { round, vote },
            });
            return;
        }
        let index = header.index;
        let copy = header.clone();
        if !self.index_ready(chain, from, index, || ConsensusMsg::WitnessRequest { round, header: copy }, out) {
            return;
        }
        if validate_candidate(chain, &header).is_err() {
            return;
        }
        if self.witness_voted.contains_key(&(index, round)) {
            return;
        }
        self.witness_voted.insert((index, round), digest);
        let vote = Vote::sign(&self.keys, digest, Phase::Validate);
        out.work.signs += 1;
        out.effects.push(Effect::Send {
            to: from,
            msg: ConsensusMsg::WitnessVote { round, vote },
        });
    }

    fn on_vote(
        &mut self,
        from: PublicKey,
        round: u64,
        vote: Vote,
        phase: Phase,
        sigs: &dyn SignatureCheck,
        out: &mut Output,
    ) {
        let expected = match self.cfg.algorithm {
            Algorithm::Witness => Phase::Validate,
            Algorithm::Pbft => Phase::Commit,
        };
        if phase != expected || vote.phase != phase || vote.voter != from {
            return;
        }
        let Some(p) = &self.proposal else { return };
        if p.round != round || !p.variants.iter().any(|(_, d)| *d == vote.header_hash) {
            return;
        }
        if p.votes
            .get(&vote.header_hash)
            .is_some_and(|v| v.iter().any(|x| x.voter == from))
        {
            return;
        }
        out.work.verifies += 1;
        if !vote.verify(sigs) {
            return;
        }
        self.add_vote(vote.header_hash, vote, out);
    }

    fn add_vote(&mut self, digest: Digest, vote: Vote, out: &mut Output) {
        let required = self.cfg.required_votes();
        let Some(p) = &mut self.proposal else { return };
        let votes = p.votes.entry(digest).or_default();
        if votes.iter().any(|v| v.voter == vote.voter) {
            return;
        }
        votes.push(vote);
        if votes.len() < required {
            return;
        }
        let p = self.proposal.take().expect("checked");
        let mut votes = p.votes.get(&digest).cloned().unwrap_or_default();
        votes.truncate(required);
        let header = p
            .variants
            .into_iter()
            .find(|(_, d)| *d == digest)
            .map(|(h, _)| h)
            .expect("votes are only kept for proposed variants");
        out.effects.push(Effect::Decided(ConsensusDecision {
            header,
            votes,
            algorithm: self.cfg.algorithm,
            round: p.round,
        }));
    }
}

/// Digest of a header nobody proposed.
fn fabricate(digest: &Digest) -> Digest {
    let mut bytes = digest.0.to_vec();
    bytes.push(0xee);
    hash(&bytes)
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::chain::Rules;
    use crate::consensus::{build_candidate, verify_decision};
    use crate::crypto::DirectCheck;
    use crate::testkit::TestNet;

    /// Engines sharing one chain snapshot, with instant FIFO delivery.
    struct Bus {
        net: TestNet,
        engines: Vec<Engine>,
        queue: VecDeque<(PublicKey, PublicKey, ConsensusMsg)>,
        silent: Vec<PublicKey>,
        deaf: Vec<PublicKey>,
        decisions: Vec<ConsensusDecision>,
        aborts: Vec<AbortReason>,
    }

    impl Bus {
        fn new(algorithm: Algorithm, n: usize, wmin: usize, behaviours: &[Behaviour]) -> Self {
            let net = TestNet::new(algorithm, n, wmin);
            let cfg = Arc::new(net.cfg.clone());
            let engines = net
                .gateways
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let b = behaviours.get(i).copied().unwrap_or_default();
                    Engine::new(cfg.clone(), g.clone(), b)
                })
                .collect();
            Self {
                net,
                engines,
                queue: VecDeque::new(),
                silent: Vec::new(),
                deaf: Vec::new(),
                decisions: Vec::new(),
                aborts: Vec::new(),
            }
        }

        fn collect(&mut self, from: PublicKey, out: Output) {
            for e in out.effects {
                match e {
                    Effect::Send { to, msg } => self.queue.push_back((from, to, msg)),
                    Effect::Multicast { to, msg } => {
                        for t in to {
                            self.queue.push_back((from, t, msg.clone()));
                        }
                    }
                    Effect::Decided(d) => self.decisions.push(d),
                    Effect::Aborted { reason, .. } => self.aborts.push(reason),
                    Effect::Sync { .. } => {}
                }
            }
        }

        fn run(&mut self) {
            while let Some((from, to, msg)) = self.queue.pop_front() {
                if self.silent.contains(&to) || self.silent.contains(&from) || self.deaf.contains(&to) {
                    continue;
                }
                let i = self.net.cfg.position(&to).unwrap();
                let mut out = Output::default();
                self.engines[i].on_message(&self.net.chain, from, msg, &DirectCheck, &mut out);
                self.collect(to, out);
            }
        }

        fn propose(&mut self, leader: usize, seed: u8) -> Digest {
            let key = KeyPair::from_seed([seed; 32]).public;
            let h = build_candidate(&self.net.chain, &key, "default", 1_700_000_000_000, 1000).unwrap();
            let mut out = Output::default();
            let d = self.engines[leader].propose(&self.net.chain, h, &mut out).unwrap();
            let from = self.net.gateways[leader].public;
            self.collect(from, out);
            d
        }
    }

    #[test]
    fn pbft_four_gateways_decides_with_quorum_commits() {
        let mut bus = Bus::new(Algorithm::Pbft, 4, 1, &[]);
        let d = bus.propose(0, 1);
        bus.run();
        assert_eq!(bus.decisions.len(), 1);
        let dec = &bus.decisions[0];
        assert_eq!(dec.header.digest(), d);
        assert_eq!(dec.votes.len(), 3);
        assert!(verify_decision(dec, &bus.net.cfg, &DirectCheck));
    }

    #[test]
    fn pbft_survives_one_silent_gateway() {
        let mut bus = Bus::new(Algorithm::Pbft, 4, 1, &[]);
        bus.silent.push(bus.net.gateways[3].public);
        bus.propose(0, 2);
        bus.run();
        assert_eq!(bus.decisions.len(), 1);
    }

    #[test]
    fn pbft_stalls_with_two_silent_gateways() {
        let mut bus = Bus::new(Algorithm::Pbft, 4, 1, &[]);
        bus.silent.push(bus.net.gateways[2].public);
        bus.silent.push(bus.net.gateways[3].public);
        bus.propose(0, 3);
        bus.run();
        assert!(bus.decisions.is_empty());
        let mut out = Output::default();
        bus.engines[0].on_timeout(0, bus.net.chain.len() + 1, &mut out);
        bus.collect(bus.net.gateways[0].public, out);
        assert_eq!(bus.aborts, vec![AbortReason::Timeout]);
        assert_eq!(bus.engines[0].round(), 1);
        assert!(!bus.engines[0].is_leader());
    }

    #[test]
    fn witness_decides_with_seven_of_ten_down() {
        let mut bus = Bus::new(Algorithm::Witness, 10, 2, &[]);
        for i in 3..10 {
            bus.silent.push(bus.net.gateways[i].public);
        }
        bus.propose(0, 4);
        bus.run();
        assert_eq!(bus.decisions.len(), 1);
        assert_eq!(bus.decisions[0].votes.len(), 2);
        assert!(verify_decision(&bus.decisions[0], &bus.net.cfg, &DirectCheck));
    }

    #[test]
    fn equivocating_leader_cannot_split_honest_gateways() {
        let mut bus = Bus::new(Algorithm::Pbft, 4, 1, &[Behaviour::Equivocate]);
        bus.propose(0, 5);
        bus.run();
        // At most one variant can reach a commit quorum.
        let hashes: HashSet<Digest> = bus.decisions.iter().map(|d| d.header.digest()).collect();
        assert!(hashes.len() <= 1);
        for d in &bus.decisions {
            assert!(verify_decision(d, &bus.net.cfg, &DirectCheck));
        }
    }

    #[test]
    fn honest_validator_refuses_second_candidate_in_same_round() {
        let mut bus = Bus::new(Algorithm::Pbft, 4, 1, &[]);
        let leader = bus.net.gateways[0].public;
        let a = build_candidate(&bus.net.chain, &KeyPair::from_seed([6; 32]).public, "a", 1, 10).unwrap();
        let b = build_candidate(&bus.net.chain, &KeyPair::from_seed([7; 32]).public, "b", 1, 10).unwrap();
        let mut out = Output::default();
        let chain = bus.net.chain.clone();
        bus.engines[1].on_message(&chain, leader, ConsensusMsg::PrePrepare { round: 0, header: a }, &DirectCheck, &mut out);
        assert_eq!(out.effects.len(), 1);
        let mut out = Output::default();
        bus.engines[1].on_message(&chain, leader, ConsensusMsg::PrePrepare { round: 0, header: b }, &DirectCheck, &mut out);
        assert!(out.effects.is_empty());
    }

    #[test]
    fn pre_prepare_from_non_leader_is_ignored() {
        let mut bus = Bus::new(Algorithm::Pbft, 4, 1, &[]);
        let h = build_candidate(&bus.net.chain, &KeyPair::from_seed([8; 32]).public, "a", 1, 10).unwrap();
        let mut out = Output::default();
        let chain = bus.net.chain.clone();
        let not_leader = bus.net.gateways[2].public;
        bus.engines[1].on_message(&chain, not_leader, ConsensusMsg::PrePrepare { round: 0, header: h }, &DirectCheck, &mut out);
        assert!(out.effects.is_empty());
    }

    #[test]
    fn future_index_is_buffered_and_replayed() {
        let mut bus = Bus::new(Algorithm::Witness, 4, 2, &[]);
        let leader = bus.net.gateways[0].public;
        // Same seeds, so this replica equals bus.net.chain plus one block.
        let mut ahead = TestNet::new(Algorithm::Witness, 4, 2);
        ahead.add_block(&KeyPair::from_seed([50; 32]).public);
        let h = build_candidate(&ahead.chain, &KeyPair::from_seed([51; 32]).public, "a", 1, 10).unwrap();
        let mut out = Output::default();
        let chain = bus.net.chain.clone();
        bus.engines[1].on_message(&chain, leader, ConsensusMsg::WitnessRequest { round: 0, header: h }, &DirectCheck, &mut out);
        assert!(matches!(out.effects[..], [Effect::Sync { known, .. }] if known == chain.len() + 1));
        let mut out = Output::default();
        bus.engines[1].on_block_applied(&ahead.chain, &DirectCheck, &mut out);
        assert!(matches!(out.effects[..], [Effect::Send { msg: ConsensusMsg::WitnessVote { .. }, .. }]));
    }

    #[test]
    fn lock_is_reproposed_by_next_leader() {
        let mut bus = Bus::new(Algorithm::Pbft, 4, 1, &[]);
        let leader = bus.net.gateways[0].public;
        // Commits to the first leader are lost.
        bus.deaf.push(leader);
        let d = bus.propose(0, 9);
        bus.run();
        assert!(bus.decisions.is_empty());
        let chain = bus.net.chain.clone();
        for i in 1..4 {
            assert_eq!(bus.engines[i].locked_candidate(&chain).map(|h| h.digest()), Some(d));
        }
        // A fresh candidate in round 1 from an unlocked source is refused.
        bus.deaf.clear();
        let other = build_candidate(&chain, &KeyPair::from_seed([10; 32]).public, "x", 1, 10).unwrap();
        let mut out = Output::default();
        bus.engines[2].on_message(&chain, bus.net.gateways[1].public, ConsensusMsg::PrePrepare { round: 1, header: other }, &DirectCheck, &mut out);
        assert!(out.effects.is_empty());
        // Gateway 1 leads round 1 and re-proposes its lock.
        let locked = bus.engines[1].locked_candidate(&chain).unwrap();
        let mut out = Output::default();
        bus.engines[1].advance_round(1, &mut out);
        bus.engines[1].propose(&chain, locked, &mut out).unwrap();
        bus.collect(bus.net.gateways[1].public, out);
        bus.run();
        assert_eq!(bus.decisions.len(), 1);
        assert_eq!(bus.decisions[0].header.digest(), d);
        assert_eq!(bus.decisions[0].round, 1);
        let rules = Rules::new(&bus.net.cfg, &DirectCheck);
        let dec = bus.decisions[0].clone();
        bus.net.chain.append_block(&dec.header, &dec, &rules).unwrap();
    }
}
