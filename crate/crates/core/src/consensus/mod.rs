//! Header admission by consensus among gateways.
//!
//! Only headers go through consensus; transactions never do. Two
//! algorithms are supported:
//!
//! * **Witness**: the leader asks the other gateways to validate a candidate
//!   and decides on the first `witness_minimum` positive votes. One message
//!   round trip, no Byzantine safety.
//! * **PBFT**: pre-prepare, prepare, commit with quorum `floor(2n/3) + 1`.
//!   Tolerates `f = floor((n - 1) / 3)` faulty gateways.
//!
//! The leader for round `r` is `gateways[(leader_index + r) mod n]`.

pub mod engine;
mod messages;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{BlockHeader, Blockchain, Rejection, Timestamp};
use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{Digest, KeyPair, PublicKey, Signature, SignatureCheck};

pub use engine::{AbortReason, Behaviour, Effect, Engine, Output, Work};
pub use messages::ConsensusMsg;

/// Default time a consensus instance may run before the round is abandoned.
pub const DEFAULT_TIMEOUT_MS: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Witness,
    Pbft,
}

impl Algorithm {
    pub fn code(self) -> u64 {
        match self {
            Algorithm::Witness => 0,
            Algorithm::Pbft => 1,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(Algorithm::Witness),
            1 => Some(Algorithm::Pbft),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Witness => "witness",
            Algorithm::Pbft => "pbft",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("unknown consensus algorithm `{0}` (expected witness or pbft)")]
pub struct ParseAlgorithmError(String);

impl FromStr for Algorithm {
    type Err = ParseAlgorithmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "witness" => Ok(Algorithm::Witness),
            "pbft" => Ok(Algorithm::Pbft),
            _ => Err(ParseAlgorithmError(s.to_owned())),
        }
    }
}

/// Role of a signed vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    /// Witness approval.
    Validate,
    Prepare,
    Commit,
}

impl Phase {
    pub fn code(self) -> u64 {
        match self {
            Phase::Validate => 0,
            Phase::Prepare => 1,
            Phase::Commit => 2,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(Phase::Validate),
            1 => Some(Phase::Prepare),
            2 => Some(Phase::Commit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("gateway membership is empty")]
    EmptyMembership,
    #[error("gateway listed twice in membership")]
    DuplicateGateway,
    #[error("witness minimum {min} must be between 1 and {max} for {n} gateways")]
    WitnessMinimum { min: usize, max: usize, n: usize },
    #[error("leader index {index} out of range for {n} gateways")]
    LeaderIndex { index: usize, n: usize },
}

/// Membership and algorithm parameters shared by every gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusConfig {
    pub algorithm: Algorithm,
    /// Ordered membership; the order drives leader rotation.
    pub gateways: Vec<PublicKey>,
    /// Validate votes needed under Witness. Ignored under PBFT.
    pub witness_minimum: usize,
    /// Round-robin offset.
    pub leader_index: usize,
    pub timeout_ms: u64,
}

/// PBFT quorum for `n` gateways: `floor(2n/3) + 1`.
pub fn quorum(n: usize) -> usize {
    2 * n / 3 + 1
}

impl ConsensusConfig {
    pub fn new(
        algorithm: Algorithm,
        gateways: Vec<PublicKey>,
        witness_minimum: usize,
    ) -> Result<Self, ConfigError> {
        let cfg = Self {
            algorithm,
            gateways,
            witness_minimum,
            leader_index: 0,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.gateways.len();
        if n == 0 {
            return Err(ConfigError::EmptyMembership);
        }
        let distinct: HashSet<_> = self.gateways.iter().collect();
        if distinct.len() != n {
            return Err(ConfigError::DuplicateGateway);
        }
        if self.leader_index >= n {
            return Err(ConfigError::LeaderIndex {
                index: self.leader_index,
                n,
            });
        }
        if self.algorithm == Algorithm::Witness
            && (self.witness_minimum == 0 || self.witness_minimum > n - 1)
        {
            return Err(ConfigError::WitnessMinimum {
                min: self.witness_minimum,
                max: n - 1,
                n,
            });
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.gateways.len()
    }

    pub fn quorum(&self) -> usize {
        quorum(self.n())
    }

    /// Votes a decision must carry.
    pub fn required_votes(&self) -> usize {
        match self.algorithm {
            Algorithm::Witness => self.witness_minimum,
            Algorithm::Pbft => self.quorum(),
        }
    }

    pub fn is_gateway(&self, key: &PublicKey) -> bool {
        self.gateways.contains(key)
    }

    pub fn position(&self, key: &PublicKey) -> Option<usize> {
        self.gateways.iter().position(|g| g == key)
    }

    /// Leader for `round`. Panics on an empty membership, which
    /// [`ConsensusConfig::validate`] rules out.
    pub fn leader(&self, round: u64) -> &PublicKey {
        let n = self.gateways.len() as u64;
        &self.gateways[((self.leader_index as u64 + round % n) % n) as usize]
    }
}

/// Leader for `round`, or an error on an invalid configuration.
pub fn elect_leader(cfg: &ConsensusConfig, round: u64) -> Result<PublicKey, ConfigError> {
    if cfg.gateways.is_empty() {
        return Err(ConfigError::EmptyMembership);
    }
    if cfg.leader_index >= cfg.n() {
        return Err(ConfigError::LeaderIndex {
            index: cfg.leader_index,
            n: cfg.n(),
        });
    }
    Ok(*cfg.leader(round))
}

/// Signed approval of a header digest in one phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vote {
    pub header_hash: Digest,
    pub voter: PublicKey,
    pub phase: Phase,
    pub sig: Signature,
}

impl Vote {
    /// Bytes the voter signs: `canonical(header_hash, phase)`.
    pub fn preimage(header_hash: &Digest, phase: Phase) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(40);
        enc.value(header_hash).u64(phase.code());
        enc.finish()
    }

    pub fn sign(voter: &KeyPair, header_hash: Digest, phase: Phase) -> Self {
        Self {
            header_hash,
            voter: voter.public,
            phase,
            sig: voter.sign(&Self::preimage(&header_hash, phase)),
        }
    }

    pub fn verify(&self, sigs: &dyn SignatureCheck) -> bool {
        sigs.check(
            &self.voter,
            &Self::preimage(&self.header_hash, self.phase),
            &self.sig,
        )
    }
}

impl Canonical for Vote {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.header_hash)
            .value(&self.voter)
            .u64(self.phase.code())
            .value(&self.sig);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let header_hash = dec.value()?;
        let voter = dec.value()?;
        let code = dec.u64()?;
        let phase = Phase::from_code(code).ok_or(CodecError::BadValue {
            what: "phase",
            value: code,
        })?;
        Ok(Self {
            header_hash,
            voter,
            phase,
            sig: dec.value()?,
        })
    }
}

/// Commit certificate for a header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusDecision {
    pub header: BlockHeader,
    pub votes: Vec<Vote>,
    pub algorithm: Algorithm,
    /// Round that produced the decision; identifies the leader.
    pub round: u64,
}

impl Canonical for ConsensusDecision {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.header)
            .list(&self.votes)
            .u64(self.algorithm.code())
            .u64(self.round);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let header = dec.value()?;
        let votes = dec.list()?;
        let code = dec.u64()?;
        let algorithm = Algorithm::from_code(code).ok_or(CodecError::BadValue {
            what: "algorithm",
            value: code,
        })?;
        Ok(Self {
            header,
            votes,
            algorithm,
            round: dec.u64()?,
        })
    }
}

/// Check a commit certificate: algorithm, distinct member voters, phase,
/// header digest, signatures, and vote count.
pub fn verify_decision(
    decision: &ConsensusDecision,
    cfg: &ConsensusConfig,
    sigs: &dyn SignatureCheck,
) -> bool {
    if decision.algorithm != cfg.algorithm || cfg.gateways.is_empty() {
        return false;
    }
    let (phase, leader) = match cfg.algorithm {
        Algorithm::Witness => (Phase::Validate, Some(*cfg.leader(decision.round))),
        Algorithm::Pbft => (Phase::Commit, None),
    };
    if decision.votes.len() < cfg.required_votes() {
        return false;
    }
    let digest = decision.header.digest();
    let mut voters = HashSet::with_capacity(decision.votes.len());
    for vote in &decision.votes {
        if vote.phase != phase
            || vote.header_hash != digest
            || !cfg.is_gateway(&vote.voter)
            || Some(vote.voter) == leader
            || !voters.insert(vote.voter)
        {
            return false;
        }
    }
    decision.votes.iter().all(|v| v.verify(sigs))
}

/// Candidate header for `new_key` on top of the current tip.
pub fn build_candidate(
    chain: &Blockchain,
    new_key: &PublicKey,
    policy: &str,
    now_ms: Timestamp,
    ttl_ms: u64,
) -> Result<BlockHeader, Rejection> {
    if chain.contains_key(new_key) {
        return Err(Rejection::DuplicateKey);
    }
    let expires_at = now_ms
        .checked_add(ttl_ms)
        .filter(|e| *e > now_ms)
        .ok_or(Rejection::BadExpiry)?;
    Ok(BlockHeader {
        prev_header_hash: chain.tip_header_hash(),
        index: chain.len() + 1,
        created_at: now_ms,
        expires_at,
        policy: policy.to_owned(),
        owner_key: *new_key,
    })
}

/// Header checks a validator runs before voting.
pub fn validate_candidate(chain: &Blockchain, header: &BlockHeader) -> Result<(), Rejection> {
    if header.index != chain.len() + 1 {
        return Err(Rejection::BadIndex);
    }
    if header.prev_header_hash != chain.tip_header_hash() {
        return Err(Rejection::BadPrevHash);
    }
    if chain.contains_key(&header.owner_key) {
        return Err(Rejection::DuplicateKey);
    }
    if header.expires_at <= header.created_at {
        return Err(Rejection::BadExpiry);
    }
    Ok(())
}
