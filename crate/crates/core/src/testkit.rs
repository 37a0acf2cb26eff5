//! Helpers for building valid chains directly, without a network.
//!
//! Shared by unit tests, integration tests and property tests.

use std::sync::Arc;

use crate::chain::{BlockHeader, Blockchain, DeviceInfo, Rules, Transaction, DEFAULT_POLICY};
use crate::consensus::{Algorithm, ConsensusConfig, ConsensusDecision, Phase, Vote};
use crate::crypto::{DirectCheck, KeyPair, PublicKey};

/// Creation time of the first header built by [`TestNet`].
pub const T0: u64 = 1_600_000_000_000;
/// Lifetime given to every header built by [`TestNet`].
pub const TTL: u64 = 86_400_000;

/// Signed reading at `produced_at`, with data derived from the timestamp.
pub fn device_info(dev: &KeyPair, access_level: u64, produced_at: u64) -> DeviceInfo {
    let data = produced_at.to_be_bytes().repeat(4);
    DeviceInfo::signed(&dev.secret, access_level, None, data, produced_at)
}

/// A gateway set plus one replica, grown by signing decisions locally.
pub struct TestNet {
    pub cfg: ConsensusConfig,
    pub gateways: Vec<KeyPair>,
    pub chain: Blockchain,
}

impl TestNet {
    /// `n` gateways with seeded keys, each already owning a block.
    pub fn new(algorithm: Algorithm, n: usize, witness_minimum: usize) -> Self {
        let gateways: Vec<KeyPair> = (0..n)
            .map(|i| {
                let mut seed = [0xa0; 32];
                seed[..8].copy_from_slice(&(i as u64).to_be_bytes());
                KeyPair::from_seed(seed)
            })
            .collect();
        let cfg = ConsensusConfig::new(
            algorithm,
            gateways.iter().map(|g| g.public).collect(),
            witness_minimum,
        )
        .expect("valid test config");
        let mut net = Self {
            cfg,
            gateways,
            chain: Blockchain::new(),
        };
        for i in 0..n {
            let key = net.gateways[i].public;
            net.add_block(&key);
        }
        net
    }

    pub fn gateway_for(&self, key: &PublicKey) -> &KeyPair {
        self.gateways
            .iter()
            .find(|g| g.public == *key)
            .expect("member key")
    }

    /// Next header for `key`, created one second after the tip.
    pub fn next_header(&self, key: &PublicKey) -> BlockHeader {
        let created_at = T0 + 1000 * self.chain.len();
        BlockHeader {
            prev_header_hash: self.chain.tip_header_hash(),
            index: self.chain.len() + 1,
            created_at,
            expires_at: created_at + TTL,
            policy: DEFAULT_POLICY.into(),
            owner_key: *key,
        }
    }

    /// Decision for `header` in round 0 carrying `votes` valid votes of the
    /// phase the algorithm requires.
    pub fn decision_for(&self, header: &BlockHeader, votes: usize) -> ConsensusDecision {
        let digest = header.digest();
        let leader = *self.cfg.leader(0);
        let (phase, voters): (Phase, Vec<&KeyPair>) = match self.cfg.algorithm {
            Algorithm::Witness => (
                Phase::Validate,
                self.gateways.iter().filter(|g| g.public != leader).collect(),
            ),
            Algorithm::Pbft => (Phase::Commit, self.gateways.iter().collect()),
        };
        ConsensusDecision {
            header: header.clone(),
            votes: voters
                .into_iter()
                .take(votes)
                .map(|g| Vote::sign(g, digest, phase))
                .collect(),
            algorithm: self.cfg.algorithm,
            round: 0,
        }
    }

    /// Commit a block for `key` and return its index.
    pub fn add_block(&mut self, key: &PublicKey) -> u64 {
        let header = self.next_header(key);
        let proof = self.decision_for(&header, self.cfg.required_votes());
        let rules = Rules::new(&self.cfg, &DirectCheck);
        self.chain
            .append_block(&header, &proof, &rules)
            .expect("valid block");
        header.index
    }

    /// Append a reading at `produced_at` to block `block`, signed by the
    /// gateway chosen round-robin from `produced_at`.
    pub fn append(&mut self, block: u64, dev: &KeyPair, produced_at: u64) -> Arc<Transaction> {
        self.append_info(block, device_info(dev, 0, produced_at))
    }

    pub fn append_info(&mut self, block: u64, info: DeviceInfo) -> Arc<Transaction> {
        let gw = &self.gateways[(info.produced_at as usize) % self.gateways.len()];
        let tx = Arc::new(
            self.chain
                .build_transaction(block, info, gw)
                .expect("buildable"),
        );
        let rules = Rules::new(&self.cfg, &DirectCheck);
        self.chain
            .append_transaction(block, tx.clone(), &rules)
            .expect("valid transaction");
        tx
    }
}
