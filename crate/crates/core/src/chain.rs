//! Appendable-block data model.
//!
//! A [`Blockchain`] is a hash-chained list of block headers, one per node
//! public key. Each header owns a ledger of transactions that keeps growing
//! after the header is committed; the ledger is hash-chained internally and
//! anchored to its header's digest. Headers never link to ledgers, so
//! appending to one block does not touch any other block.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{encode_canonical, Canonical, CodecError, Decoder, Encoder};
use crate::consensus::{verify_decision, ConsensusConfig, ConsensusDecision};
use crate::crypto::{hash, Digest, KeyPair, PublicKey, SecretKey, Signature, SignatureCheck};

/// Milliseconds since the Unix epoch.
pub type Timestamp = u64;

/// Policy assigned when the caller does not supply one.
pub const DEFAULT_POLICY: &str = "default";

/// Why a header, transaction or request was refused.
///
/// Rejections are ordinary return values; validation never panics on
/// hostile input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Error, Serialize, Deserialize)]
pub enum Rejection {
    #[error("no block for the referenced header")]
    UnknownBlock,
    #[error("public key is not in the chain")]
    UnknownKey,
    #[error("previous-transaction hash does not match")]
    BadHashLink,
    #[error("index out of sequence")]
    BadIndex,
    #[error("device signature does not verify")]
    BadDeviceSig,
    #[error("gateway signature does not verify or signer is not a gateway")]
    BadGatewaySig,
    #[error("block expired")]
    ExpiredBlock,
    #[error("duplicate transaction")]
    Duplicate,
    #[error("previous-header hash does not match the tip")]
    BadPrevHash,
    #[error("public key already owns a block")]
    DuplicateKey,
    #[error("expiration not after creation")]
    BadExpiry,
    #[error("consensus proof does not meet quorum")]
    InsufficientQuorum,
    #[error("device is not connected to this gateway")]
    NotHome,
    #[error("new key is invalid")]
    InvalidNewKey,
    #[error("key update timed out")]
    KeyUpdateTimeout,
    #[error("key index does not mirror the headers")]
    KeyIndexMismatch,
    #[error("malformed message")]
    Malformed,
    #[error("consensus could not be reached")]
    ConsensusFailed,
}

impl Rejection {
    pub const ALL: [Rejection; 18] = [
        Rejection::UnknownBlock,
        Rejection::UnknownKey,
        Rejection::BadHashLink,
        Rejection::BadIndex,
        Rejection::BadDeviceSig,
        Rejection::BadGatewaySig,
        Rejection::ExpiredBlock,
        Rejection::Duplicate,
        Rejection::BadPrevHash,
        Rejection::DuplicateKey,
        Rejection::BadExpiry,
        Rejection::InsufficientQuorum,
        Rejection::NotHome,
        Rejection::InvalidNewKey,
        Rejection::KeyUpdateTimeout,
        Rejection::KeyIndexMismatch,
        Rejection::Malformed,
        Rejection::ConsensusFailed,
    ];

    pub fn code(self) -> u64 {
        Self::ALL.iter().position(|r| *r == self).expect("listed") as u64 + 1
    }

    pub fn from_code(code: u64) -> Option<Self> {
        code.checked_sub(1)
            .and_then(|i| Self::ALL.get(i as usize).copied())
    }
}

/// Position as signed micro-degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Gps {
    pub lat_micro: i64,
    pub lon_micro: i64,
}

/// Device-signed payload carried by a transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceInfo {
    pub device_sig: Signature,
    /// Access level a reader needs; 0 is public.
    pub access_level: u64,
    pub gps: Option<Gps>,
    pub data: Vec<u8>,
    pub produced_at: Timestamp,
}

fn encode_device_fields(
    enc: &mut Encoder,
    access_level: u64,
    gps: Option<&Gps>,
    data: &[u8],
    produced_at: Timestamp,
) {
    enc.u64(access_level)
        .option(gps, |e, g| {
            e.i64(g.lat_micro).i64(g.lon_micro);
        })
        .bytes(data)
        .u64(produced_at);
}

impl DeviceInfo {
    /// Sign `(access_level, gps, data, produced_at)` with the device key.
    pub fn signed(
        secret: &SecretKey,
        access_level: u64,
        gps: Option<Gps>,
        data: Vec<u8>,
        produced_at: Timestamp,
    ) -> Self {
        let mut enc = Encoder::with_capacity(data.len() + 40);
        encode_device_fields(&mut enc, access_level, gps.as_ref(), &data, produced_at);
        let device_sig = crate::crypto::sign(secret, &enc.finish());
        Self {
            device_sig,
            access_level,
            gps,
            data,
            produced_at,
        }
    }

    /// Bytes covered by `device_sig`.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(self.data.len() + 40);
        encode_device_fields(
            &mut enc,
            self.access_level,
            self.gps.as_ref(),
            &self.data,
            self.produced_at,
        );
        enc.finish()
    }

    pub fn verify(&self, device: &PublicKey, sigs: &dyn SignatureCheck) -> bool {
        sigs.check(device, &self.signing_bytes(), &self.device_sig)
    }

    fn fingerprint(&self) -> u64 {
        let head = u64::from_be_bytes(self.device_sig.0[..8].try_into().expect("8 bytes"));
        head ^ self.produced_at.rotate_left(17)
    }

    fn same_submission(&self, other: &DeviceInfo) -> bool {
        self.device_sig == other.device_sig && self.produced_at == other.produced_at
    }
}

impl Canonical for DeviceInfo {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.device_sig);
        encode_device_fields(
            enc,
            self.access_level,
            self.gps.as_ref(),
            &self.data,
            self.produced_at,
        );
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            device_sig: dec.value()?,
            access_level: dec.u64()?,
            gps: dec.option(|d| {
                Ok(Gps {
                    lat_micro: d.i64()?,
                    lon_micro: d.i64()?,
                })
            })?,
            data: dec.bytes()?.to_vec(),
            produced_at: dec.u64()?,
        })
    }
}

/// Ledger entry, gateway-signed and hash-chained inside one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub prev_hash: Digest,
    /// 1-based position in the ledger.
    pub index: u64,
    pub gateway_sig: Signature,
    /// Which gateway produced `gateway_sig`.
    pub gateway_key: PublicKey,
    pub info: DeviceInfo,
}

impl Transaction {
    pub fn digest(&self) -> Digest {
        hash(&encode_canonical(self))
    }

    /// Bytes covered by `gateway_sig`: the canonical device info, device
    /// signature included.
    pub fn gateway_signing_bytes(&self) -> Vec<u8> {
        encode_canonical(&self.info)
    }
}

impl Canonical for Transaction {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.prev_hash)
            .u64(self.index)
            .value(&self.gateway_sig)
            .value(&self.gateway_key)
            .value(&self.info);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            prev_hash: dec.value()?,
            index: dec.u64()?,
            gateway_sig: dec.value()?,
            gateway_key: dec.value()?,
            info: dec.value()?,
        })
    }
}

/// Consensus-committed part of a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockHeader {
    pub prev_header_hash: Digest,
    /// 1-based position in the chain.
    pub index: u64,
    pub created_at: Timestamp,
    pub expires_at: Timestamp,
    pub policy: String,
    pub owner_key: PublicKey,
}

impl BlockHeader {
    pub fn digest(&self) -> Digest {
        hash(&encode_canonical(self))
    }
}

impl Canonical for BlockHeader {
    fn encode(&self, enc: &mut Encoder) {
        enc.value(&self.prev_header_hash)
            .u64(self.index)
            .u64(self.created_at)
            .u64(self.expires_at)
            .text(&self.policy)
            .value(&self.owner_key);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            prev_header_hash: dec.value()?,
            index: dec.u64()?,
            created_at: dec.u64()?,
            expires_at: dec.u64()?,
            policy: dec.text()?,
            owner_key: dec.value()?,
        })
    }
}

/// Header, its commit certificate, and the growing ledger.
#[derive(Debug, Clone)]
pub struct Block {
    header: BlockHeader,
    header_hash: Digest,
    proof: ConsensusDecision,
    ledger: Vec<Arc<Transaction>>,
    tip_hash: Digest,
    seen: HashMap<u64, u32>,
}

impl Block {
    fn new(header: BlockHeader, proof: ConsensusDecision) -> Self {
        let header_hash = header.digest();
        Self {
            header,
            header_hash,
            proof,
            ledger: Vec::new(),
            tip_hash: header_hash,
            seen: HashMap::new(),
        }
    }

    pub fn header(&self) -> &BlockHeader {
        &self.header
    }

    pub fn header_hash(&self) -> Digest {
        self.header_hash
    }

    pub fn proof(&self) -> &ConsensusDecision {
        &self.proof
    }

    pub fn ledger(&self) -> &[Arc<Transaction>] {
        &self.ledger
    }

    /// Hash the next transaction must link to.
    pub fn tip_hash(&self) -> Digest {
        self.tip_hash
    }

    pub fn len(&self) -> usize {
        self.ledger.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ledger.is_empty()
    }

    fn find_duplicate(&self, info: &DeviceInfo) -> bool {
        match self.seen.get(&info.fingerprint()) {
            None => false,
            Some(&pos) if self.ledger[pos as usize].info.same_submission(info) => true,
            // Fingerprint collision between distinct submissions.
            Some(_) => self.ledger.iter().any(|t| t.info.same_submission(info)),
        }
    }

    fn push(&mut self, tx: Arc<Transaction>) {
        self.tip_hash = tx.digest();
        self.seen
            .insert(tx.info.fingerprint(), self.ledger.len() as u32);
        self.ledger.push(tx);
    }
}

/// Consensus parameters and signature verifier used by validation.
#[derive(Clone, Copy)]
pub struct Rules<'a> {
    pub consensus: &'a ConsensusConfig,
    pub sigs: &'a dyn SignatureCheck,
}

impl<'a> Rules<'a> {
    pub fn new(consensus: &'a ConsensusConfig, sigs: &'a dyn SignatureCheck) -> Self {
        Self { consensus, sigs }
    }
}

/// First invariant violation found by [`Blockchain::verify_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize)]
pub struct Violation {
    pub block: u64,
    /// `None` for header-level violations.
    pub tx: Option<u64>,
    pub reason: Rejection,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tx {
            Some(t) => write!(f, "block {} transaction {}: {}", self.block, t, self.reason),
            None => write!(f, "block {} header: {}", self.block, self.reason),
        }
    }
}

/// Raw contents of one block, with no validation applied.
#[derive(Debug, Clone)]
pub struct BlockParts {
    pub header: BlockHeader,
    pub proof: ConsensusDecision,
    pub ledger: Vec<Transaction>,
}

#[derive(Debug, Clone, Default)]
pub struct Blockchain {
    blocks: Vec<Block>,
    key_index: HashMap<PublicKey, u64>,
    hash_index: HashMap<Digest, u64>,
}

impl Blockchain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of blocks.
    pub fn len(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Block by 1-based index.
    pub fn block(&self, index: u64) -> Option<&Block> {
        index
            .checked_sub(1)
            .and_then(|i| self.blocks.get(i as usize))
    }

    fn block_mut(&mut self, index: u64) -> Option<&mut Block> {
        index
            .checked_sub(1)
            .and_then(|i| self.blocks.get_mut(i as usize))
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    /// Link value for the next header: the tip header's digest, or the zero
    /// digest on an empty chain.
    pub fn tip_header_hash(&self) -> Digest {
        self.blocks
            .last()
            .map(|b| b.header_hash)
            .unwrap_or(Digest::ZERO)
    }

    /// Index of the block owned by `key`.
    pub fn lookup_block(&self, key: &PublicKey) -> Option<u64> {
        self.key_index.get(key).copied()
    }

    pub fn contains_key(&self, key: &PublicKey) -> bool {
        self.key_index.contains_key(key)
    }

    /// Index of the block whose header hashes to `header_hash`.
    pub fn find_by_header_hash(&self, header_hash: &Digest) -> Option<u64> {
        self.hash_index.get(header_hash).copied()
    }

    pub fn transaction_count(&self) -> u64 {
        self.blocks.iter().map(|b| b.ledger.len() as u64).sum()
    }

    /// Wrap `info` into the next transaction of block `block`, signed by the
    /// gateway key pair. Does not append.
    pub fn build_transaction(
        &self,
        block: u64,
        info: DeviceInfo,
        gateway: &KeyPair,
    ) -> Result<Transaction, Rejection> {
        let b = self.block(block).ok_or(Rejection::UnknownBlock)?;
        if info.produced_at >= b.header.expires_at {
            return Err(Rejection::ExpiredBlock);
        }
        let gateway_sig = gateway.sign(&encode_canonical(&info));
        Ok(Transaction {
            prev_hash: b.tip_hash,
            index: b.ledger.len() as u64 + 1,
            gateway_sig,
            gateway_key: gateway.public,
            info,
        })
    }

    fn gateway_authorized(&self, key: &PublicKey, rules: &Rules<'_>) -> bool {
        rules.consensus.is_gateway(key) && self.key_index.contains_key(key)
    }

    /// Validate and append a transaction to block `block`.
    ///
    /// Checks run cheapest first: block lookup, duplicate, index, hash link,
    /// expiry, then both signatures.
    pub fn append_transaction(
        &mut self,
        block: u64,
        tx: Arc<Transaction>,
        rules: &Rules<'_>,
    ) -> Result<(), Rejection> {
        let b = self.block(block).ok_or(Rejection::UnknownBlock)?;
        if b.find_duplicate(&tx.info) {
            return Err(Rejection::Duplicate);
        }
        if tx.index != b.ledger.len() as u64 + 1 {
            return Err(Rejection::BadIndex);
        }
        if tx.prev_hash != b.tip_hash {
            return Err(Rejection::BadHashLink);
        }
        if tx.info.produced_at >= b.header.expires_at {
            return Err(Rejection::ExpiredBlock);
        }
        if !tx.info.verify(&b.header.owner_key, rules.sigs) {
            return Err(Rejection::BadDeviceSig);
        }
        if !self.gateway_authorized(&tx.gateway_key, rules)
            || !rules
                .sigs
                .check(&tx.gateway_key, &tx.gateway_signing_bytes(), &tx.gateway_sig)
        {
            return Err(Rejection::BadGatewaySig);
        }
        self.block_mut(block).expect("checked above").push(tx);
        Ok(())
    }

    /// Validate a committed header against the tip and its proof, then
    /// append it with an empty ledger.
    pub fn append_block(
        &mut self,
        header: &BlockHeader,
        proof: &ConsensusDecision,
        rules: &Rules<'_>,
    ) -> Result<(), Rejection> {
        if header.index != self.len() + 1 {
            return Err(Rejection::BadIndex);
        }
        if header.prev_header_hash != self.tip_header_hash() {
            return Err(Rejection::BadPrevHash);
        }
        if self.key_index.contains_key(&header.owner_key) {
            return Err(Rejection::DuplicateKey);
        }
        if header.expires_at <= header.created_at {
            return Err(Rejection::BadExpiry);
        }
        if proof.header != *header || !verify_decision(proof, rules.consensus, rules.sigs) {
            return Err(Rejection::InsufficientQuorum);
        }
        self.key_index.insert(header.owner_key, header.index);
        let block = Block::new(header.clone(), proof.clone());
        self.hash_index.insert(block.header_hash, header.index);
        self.blocks.push(block);
        Ok(())
    }

    /// Re-validate every header, proof and transaction in order.
    pub fn verify_chain(&self, rules: &Rules<'_>) -> Result<(), Violation> {
        let mut owners: HashMap<PublicKey, u64> = HashMap::with_capacity(self.blocks.len());
        let mut prev_header = Digest::ZERO;
        for (i, b) in self.blocks.iter().enumerate() {
            let k = i as u64 + 1;
            let fail = |reason| Violation {
                block: k,
                tx: None,
                reason,
            };
            let h = &b.header;
            if h.prev_header_hash != prev_header {
                return Err(fail(Rejection::BadPrevHash));
            }
            if h.index != k {
                return Err(fail(Rejection::BadIndex));
            }
            if owners.insert(h.owner_key, k).is_some() {
                return Err(fail(Rejection::DuplicateKey));
            }
            if h.expires_at <= h.created_at {
                return Err(fail(Rejection::BadExpiry));
            }
            if b.proof.header != *h || !verify_decision(&b.proof, rules.consensus, rules.sigs) {
                return Err(fail(Rejection::InsufficientQuorum));
            }
            if self.key_index.get(&h.owner_key) != Some(&k) {
                return Err(fail(Rejection::KeyIndexMismatch));
            }
            prev_header = h.digest();
        }
        if self.key_index.len() != self.blocks.len() {
            return Err(Violation {
                block: 0,
                tx: None,
                reason: Rejection::KeyIndexMismatch,
            });
        }

        for (i, b) in self.blocks.iter().enumerate() {
            let k = i as u64 + 1;
            let mut prev = b.header.digest();
            let mut seen: HashMap<(Signature, Timestamp), u64> = HashMap::with_capacity(b.ledger.len());
            for (j, tx) in b.ledger.iter().enumerate() {
                let m = j as u64 + 1;
                let fail = |reason| Violation {
                    block: k,
                    tx: Some(m),
                    reason,
                };
                if tx.prev_hash != prev {
                    return Err(fail(Rejection::BadHashLink));
                }
                if tx.index != m {
                    return Err(fail(Rejection::BadIndex));
                }
                if seen
                    .insert((tx.info.device_sig, tx.info.produced_at), m)
                    .is_some()
                {
                    return Err(fail(Rejection::Duplicate));
                }
                if tx.info.produced_at >= b.header.expires_at {
                    return Err(fail(Rejection::ExpiredBlock));
                }
                if !tx.info.verify(&b.header.owner_key, rules.sigs) {
                    return Err(fail(Rejection::BadDeviceSig));
                }
                if !owners.contains_key(&tx.gateway_key)
                    || !rules.consensus.is_gateway(&tx.gateway_key)
                    || !rules
                        .sigs
                        .check(&tx.gateway_key, &tx.gateway_signing_bytes(), &tx.gateway_sig)
                {
                    return Err(fail(Rejection::BadGatewaySig));
                }
                prev = tx.digest();
            }
        }
        Ok(())
    }

    /// Device entries of block `block` readable at `requester_level`,
    /// oldest first.
    pub fn readable_entries(
        &self,
        block: u64,
        requester_level: u64,
    ) -> impl Iterator<Item = &DeviceInfo> + '_ {
        self.block(block)
            .into_iter()
            .flat_map(|b| b.ledger.iter())
            .map(|t| &t.info)
            .filter(move |info| info.access_level <= requester_level)
    }

    /// Canonical encoding of every header and ledger (commit certificates
    /// excluded): header, 4-byte ledger length, transactions, per block.
    pub fn encode_replica(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.len_prefix(self.blocks.len());
        for b in &self.blocks {
            enc.value(&b.header).len_prefix(b.ledger.len());
            for tx in &b.ledger {
                enc.value(tx.as_ref());
            }
        }
        enc.finish()
    }

    /// SHA-256 of [`Blockchain::encode_replica`], computed incrementally.
    pub fn fingerprint(&self) -> Digest {
        let mut h = Sha256::new();
        h.update((self.blocks.len() as u32).to_be_bytes());
        for b in &self.blocks {
            h.update(encode_canonical(&b.header));
            h.update((b.ledger.len() as u32).to_be_bytes());
            for tx in &b.ledger {
                h.update(encode_canonical(tx.as_ref()));
            }
        }
        Digest(h.finalize().into())
    }

    pub fn to_parts(&self) -> Vec<BlockParts> {
        self.blocks
            .iter()
            .map(|b| BlockParts {
                header: b.header.clone(),
                proof: b.proof.clone(),
                ledger: b.ledger.iter().map(|t| t.as_ref().clone()).collect(),
            })
            .collect()
    }

    /// Assemble a chain from raw parts without validating anything.
    /// Run [`Blockchain::verify_chain`] on the result before trusting it.
    pub fn from_parts_unchecked(parts: Vec<BlockParts>) -> Self {
        let mut chain = Blockchain::new();
        for part in parts {
            chain
                .key_index
                .entry(part.header.owner_key)
                .or_insert(part.header.index);
            let mut block = Block::new(part.header, part.proof);
            chain
                .hash_index
                .entry(block.header_hash)
                .or_insert(block.header.index);
            for tx in part.ledger {
                block.push(Arc::new(tx));
            }
            chain.blocks.push(block);
        }
        chain
    }
}
