//! Message framing shared by the simulator and the socket transport.
//!
//! A message is `type-byte || canonical payload`. On a stream socket each
//! message is additionally preceded by a 4-byte big-endian length.

use std::fmt;
use std::sync::{Arc, OnceLock};

use thiserror::Error;

use crate::chain::{BlockHeader, DeviceInfo, Rejection, Timestamp, Transaction};
use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::consensus::{ConsensusDecision, ConsensusMsg};
use crate::crypto::{Digest, PublicKey};

/// Upper bound on a socket frame; larger declared lengths are refused.
pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("empty message")]
    Empty,
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("bad status code {0}")]
    BadStatus(u64),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Outcome carried by replies: `None` is success.
pub type Status = Option<Rejection>;

fn encode_status(enc: &mut Encoder, status: Status) {
    enc.u64(status.map_or(0, Rejection::code));
}

fn decode_status(dec: &mut Decoder<'_>) -> Result<Status, WireError> {
    match dec.u64()? {
        0 => Ok(None),
        code => Rejection::from_code(code)
            .map(Some)
            .ok_or(WireError::BadStatus(code)),
    }
}

/// One block in a sync response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncBlock {
    pub decision: ConsensusDecision,
    pub ledger: Vec<Arc<Transaction>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Consensus(ConsensusMsg),
    /// A transaction appended by its home gateway, with the digest of the
    /// header that owns it.
    PeerTransaction {
        tx: Arc<Transaction>,
        header_hash: Digest,
    },
    PeerBlock {
        header: BlockHeader,
        decision: ConsensusDecision,
    },
    SyncRequest {
        from_index: u64,
    },
    SyncResponse {
        blocks: Vec<SyncBlock>,
        /// Where to continue if the response was truncated.
        next: Option<u64>,
    },
    /// Ask the leader to admit a header for `key`.
    JoinRequest {
        round: u64,
        key: PublicKey,
    },
    JoinResult {
        key: PublicKey,
        status: Status,
    },
    Connect {
        key: PublicKey,
    },
    Data {
        key: PublicKey,
        info: DeviceInfo,
    },
    NewKeyRequest {
        old_key: PublicKey,
    },
    NewKeyResponse {
        old_key: PublicKey,
        new_key: PublicKey,
    },
    Query {
        key: PublicKey,
        level: u64,
    },
    QueryResponse {
        key: PublicKey,
        status: Status,
        entries: Vec<DeviceInfo>,
    },
    ConnectResult {
        key: PublicKey,
        status: Status,
        retry_after_ms: u64,
    },
    DataAck {
        key: PublicKey,
        produced_at: Timestamp,
        status: Status,
    },
}

impl Message {
    pub const PEER_TRANSACTION: u8 = 0x20;
    pub const PEER_BLOCK: u8 = 0x21;
    pub const SYNC_REQUEST: u8 = 0x22;
    pub const SYNC_RESPONSE: u8 = 0x23;
    pub const JOIN_REQUEST: u8 = 0x24;
    pub const JOIN_RESULT: u8 = 0x25;
    pub const CONNECT: u8 = 0x30;
    pub const DATA: u8 = 0x31;
    pub const NEW_KEY_REQUEST: u8 = 0x32;
    pub const NEW_KEY_RESPONSE: u8 = 0x33;
    pub const QUERY: u8 = 0x34;
    pub const QUERY_RESPONSE: u8 = 0x35;
    pub const CONNECT_RESULT: u8 = 0x36;
    pub const DATA_ACK: u8 = 0x37;

    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Consensus(m) => m.type_byte(),
            Message::PeerTransaction { .. } => Self::PEER_TRANSACTION,
            Message::PeerBlock { .. } => Self::PEER_BLOCK,
            Message::SyncRequest { .. } => Self::SYNC_REQUEST,
            Message::SyncResponse { .. } => Self::SYNC_RESPONSE,
            Message::JoinRequest { .. } => Self::JOIN_REQUEST,
            Message::JoinResult { .. } => Self::JOIN_RESULT,
            Message::Connect { .. } => Self::CONNECT,
            Message::Data { .. } => Self::DATA,
            Message::NewKeyRequest { .. } => Self::NEW_KEY_REQUEST,
            Message::NewKeyResponse { .. } => Self::NEW_KEY_RESPONSE,
            Message::Query { .. } => Self::QUERY,
            Message::QueryResponse { .. } => Self::QUERY_RESPONSE,
            Message::ConnectResult { .. } => Self::CONNECT_RESULT,
            Message::DataAck { .. } => Self::DATA_ACK,
        }
    }

    /// Gateway-to-gateway traffic; everything else involves a device or
    /// service provider.
    pub fn is_peer_type(type_byte: u8) -> bool {
        (0x10..0x30).contains(&type_byte)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut enc = Encoder::with_capacity(256);
        enc.u8(self.type_byte());
        match self {
            Message::Consensus(m) => m.encode_payload(&mut enc),
            Message::PeerTransaction { tx, header_hash } => {
                enc.value(tx.as_ref()).value(header_hash);
            }
            Message::PeerBlock { header, decision } => {
                enc.value(header).value(decision);
            }
            Message::SyncRequest { from_index } => {
                enc.u64(*from_index);
            }
            Message::SyncResponse { blocks, next } => {
                enc.len_prefix(blocks.len());
                for b in blocks {
                    enc.value(&b.decision).len_prefix(b.ledger.len());
                    for tx in &b.ledger {
                        enc.value(tx.as_ref());
                    }
                }
                enc.option(next.as_ref(), |e, n| {
                    e.u64(*n);
                });
            }
            Message::JoinRequest { round, key } => {
                enc.u64(*round).value(key);
            }
            Message::JoinResult { key, status } => {
                enc.value(key);
                encode_status(&mut enc, *status);
            }
            Message::Connect { key } => {
                enc.value(key);
            }
            Message::Data { key, info } => {
                enc.value(key).value(info);
            }
            Message::NewKeyRequest { old_key } => {
                enc.value(old_key);
            }
            Message::NewKeyResponse { old_key, new_key } => {
                enc.value(old_key).value(new_key);
            }
            Message::Query { key, level } => {
                enc.value(key).u64(*level);
            }
            Message::QueryResponse {
                key,
                status,
                entries,
            } => {
                enc.value(key);
                encode_status(&mut enc, *status);
                enc.list(entries);
            }
            Message::ConnectResult {
                key,
                status,
                retry_after_ms,
            } => {
                enc.value(key);
                encode_status(&mut enc, *status);
                enc.u64(*retry_after_ms);
            }
            Message::DataAck {
                key,
                produced_at,
                status,
            } => {
                enc.value(key).u64(*produced_at);
                encode_status(&mut enc, *status);
            }
        }
        enc.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (&type_byte, payload) = bytes.split_first().ok_or(WireError::Empty)?;
        let mut dec = Decoder::new(payload);
        let msg = Self::decode_payload(type_byte, &mut dec)?;
        dec.finish()?;
        Ok(msg)
    }

    fn decode_payload(type_byte: u8, dec: &mut Decoder<'_>) -> Result<Self, WireError> {
        if let Some(m) = ConsensusMsg::decode_payload(type_byte, dec) {
            return Ok(Message::Consensus(m?));
        }
        Ok(match type_byte {
            Self::PEER_TRANSACTION => Message::PeerTransaction {
                tx: Arc::new(dec.value()?),
                header_hash: dec.value()?,
            },
            Self::PEER_BLOCK => Message::PeerBlock {
                header: dec.value()?,
                decision: dec.value()?,
            },
            Self::SYNC_REQUEST => Message::SyncRequest {
                from_index: dec.u64()?,
            },
            Self::SYNC_RESPONSE => {
                let count = dec.len_prefix()?;
                let mut blocks = Vec::with_capacity(count);
                for _ in 0..count {
                    let decision = dec.value()?;
                    let n = dec.len_prefix()?;
                    let mut ledger = Vec::with_capacity(n);
                    for _ in 0..n {
                        ledger.push(Arc::new(Transaction::decode(dec)?));
                    }
                    blocks.push(SyncBlock { decision, ledger });
                }
                Message::SyncResponse {
                    blocks,
                    next: dec.option(|d| d.u64())?,
                }
            }
            Self::JOIN_REQUEST => Message::JoinRequest {
                round: dec.u64()?,
                key: dec.value()?,
            },
            Self::JOIN_RESULT => Message::JoinResult {
                key: dec.value()?,
                status: decode_status(dec)?,
            },
            Self::CONNECT => Message::Connect { key: dec.value()? },
            Self::DATA => Message::Data {
                key: dec.value()?,
                info: dec.value()?,
            },
            Self::NEW_KEY_REQUEST => Message::NewKeyRequest {
                old_key: dec.value()?,
            },
            Self::NEW_KEY_RESPONSE => Message::NewKeyResponse {
                old_key: dec.value()?,
                new_key: dec.value()?,
            },
            Self::QUERY => Message::Query {
                key: dec.value()?,
                level: dec.u64()?,
            },
            Self::QUERY_RESPONSE => Message::QueryResponse {
                key: dec.value()?,
                status: decode_status(dec)?,
                entries: dec.list()?,
            },
            Self::CONNECT_RESULT => Message::ConnectResult {
                key: dec.value()?,
                status: decode_status(dec)?,
                retry_after_ms: dec.u64()?,
            },
            Self::DATA_ACK => Message::DataAck {
                key: dec.value()?,
                produced_at: dec.u64()?,
                status: decode_status(dec)?,
            },
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

struct FrameInner {
    bytes: Vec<u8>,
    decoded: OnceLock<Result<Message, WireError>>,
}

/// Encoded message shared between recipients; decoded at most once.
#[derive(Clone)]
pub struct Frame(Arc<FrameInner>);

impl Frame {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Frame(Arc::new(FrameInner {
            bytes,
            decoded: OnceLock::new(),
        }))
    }

    /// Encode `msg`, keeping the value so receivers skip decoding.
    pub fn from_message(msg: Message) -> Self {
        let bytes = msg.encode();
        let decoded = OnceLock::new();
        let _ = decoded.set(Ok(msg));
        Frame(Arc::new(FrameInner { bytes, decoded }))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0.bytes
    }

    pub fn len(&self) -> usize {
        self.0.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.bytes.is_empty()
    }

    pub fn type_byte(&self) -> Option<u8> {
        self.0.bytes.first().copied()
    }

    pub fn message(&self) -> Result<&Message, &WireError> {
        self.0
            .decoded
            .get_or_init(|| Message::decode(&self.0.bytes))
            .as_ref()
    }
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Frame({:#04x?}, {} bytes)", self.type_byte(), self.len())
    }
}

/// Prefix `msg` with its 4-byte big-endian length.
pub fn length_prefixed(msg: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.len() + 4);
    out.extend_from_slice(&(msg.len() as u32).to_be_bytes());
    out.extend_from_slice(msg);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{Algorithm, Phase, Vote};
    use crate::crypto::KeyPair;
    use crate::testkit::{device_info, TestNet};

    fn samples() -> Vec<Message> {
        let mut net = TestNet::new(Algorithm::Pbft, 4, 1);
        let dev = KeyPair::from_seed([3; 32]);
        let k = net.add_block(&dev.public);
        let tx = net.append(k, &dev, 7);
        let block = net.chain.block(k).unwrap();
        let header = block.header().clone();
        let decision = block.proof().clone();
        let vote = Vote::sign(&net.gateways[1], header.digest(), Phase::Prepare);
        vec![
            Message::Consensus(ConsensusMsg::PrePrepare { round: 3, header: header.clone() }),
            Message::Consensus(ConsensusMsg::Prepare { round: 3, vote: vote.clone() }),
            Message::Consensus(ConsensusMsg::Commit { round: 3, vote: vote.clone() }),
            Message::Consensus(ConsensusMsg::WitnessRequest { round: 1, header: header.clone() }),
            Message::Consensus(ConsensusMsg::WitnessVote { round: 1, vote }),
            Message::Consensus(ConsensusMsg::Decision(decision.clone())),
            Message::PeerTransaction { tx: tx.clone(), header_hash: header.digest() },
            Message::PeerBlock { header: header.clone(), decision: decision.clone() },
            Message::SyncRequest { from_index: 2 },
            Message::SyncResponse {
                blocks: vec![SyncBlock { decision, ledger: vec![tx] }],
                next: Some(6),
            },
            Message::JoinRequest { round: 2, key: dev.public },
            Message::JoinResult { key: dev.public, status: Some(Rejection::DuplicateKey) },
            Message::Connect { key: dev.public },
            Message::Data { key: dev.public, info: device_info(&dev, 1, 9) },
            Message::NewKeyRequest { old_key: dev.public },
            Message::NewKeyResponse { old_key: dev.public, new_key: net.gateways[0].public },
            Message::Query { key: dev.public, level: 1 },
            Message::QueryResponse { key: dev.public, status: None, entries: vec![device_info(&dev, 0, 1)] },
            Message::ConnectResult { key: dev.public, status: None, retry_after_ms: 0 },
            Message::DataAck { key: dev.public, produced_at: 9, status: Some(Rejection::ExpiredBlock) },
        ]
    }

    #[test]
    fn every_message_round_trips() {
        for msg in samples() {
            let bytes = msg.encode();
            assert_eq!(bytes[0], msg.type_byte());
            assert_eq!(Message::decode(&bytes).unwrap(), msg);
        }
    }

    #[test]
    fn truncations_and_extensions_are_rejected() {
        for msg in samples() {
            let bytes = msg.encode();
            for cut in 0..bytes.len() {
                assert!(Message::decode(&bytes[..cut]).is_err());
            }
            let mut longer = bytes.clone();
            longer.push(0);
            assert!(Message::decode(&longer).is_err());
        }
    }

    #[test]
    fn unknown_type_is_rejected() {
        assert_eq!(Message::decode(&[0x7f]), Err(WireError::UnknownType(0x7f)));
        assert_eq!(Message::decode(&[]), Err(WireError::Empty));
    }

    #[test]
    fn peer_transaction_layout() {
        let msg = &samples()[6];
        let Message::PeerTransaction { tx, header_hash } = msg else { unreachable!() };
        let bytes = msg.encode();
        assert_eq!(bytes[0], 0x20);
        assert_eq!(&bytes[1..bytes.len() - 32], crate::codec::encode_canonical(tx.as_ref()).as_slice());
        assert_eq!(&bytes[bytes.len() - 32..], header_hash.as_bytes());
    }

    #[test]
    fn frame_decodes_lazily_and_once() {
        let msg = samples().remove(8);
        let f = Frame::from_bytes(msg.encode());
        assert_eq!(f.message().unwrap(), &msg);
        let g = f.clone();
        assert!(std::ptr::eq(f.message().unwrap(), g.message().unwrap()));
        assert_eq!(length_prefixed(f.bytes())[..4], (f.len() as u32).to_be_bytes());
    }
}
