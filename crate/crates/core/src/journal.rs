//! Append-only journal of a gateway's chain.
//!
//! Each record is `type-byte || 4-byte big-endian length || payload`:
//!
//! | type | payload |
//! |------|---------|
//! | 0x01 | block header |
//! | 0x02 | block index (u64) then transaction |
//! | 0x03 | consensus configuration |
//! | 0x04 | commit certificate of the preceding header |
//!
//! Replaying a journal re-validates every record through the normal append
//! paths, so a tampered file is rejected rather than trusted.

use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::chain::{BlockHeader, Blockchain, Rejection, Rules, Transaction, Violation};
use crate::codec::{decode_canonical, Canonical, CodecError, Decoder, Encoder};
use crate::consensus::{Algorithm, ConsensusConfig, ConsensusDecision};
use crate::crypto::{PublicKey, SignatureCheck};

pub const HEADER: u8 = 0x01;
pub const TRANSACTION: u8 = 0x02;
pub const CONFIG: u8 = 0x03;
pub const DECISION: u8 = 0x04;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("record at byte {offset} is truncated")]
    Truncated { offset: usize },
    #[error("unknown record type {kind:#04x} at byte {offset}")]
    UnknownRecord { kind: u8, offset: usize },
    #[error("record at byte {offset}: {source}")]
    Codec {
        offset: usize,
        #[source]
        source: CodecError,
    },
    #[error("journal does not start with a configuration record")]
    MissingConfig,
    #[error("invalid configuration: {0}")]
    Config(#[from] crate::consensus::ConfigError),
    #[error("record {record}: {what}")]
    Sequence { record: usize, what: &'static str },
    #[error("record {record} rejected: {reason}")]
    Rejected { record: usize, reason: Rejection },
    #[error("replayed chain fails verification: {0}")]
    Verify(Violation),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Record {
    Config(ConsensusConfig),
    Header(BlockHeader),
    Decision(ConsensusDecision),
    Transaction { block: u64, tx: Transaction },
}

fn encode_config(cfg: &ConsensusConfig) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.u64(cfg.algorithm.code())
        .u64(cfg.witness_minimum as u64)
        .u64(cfg.leader_index as u64)
        .u64(cfg.timeout_ms)
        .list(&cfg.gateways);
    enc.finish()
}

fn decode_config(bytes: &[u8]) -> Result<ConsensusConfig, CodecError> {
    let mut dec = Decoder::new(bytes);
    let code = dec.u64()?;
    let algorithm = Algorithm::from_code(code).ok_or(CodecError::BadValue {
        what: "algorithm",
        value: code,
    })?;
    let cfg = ConsensusConfig {
        algorithm,
        witness_minimum: dec.u64()? as usize,
        leader_index: dec.u64()? as usize,
        timeout_ms: dec.u64()?,
        gateways: dec.list::<PublicKey>()?,
    };
    dec.finish()?;
    Ok(cfg)
}

impl Record {
    pub fn kind(&self) -> u8 {
        match self {
            Record::Config(_) => CONFIG,
            Record::Header(_) => HEADER,
            Record::Decision(_) => DECISION,
            Record::Transaction { .. } => TRANSACTION,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = match self {
            Record::Config(cfg) => encode_config(cfg),
            Record::Header(h) => crate::codec::encode_canonical(h),
            Record::Decision(d) => crate::codec::encode_canonical(d),
            Record::Transaction { block, tx } => {
                let mut enc = Encoder::new();
                enc.u64(*block).value(tx);
                enc.finish()
            }
        };
        let mut out = Vec::with_capacity(payload.len() + 5);
        out.push(self.kind());
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&payload);
        out
    }
}

/// Parse records. A final record cut short by a crash is reported through
/// the returned flag; any other damage is an error.
pub fn parse(bytes: &[u8]) -> Result<(Vec<Record>, bool), JournalError> {
    let mut records = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let offset = pos;
        if bytes.len() - pos < 5 {
            return Ok((records, true));
        }
        let kind = bytes[pos];
        let len = u32::from_be_bytes(bytes[pos + 1..pos + 5].try_into().expect("4 bytes")) as usize;
        pos += 5;
        if bytes.len() - pos < len {
            return Ok((records, true));
        }
        let payload = &bytes[pos..pos + len];
        pos += len;
        let codec = |source| JournalError::Codec { offset, source };
        let record = match kind {
            CONFIG => Record::Config(decode_config(payload).map_err(codec)?),
            HEADER => Record::Header(decode_canonical(payload).map_err(codec)?),
            DECISION => Record::Decision(decode_canonical(payload).map_err(codec)?),
            TRANSACTION => {
                let mut dec = Decoder::new(payload);
                let block = dec.u64().map_err(codec)?;
                let tx = Transaction::decode(&mut dec).map_err(codec)?;
                dec.finish().map_err(codec)?;
                Record::Transaction { block, tx }
            }
            kind => return Err(JournalError::UnknownRecord { kind, offset }),
        };
        records.push(record);
    }
    Ok((records, false))
}

/// Result of replaying a journal.
#[derive(Debug)]
pub struct Replay {
    pub config: ConsensusConfig,
    pub chain: Blockchain,
    /// A trailing partial record was ignored.
    pub truncated_tail: bool,
}

/// Rebuild a chain from journal bytes, validating every step and then the
/// whole chain.
pub fn replay(bytes: &[u8], sigs: &dyn SignatureCheck) -> Result<Replay, JournalError> {
    let (records, truncated_tail) = parse(bytes)?;
    let mut iter = records.into_iter().enumerate();
    let config = match iter.next() {
        Some((_, Record::Config(cfg))) => cfg,
        _ => return Err(JournalError::MissingConfig),
    };
    config.validate()?;
    let rules = Rules::new(&config, sigs);
    let mut chain = Blockchain::new();
    let mut pending: Option<BlockHeader> = None;
    for (record, item) in iter {
        match item {
            Record::Config(_) => {
                return Err(JournalError::Sequence {
                    record,
                    what: "configuration repeated",
                })
            }
            Record::Header(h) => {
                if pending.replace(h).is_some() {
                    return Err(JournalError::Sequence {
                        record,
                        what: "header without certificate",
                    });
                }
            }
            Record::Decision(d) => {
                let header = pending.take().ok_or(JournalError::Sequence {
                    record,
                    what: "certificate without header",
                })?;
                chain
                    .append_block(&header, &d, &rules)
                    .map_err(|reason| JournalError::Rejected { record, reason })?;
            }
            Record::Transaction { block, tx } => chain
                .append_transaction(block, Arc::new(tx), &rules)
                .map_err(|reason| JournalError::Rejected { record, reason })?,
        }
    }
    chain.verify_chain(&rules).map_err(JournalError::Verify)?;
    Ok(Replay {
        config,
        chain,
        truncated_tail,
    })
}

/// Streams records to any writer.
pub struct JournalWriter {
    out: Box<dyn Write + Send>,
}

impl JournalWriter {
    pub fn new(out: Box<dyn Write + Send>, config: &ConsensusConfig) -> io::Result<Self> {
        let mut w = Self { out };
        w.write(&Record::Config(config.clone()))?;
        Ok(w)
    }

    pub fn write(&mut self, record: &Record) -> io::Result<()> {
        self.out.write_all(&record.encode())
    }

    pub fn block(&mut self, header: &BlockHeader, decision: &ConsensusDecision) -> io::Result<()> {
        self.write(&Record::Header(header.clone()))?;
        self.write(&Record::Decision(decision.clone()))
    }

    pub fn transaction(&mut self, block: u64, tx: &Transaction) -> io::Result<()> {
        let mut enc = Encoder::new();
        enc.u64(block).value(tx);
        let payload = enc.finish();
        let mut out = Vec::with_capacity(payload.len() + 5);
        out.push(TRANSACTION);
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&payload);
        self.out.write_all(&out)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Journal bytes for an existing chain.
pub fn export(config: &ConsensusConfig, chain: &Blockchain) -> Vec<u8> {
    let mut out = Record::Config(config.clone()).encode();
    for b in chain.blocks() {
        out.extend(Record::Header(b.header().clone()).encode());
        out.extend(Record::Decision(b.proof().clone()).encode());
        for tx in b.ledger() {
            out.extend(
                Record::Transaction {
                    block: b.header().index,
                    tx: tx.as_ref().clone(),
                }
                .encode(),
            );
        }
    }
    out
}
