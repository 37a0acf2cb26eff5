use crate::chain::BlockHeader;
use crate::codec::{CodecError, Decoder, Encoder};

use super::{ConsensusDecision, Vote};

/// Gateway-to-gateway consensus traffic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConsensusMsg {
    PrePrepare { round: u64, header: BlockHeader },
    Prepare { round: u64, vote: Vote },
    Commit { round: u64, vote: Vote },
    WitnessRequest { round: u64, header: BlockHeader },
    WitnessVote { round: u64, vote: Vote },
    Decision(ConsensusDecision),
}

impl ConsensusMsg {
    pub const PRE_PREPARE: u8 = 0x10;
    pub const PREPARE: u8 = 0x11;
    pub const COMMIT: u8 = 0x12;
    pub const WITNESS_REQUEST: u8 = 0x13;
    pub const WITNESS_VOTE: u8 = 0x14;
    pub const DECISION: u8 = 0x15;

    pub fn type_byte(&self) -> u8 {
        match self {
            ConsensusMsg::PrePrepare { .. } => Self::PRE_PREPARE,
            ConsensusMsg::Prepare { .. } => Self::PREPARE,
            ConsensusMsg::Commit { .. } => Self::COMMIT,
            ConsensusMsg::WitnessRequest { .. } => Self::WITNESS_REQUEST,
            ConsensusMsg::WitnessVote { .. } => Self::WITNESS_VOTE,
            ConsensusMsg::Decision(_) => Self::DECISION,
        }
    }

    pub fn round(&self) -> u64 {
        match self {
            ConsensusMsg::PrePrepare { round, .. }
            | ConsensusMsg::Prepare { round, .. }
            | ConsensusMsg::Commit { round, .. }
            | ConsensusMsg::WitnessRequest { round, .. }
            | ConsensusMsg::WitnessVote { round, .. } => *round,
            ConsensusMsg::Decision(d) => d.round,
        }
    }

    pub fn encode_payload(&self, enc: &mut Encoder) {
        match self {
            ConsensusMsg::PrePrepare { round, header }
            | ConsensusMsg::WitnessRequest { round, header } => {
                enc.u64(*round).value(header);
            }
            ConsensusMsg::Prepare { round, vote }
            | ConsensusMsg::Commit { round, vote }
            | ConsensusMsg::WitnessVote { round, vote } => {
                enc.u64(*round).value(vote);
            }
            ConsensusMsg::Decision(d) => {
                enc.value(d);
            }
        }
    }

    /// Decode the payload for `type_byte`; `None` if the type is not a
    /// consensus message.
    pub fn decode_payload(
        type_byte: u8,
        dec: &mut Decoder<'_>,
    ) -> Option<Result<Self, CodecError>> {
        let msg = match type_byte {
            Self::PRE_PREPARE => (|| {
                Ok(ConsensusMsg::PrePrepare {
                    round: dec.u64()?,
                    header: dec.value()?,
                })
            })(),
            Self::PREPARE => (|| {
                Ok(ConsensusMsg::Prepare {
                    round: dec.u64()?,
                    vote: dec.value()?,
                })
            })(),
            Self::COMMIT => (|| {
                Ok(ConsensusMsg::Commit {
                    round: dec.u64()?,
                    vote: dec.value()?,
                })
            })(),
            Self::WITNESS_REQUEST => (|| {
                Ok(ConsensusMsg::WitnessRequest {
                    round: dec.u64()?,
                    header: dec.value()?,
                })
            })(),
            Self::WITNESS_VOTE => (|| {
                Ok(ConsensusMsg::WitnessVote {
                    round: dec.u64()?,
                    vote: dec.value()?,
                })
            })(),
            Self::DECISION => dec.value().map(ConsensusMsg::Decision),
            _ => return None,
        };
        Some(msg)
    }
}
