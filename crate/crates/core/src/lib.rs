//! Appendable-block blockchain for gateway-based IoT networks.
//!
//! Every device owns one block. The block header is admitted once by
//! consensus among gateways; afterwards the device's home gateway keeps
//! appending signed readings to the block's ledger, and the other gateways
//! replicate them without further consensus.
//!
//! The crate contains the data model ([`chain`]), the canonical encoding
//! ([`codec`]), the consensus engine ([`consensus`]), gateway and device
//! state machines ([`gateway`], [`device`]), a deterministic network
//! simulator and a TCP transport ([`net`]), and the benchmark scenario
//! runner ([`scenario`], [`report`]).

pub mod chain;
pub mod codec;
pub mod consensus;
pub mod crypto;
pub mod device;
pub mod gateway;
pub mod journal;
pub mod metrics;
pub mod net;
pub mod report;
pub mod scenario;
pub mod wire;

#[doc(hidden)]
pub mod testkit;

pub use chain::{Block, BlockHeader, Blockchain, DeviceInfo, Rejection, Rules, Transaction, Violation};
pub use codec::{decode_canonical, encode_canonical, Canonical, CodecError};
pub use consensus::{Algorithm, ConsensusConfig, ConsensusDecision};
pub use crypto::{hash, Digest, KeyPair, PublicKey, SecretKey, Signature};
