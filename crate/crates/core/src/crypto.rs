//! Hash and signature primitives: SHA-256 digests and Ed25519 signatures.

use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Mutex;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};

pub const DIGEST_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("malformed public key")]
    MalformedKey,
    #[error("randomness source unavailable: {0}")]
    Randomness(String),
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    /// Predecessor link of the first header.
    pub const ZERO: Digest = Digest([0; DIGEST_LEN]);

    pub fn is_zero(&self) -> bool {
        self.0 == [0; DIGEST_LEN]
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        to_hex(&self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Ed25519 verifying key. Construction checks that the bytes decode to a
/// curve point, so every `PublicKey` value is usable for verification.
#[derive(Clone, Copy)]
pub struct PublicKey {
    bytes: [u8; PUBLIC_KEY_LEN],
    point: VerifyingKey,
}

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let bytes: [u8; PUBLIC_KEY_LEN] = bytes.try_into().map_err(|_| CryptoError::MalformedKey)?;
        let point = VerifyingKey::from_bytes(&bytes).map_err(|_| CryptoError::MalformedKey)?;
        Ok(Self { bytes, point })
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.bytes
    }

    pub fn to_hex(&self) -> String {
        to_hex(&self.bytes)
    }

    /// Short printable form for logs.
    pub fn short(&self) -> String {
        to_hex(&self.bytes[..4])
    }
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.bytes == other.bytes
    }
}

impl Eq for PublicKey {}

impl Hash for PublicKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.bytes.hash(state);
    }
}

impl PartialOrd for PublicKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PublicKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.bytes.cmp(&other.bytes)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}..)", self.short())
    }
}

#[derive(Clone)]
pub struct SecretKey(SigningKey);

impl SecretKey {
    pub fn public_key(&self) -> PublicKey {
        let point = self.0.verifying_key();
        PublicKey {
            bytes: point.to_bytes(),
            point,
        }
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", to_hex(&self.0[..6]))
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

impl KeyPair {
    /// Deterministic key pair from a 32-byte seed.
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let secret = SecretKey(SigningKey::from_bytes(&seed));
        Self {
            public: secret.public_key(),
            secret,
        }
    }

    pub fn from_rng<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        sign(&self.secret, msg)
    }
}

/// Fresh key pair from the operating system's randomness source.
pub fn generate_key_pair() -> Result<KeyPair, CryptoError> {
    let mut seed = [0u8; 32];
    OsRng
        .try_fill_bytes(&mut seed)
        .map_err(|e| CryptoError::Randomness(e.to_string()))?;
    Ok(KeyPair::from_seed(seed))
}

pub fn sign(sk: &SecretKey, msg: &[u8]) -> Signature {
    Signature(sk.0.sign(msg).to_bytes())
}

/// Malformed signatures verify as `false`.
pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    pk.point.verify_strict(msg, &sig).is_ok()
}

/// Signature verification strategy used by validation code.
pub trait SignatureCheck: Send + Sync {
    fn check(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool;
}

/// Plain verification, no memoization.
#[derive(Debug, Default, Clone, Copy)]
pub struct DirectCheck;

impl SignatureCheck for DirectCheck {
    fn check(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        verify(pk, msg, sig)
    }
}

/// Memoizes successful verifications, keyed by SHA-256 of `(pk, sig, msg)`.
///
/// Verification is a pure function, so replicas that share a process can
/// share this cache; only positive results are stored.
#[derive(Debug, Default)]
pub struct VerifyCache {
    known: Mutex<HashSet<[u8; DIGEST_LEN]>>,
}

impl VerifyCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(pk: &PublicKey, msg: &[u8], sig: &Signature) -> [u8; DIGEST_LEN] {
        let mut h = Sha256::new();
        h.update(pk.as_bytes());
        h.update(sig.as_bytes());
        h.update(msg);
        h.finalize().into()
    }

    /// Record a signature this process just produced with the matching
    /// secret key.
    pub fn record_signed(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) {
        let key = Self::key(pk, msg, sig);
        self.known.lock().expect("cache poisoned").insert(key);
    }

    pub fn len(&self) -> usize {
        self.known.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SignatureCheck for VerifyCache {
    fn check(&self, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
        let key = Self::key(pk, msg, sig);
        if self.known.lock().expect("cache poisoned").contains(&key) {
            return true;
        }
        let ok = verify(pk, msg, sig);
        if ok {
            self.known.lock().expect("cache poisoned").insert(key);
        }
        ok
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    const HEX: &[u8; 16] = b"0123456789abcdef";
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push(HEX[(b >> 4) as usize] as char);
        out.push(HEX[(b & 0xf) as usize] as char);
    }
    out
}

impl Canonical for Digest {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.fixed().map(Digest)
    }
}

impl Canonical for PublicKey {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.bytes);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let raw: [u8; PUBLIC_KEY_LEN] = dec.fixed()?;
        PublicKey::from_bytes(&raw).map_err(|_| CodecError::BadKey)
    }
}

impl Canonical for Signature {
    fn encode(&self, enc: &mut Encoder) {
        enc.fixed(&self.0);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.fixed().map(Signature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_input_digest_matches_reference() {
        // Reference value from FIPS 180-2 test vectors (and `sha256sum </dev/null`).
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn single_bit_flip_changes_digest() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let len = rng.gen_range(1..256);
            let mut x: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let before = hash(&x);
            assert_eq!(before, hash(&x));
            let bit = rng.gen_range(0..len * 8);
            x[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(before, hash(&x));
        }
    }

    #[test]
    fn generated_keys_are_distinct_and_sign() {
        let a = generate_key_pair().unwrap();
        let b = generate_key_pair().unwrap();
        assert_ne!(a.public, b.public);
        let sig = a.sign(b"abc");
        assert!(verify(&a.public, b"abc", &sig));
        assert!(!verify(&b.public, b"abc", &sig));
        assert!(!verify(&a.public, b"abd", &sig));
    }

    #[test]
    fn zero_signature_is_rejected() {
        let a = KeyPair::from_seed([3; 32]);
        assert!(!verify(&a.public, b"m", &Signature([0; SIGNATURE_LEN])));
    }

    #[test]
    fn seeded_keys_are_deterministic() {
        let a = KeyPair::from_seed([9; 32]);
        let b = KeyPair::from_seed([9; 32]);
        assert_eq!(a.public, b.public);
        assert_eq!(a.sign(b"x"), b.sign(b"x"));
    }

    #[test]
    fn malformed_public_key_bytes() {
        assert!(PublicKey::from_bytes(&[1, 2, 3]).is_err());
        // y = 2 is not on the curve.
        let mut bad = [0u8; 32];
        bad[0] = 2;
        assert!(PublicKey::from_bytes(&bad).is_err());
    }

    #[test]
    fn cache_agrees_with_direct_verification() {
        let cache = VerifyCache::new();
        let a = KeyPair::from_seed([1; 32]);
        let sig = a.sign(b"payload");
        assert!(cache.check(&a.public, b"payload", &sig));
        assert!(cache.check(&a.public, b"payload", &sig));
        assert!(!cache.check(&a.public, b"payload!", &sig));
        assert_eq!(cache.len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sign_verify_round_trip(seed in any::<[u8; 32]>(), other in any::<[u8; 32]>(), msg in proptest::collection::vec(any::<u8>(), 0..200)) {
                let kp = KeyPair::from_seed(seed);
                let sig = kp.sign(&msg);
                prop_assert!(verify(&kp.public, &msg, &sig));
                if seed != other {
                    let kp2 = KeyPair::from_seed(other);
                    prop_assert!(!verify(&kp2.public, &msg, &sig));
                }
            }
        }
    }
}
