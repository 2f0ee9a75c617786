//! Identifier space and cryptographic suite.
//!
//! Every addressable thing in the network (node IDs, static content IDs,
//! updateable-record addresses, target keys, block IDs) is a [`KeyId`]: a
//! 512-bit value produced by SHA-512. Signatures, key agreement, and the
//! symmetric cipher sit behind [`CryptoSuite`] so the rest of the stack only
//! ever sees canonical byte encodings.

use std::fmt;
use std::str::FromStr;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha512};
use thiserror::Error;

/// Length in bytes of every identifier.
pub const KEY_ID_LEN: usize = 64;
/// Length in bits of every identifier.
pub const KEY_ID_BITS: u32 = 512;
/// Symmetric key length used by the authenticated cipher.
pub const SYMMETRIC_KEY_LEN: usize = 32;
/// Nonce length of the authenticated cipher.
pub const AEAD_NONCE_LEN: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentError {
    #[error("invalid key encoding: {0}")]
    InvalidKey(String),
    #[error("invalid key id text: {0}")]
    InvalidHex(String),
    #[error("shared secret must not be empty")]
    EmptySecret,
    #[error("authenticated decryption failed")]
    DecryptFailed,
}

/// A 512-bit identifier, ordered as a big-endian unsigned integer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId([u8; KEY_ID_LEN]);

impl KeyId {
    pub const ZERO: KeyId = KeyId([0; KEY_ID_LEN]);
    pub const MAX: KeyId = KeyId([0xff; KEY_ID_LEN]);

    pub const fn from_bytes(bytes: [u8; KEY_ID_LEN]) -> Self {
        KeyId(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, IdentError> {
        let arr: [u8; KEY_ID_LEN] = bytes.try_into().map_err(|_| {
            IdentError::InvalidKey(format!("expected {KEY_ID_LEN} bytes, got {}", bytes.len()))
        })?;
        Ok(KeyId(arr))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_ID_LEN] {
        &self.0
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; KEY_ID_LEN];
        rng.fill_bytes(&mut bytes);
        KeyId(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentError> {
        if s.len() != KEY_ID_LEN * 2 {
            return Err(IdentError::InvalidHex(format!(
                "expected {} hex characters, got {}",
                KEY_ID_LEN * 2,
                s.len()
            )));
        }
        let bytes = hex::decode(s).map_err(|e| IdentError::InvalidHex(e.to_string()))?;
        Self::from_slice(&bytes)
    }

    pub fn xor(&self, other: &KeyId) -> KeyId {
        let mut out = [0u8; KEY_ID_LEN];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(other.0.iter())) {
            *o = a ^ b;
        }
        KeyId(out)
    }

    /// Number of leading zero bits; 512 for [`KeyId::ZERO`].
    pub fn leading_zeros(&self) -> u32 {
        let mut n = 0;
        for b in self.0 {
            if b == 0 {
                n += 8;
            } else {
                return n + b.leading_zeros();
            }
        }
        n
    }

    /// Bit `i`, counting from the most significant bit.
    pub fn bit(&self, i: u32) -> bool {
        assert!(i < KEY_ID_BITS);
        self.0[(i / 8) as usize] & (0x80 >> (i % 8)) != 0
    }

    pub fn with_bit_flipped(&self, i: u32) -> KeyId {
        assert!(i < KEY_ID_BITS);
        let mut out = self.0;
        out[(i / 8) as usize] ^= 0x80 >> (i % 8);
        KeyId(out)
    }

    /// `self + 1`, or `None` on overflow past [`KeyId::MAX`].
    pub fn checked_increment(&self) -> Option<KeyId> {
        let mut out = self.0;
        for b in out.iter_mut().rev() {
            let (v, carry) = b.overflowing_add(1);
            *b = v;
            if !carry {
                return Some(KeyId(out));
            }
        }
        None
    }

    /// Inclusive bounds of all ids sharing the first `bits` bits with `self`.
    pub fn prefix_range(&self, bits: u32) -> (KeyId, KeyId) {
        let bits = bits.min(KEY_ID_BITS);
        let mut low = self.0;
        let mut high = self.0;
        for i in 0..KEY_ID_LEN {
            let start = (i as u32) * 8;
            let keep = bits.saturating_sub(start).min(8);
            let mask: u8 = if keep == 0 { 0 } else { 0xffu8 << (8 - keep) };
            low[i] &= mask;
            high[i] |= !mask;
        }
        (KeyId(low), KeyId(high))
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({}..)", hex::encode(&self.0[..6]))
    }
}

impl FromStr for KeyId {
    type Err = IdentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KeyId::from_hex(s)
    }
}

// Hex text in human-readable formats, raw bytes in binary ones.
impl Serialize for KeyId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if s.is_human_readable() {
            s.serialize_str(&self.to_hex())
        } else {
            s.serialize_bytes(&self.0)
        }
    }
}

impl<'de> Deserialize<'de> for KeyId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        if d.is_human_readable() {
            let s = String::deserialize(d)?;
            KeyId::from_hex(&s).map_err(serde::de::Error::custom)
        } else {
            let bytes = Vec::<u8>::deserialize(d)?;
            KeyId::from_slice(&bytes).map_err(serde::de::Error::custom)
        }
    }
}

/// SHA-512 of `data`.
pub fn hash(data: &[u8]) -> KeyId {
    KeyId(Sha512::digest(data).into())
}

/// Address derived from a public key: `hash(canonical encoding)`.
pub fn key_id(public_key: &PublicKey) -> Result<KeyId, IdentError> {
    default_suite().check_public(public_key)?;
    Ok(hash(public_key.as_bytes()))
}

/// Truncated SHA-512 of the raw key-agreement output.
pub fn derive_symmetric_key(shared_secret: &[u8]) -> Result<[u8; SYMMETRIC_KEY_LEN], IdentError> {
    if shared_secret.is_empty() {
        return Err(IdentError::EmptySecret);
    }
    let digest = hash(shared_secret);
    let mut key = [0u8; SYMMETRIC_KEY_LEN];
    key.copy_from_slice(&digest.as_bytes()[..SYMMETRIC_KEY_LEN]);
    Ok(key)
}

/// Canonical public signing key encoding.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PublicKey(#[serde(with = "hex_bytes")] Vec<u8>);

impl PublicKey {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        PublicKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn verify(&self, msg: &[u8], sig: &[u8]) -> bool {
        default_suite().verify(self, msg, sig)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0))
    }
}

/// Secret key material. Never part of any wire format.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(Vec<u8>);

impl SecretKey {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        SecretKey(bytes)
    }

    pub fn expose(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Debug)]
pub struct Keypair {
    pub public: PublicKey,
    secret: SecretKey,
}

impl Keypair {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        default_suite().signing_keypair(&seed)
    }

    /// Rebuild from a stored secret.
    pub fn from_secret(secret: SecretKey) -> Result<Self, IdentError> {
        default_suite().signing_keypair_from_secret(secret)
    }

    pub fn secret(&self) -> &SecretKey {
        &self.secret
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        default_suite().sign(self, msg)
    }

    pub fn key_id(&self) -> KeyId {
        hash(self.public.as_bytes())
    }
}

/// Ephemeral key-agreement keypair.
#[derive(Clone, Debug)]
pub struct KaKeypair {
    pub public: Vec<u8>,
    secret: SecretKey,
}

impl KaKeypair {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        default_suite().ka_keypair(&seed)
    }

    pub fn from_secret(secret: SecretKey) -> Result<Self, IdentError> {
        let seed: [u8; 32] = secret
            .expose()
            .try_into()
            .map_err(|_| IdentError::InvalidKey("ka secret must be 32 bytes".into()))?;
        Ok(default_suite().ka_keypair(&seed))
    }

    pub fn secret(&self) -> &SecretKey {
        &self.secret
    }

    pub fn shared_secret(&self, peer_public: &[u8]) -> Result<Vec<u8>, IdentError> {
        default_suite().ka_shared(&self.secret, peer_public)
    }
}

/// Pluggable primitives. The hash is fixed to SHA-512; the identifier space
/// depends on it.
pub trait CryptoSuite: Send + Sync {
    fn name(&self) -> &'static str;

    fn hash(&self, data: &[u8]) -> KeyId {
        hash(data)
    }

    fn signing_keypair(&self, seed: &[u8; 32]) -> Keypair;
    fn signing_keypair_from_secret(&self, secret: SecretKey) -> Result<Keypair, IdentError>;
    fn check_public(&self, pk: &PublicKey) -> Result<(), IdentError>;
    fn sign(&self, kp: &Keypair, msg: &[u8]) -> Vec<u8>;
    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &[u8]) -> bool;

    fn ka_keypair(&self, seed: &[u8; 32]) -> KaKeypair;
    fn check_ka_public(&self, public: &[u8]) -> Result<(), IdentError>;
    fn ka_shared(&self, secret: &SecretKey, peer_public: &[u8]) -> Result<Vec<u8>, IdentError>;

    fn seal(&self, key: &[u8; SYMMETRIC_KEY_LEN], nonce: &[u8; AEAD_NONCE_LEN], plaintext: &[u8]) -> Vec<u8>;
    fn open(
        &self,
        key: &[u8; SYMMETRIC_KEY_LEN],
        nonce: &[u8; AEAD_NONCE_LEN],
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, IdentError>;
}

/// Ed25519 signatures, X25519 key agreement, AES-256-GCM.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultSuite;

static DEFAULT_SUITE: DefaultSuite = DefaultSuite;

pub fn default_suite() -> &'static DefaultSuite {
    &DEFAULT_SUITE
}

impl CryptoSuite for DefaultSuite {
    fn name(&self) -> &'static str {
        "ed25519-x25519-aes256gcm-sha512"
    }

    fn signing_keypair(&self, seed: &[u8; 32]) -> Keypair {
        let sk = SigningKey::from_bytes(seed);
        Keypair {
            public: PublicKey(sk.verifying_key().to_bytes().to_vec()),
            secret: SecretKey(seed.to_vec()),
        }
    }

    fn signing_keypair_from_secret(&self, secret: SecretKey) -> Result<Keypair, IdentError> {
        let seed: [u8; 32] = secret
            .expose()
            .try_into()
            .map_err(|_| IdentError::InvalidKey("signing secret must be 32 bytes".into()))?;
        Ok(self.signing_keypair(&seed))
    }

    fn check_public(&self, pk: &PublicKey) -> Result<(), IdentError> {
        parse_verifying_key(pk).map(|_| ())
    }

    fn sign(&self, kp: &Keypair, msg: &[u8]) -> Vec<u8> {
        let seed: [u8; 32] = kp.secret.expose().try_into().expect("32-byte ed25519 seed");
        SigningKey::from_bytes(&seed).sign(msg).to_bytes().to_vec()
    }

    fn verify(&self, pk: &PublicKey, msg: &[u8], sig: &[u8]) -> bool {
        let Ok(vk) = parse_verifying_key(pk) else {
            return false;
        };
        let Ok(sig) = Signature::from_slice(sig) else {
            return false;
        };
        vk.verify(msg, &sig).is_ok()
    }

    fn ka_keypair(&self, seed: &[u8; 32]) -> KaKeypair {
        let secret = x25519_dalek::StaticSecret::from(*seed);
        let public = x25519_dalek::PublicKey::from(&secret);
        KaKeypair {
            public: public.as_bytes().to_vec(),
            secret: SecretKey(seed.to_vec()),
        }
    }

    fn check_ka_public(&self, public: &[u8]) -> Result<(), IdentError> {
        if public.len() != 32 {
            return Err(IdentError::InvalidKey(format!(
                "x25519 public value must be 32 bytes, got {}",
                public.len()
            )));
        }
        Ok(())
    }

    fn ka_shared(&self, secret: &SecretKey, peer_public: &[u8]) -> Result<Vec<u8>, IdentError> {
        self.check_ka_public(peer_public)?;
        let seed: [u8; 32] = secret
            .expose()
            .try_into()
            .map_err(|_| IdentError::InvalidKey("ka secret must be 32 bytes".into()))?;
        let peer: [u8; 32] = peer_public.try_into().expect("length checked");
        let shared = x25519_dalek::StaticSecret::from(seed)
            .diffie_hellman(&x25519_dalek::PublicKey::from(peer));
        if !shared.was_contributory() {
            return Err(IdentError::InvalidKey("low-order key agreement value".into()));
        }
        Ok(shared.as_bytes().to_vec())
    }

    fn seal(&self, key: &[u8; SYMMETRIC_KEY_LEN], nonce: &[u8; AEAD_NONCE_LEN], plaintext: &[u8]) -> Vec<u8> {
        Aes256Gcm::new(key.into())
            .encrypt(Nonce::from_slice(nonce), plaintext)
            .expect("aes-gcm encryption is infallible for in-memory buffers")
    }

    fn open(
        &self,
        key: &[u8; SYMMETRIC_KEY_LEN],
        nonce: &[u8; AEAD_NONCE_LEN],
        ciphertext: &[u8],
    ) -> Result<Vec<u8>, IdentError> {
        Aes256Gcm::new(key.into())
            .decrypt(Nonce::from_slice(nonce), ciphertext)
            .map_err(|_| IdentError::DecryptFailed)
    }
}

fn parse_verifying_key(pk: &PublicKey) -> Result<VerifyingKey, IdentError> {
    let bytes: [u8; 32] = pk
        .as_bytes()
        .try_into()
        .map_err(|_| IdentError::InvalidKey(format!("ed25519 key must be 32 bytes, got {}", pk.0.len())))?;
    VerifyingKey::from_bytes(&bytes).map_err(|e| IdentError::InvalidKey(e.to_string()))
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        if s.is_human_readable() {
            s.serialize_str(&hex::encode(bytes))
        } else {
            s.serialize_bytes(bytes)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        if d.is_human_readable() {
            let s = String::deserialize(d)?;
            hex::decode(s).map_err(serde::de::Error::custom)
        } else {
            Vec::<u8>::deserialize(d)
        }
    }
}
