//! Cryptographic facade shared by every other module: SHA-256 digests,
//! Ed25519 signatures, hybrid public-key sealing and 128-bit nonces.
//!
//! A [`KeyPair`] bundles two halves derived from one 32-byte seed: an Ed25519
//! signing key and an X25519 static secret. The serialized public key is the
//! 32-byte Ed25519 verifying key followed by the 32-byte X25519 public key.
//!
//! Sealing wraps a fresh AES-256-GCM content key under a key derived (HKDF-SHA256)
//! from an ephemeral X25519 exchange with the recipient. The payload ciphertext
//! is authenticated together with the wrapped key, so a flipped bit in either
//! field fails to open.

use std::fmt;
use std::str::FromStr;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce as GcmNonce};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublic, StaticSecret};

/// Default upper bound on a sealed payload.
pub const MAX_SEAL_PAYLOAD: usize = 64 * 1024;

const SEAL_INFO: &[u8] = b"bonik-seal-v1";
const GCM_IV_LEN: usize = 12;
const GCM_TAG_LEN: usize = 16;
const CONTENT_KEY_LEN: usize = 32;
const WRAPPED_KEY_LEN: usize = 32 + GCM_IV_LEN + CONTENT_KEY_LEN + GCM_TAG_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("payload of {size} bytes exceeds the {limit}-byte seal bound")]
    PayloadTooLarge { size: usize, limit: usize },
    #[error("authenticated decryption failed")]
    Decryption,
    #[error("key agreement produced a non-contributory secret")]
    WeakKey,
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MessageDigest(pub [u8; 32]);

impl MessageDigest {
    pub const ZERO: MessageDigest = MessageDigest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for MessageDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for MessageDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MessageDigest({})", self.to_hex())
    }
}

/// Digest strings are accepted only in the canonical lowercase form so that a
/// serialized digest has exactly one spelling.
impl FromStr for MessageDigest {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(CryptoError::Malformed("digest"));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| CryptoError::Malformed("digest"))?;
        Ok(MessageDigest(out))
    }
}

impl Serialize for MessageDigest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for MessageDigest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// SHA-256 of `message`.
pub fn hash(message: &[u8]) -> MessageDigest {
    MessageDigest(sha256(message))
}

/// Canonical wire bytes: JSON with lexicographically sorted keys and no
/// insignificant whitespace.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    // serde_json::Map is a BTreeMap without the preserve_order feature, so
    // routing through Value sorts every object's keys.
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    serde_json::to_vec(&v).expect("JSON value serializes")
}

pub fn hash_canonical<T: Serialize + ?Sized>(value: &T) -> MessageDigest {
    hash(&canonical_json(value))
}

/// 128-bit single-use token, serialized as 32 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce(pub [u8; 16]);

impl Nonce {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", self.to_hex())
    }
}

impl FromStr for Nonce {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(CryptoError::Malformed("nonce"));
        }
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out).map_err(|_| CryptoError::Malformed("nonce"))?;
        Ok(Nonce(out))
    }
}

impl Serialize for Nonce {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Nonce {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Draws a nonce from the operating system CSPRNG. Entropy failure panics.
pub fn fresh_nonce() -> Nonce {
    let mut out = [0u8; 16];
    OsRng.fill_bytes(&mut out);
    Nonce(out)
}

macro_rules! b64_bytes {
    ($name:ident, $what:literal) => {
        impl $name {
            pub fn to_base64(&self) -> String {
                B64.encode(&self.0)
            }

            pub fn from_base64(s: &str) -> Result<Self, CryptoError> {
                let bytes = B64.decode(s).map_err(|_| CryptoError::Malformed($what))?;
                Self::try_from(bytes.as_slice())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_base64())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                let v = Self::from_base64(&s).map_err(serde::de::Error::custom)?;
                // reject non-canonical base64 spellings
                if v.to_base64() != s {
                    return Err(serde::de::Error::custom(concat!("non-canonical ", $what)));
                }
                Ok(v)
            }
        }
    };
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey(pub [u8; 64]);

#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey(pub [u8; 64]);

/// Signature bytes as received; any length is representable so that a
/// malformed signature verifies as `false` rather than failing to parse.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(pub Vec<u8>);

impl TryFrom<&[u8]> for PublicKey {
    type Error = CryptoError;
    fn try_from(b: &[u8]) -> Result<Self, CryptoError> {
        Ok(PublicKey(b.try_into().map_err(|_| CryptoError::Malformed("public key"))?))
    }
}

impl TryFrom<&[u8]> for PrivateKey {
    type Error = CryptoError;
    fn try_from(b: &[u8]) -> Result<Self, CryptoError> {
        Ok(PrivateKey(b.try_into().map_err(|_| CryptoError::Malformed("private key"))?))
    }
}

impl TryFrom<&[u8]> for Signature {
    type Error = CryptoError;
    fn try_from(b: &[u8]) -> Result<Self, CryptoError> {
        Ok(Signature(b.to_vec()))
    }
}

b64_bytes!(PublicKey, "public key");
b64_bytes!(PrivateKey, "private key");
b64_bytes!(Signature, "signature");

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..8]))
    }
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({} bytes)", self.0.len())
    }
}

impl PublicKey {
    fn verifying_half(&self) -> Option<VerifyingKey> {
        let bytes: [u8; 32] = self.0[..32].try_into().ok()?;
        VerifyingKey::from_bytes(&bytes).ok()
    }

    fn exchange_half(&self) -> XPublic {
        let bytes: [u8; 32] = self.0[32..].try_into().expect("32-byte half");
        XPublic::from(bytes)
    }
}

impl PrivateKey {
    fn signing_half(&self) -> SigningKey {
        let seed: [u8; 32] = self.0[..32].try_into().expect("32-byte half");
        SigningKey::from_bytes(&seed)
    }

    fn exchange_half(&self) -> StaticSecret {
        let bytes: [u8; 32] = self.0[32..].try_into().expect("32-byte half");
        StaticSecret::from(bytes)
    }

    /// Recomputes the public key belonging to this private key.
    pub fn public_key(&self) -> PublicKey {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(self.signing_half().verifying_key().as_bytes());
        out[32..].copy_from_slice(XPublic::from(&self.exchange_half()).as_bytes());
        PublicKey(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPair {
    pub public_key: PublicKey,
    pub private_key: PrivateKey,
}

impl KeyPair {
    /// Deterministically derives both halves from `seed`.
    pub fn from_seed(seed: &[u8; 32]) -> KeyPair {
        let mut material = Vec::with_capacity(40);
        material.extend_from_slice(b"ed25519:");
        material.extend_from_slice(seed);
        let sign_seed = sha256(&material);
        material.clear();
        material.extend_from_slice(b"x25519::");
        material.extend_from_slice(seed);
        let x_secret = sha256(&material);

        let mut private = [0u8; 64];
        private[..32].copy_from_slice(&sign_seed);
        private[32..].copy_from_slice(&x_secret);
        let private_key = PrivateKey(private);
        KeyPair {
            public_key: private_key.public_key(),
            private_key,
        }
    }

    pub fn generate_with<R: RngCore + CryptoRng>(rng: &mut R) -> KeyPair {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        KeyPair::from_seed(&seed)
    }

    /// True when `public_key` is the public half of `private_key`.
    pub fn is_consistent(&self) -> bool {
        self.private_key.public_key() == self.public_key
    }
}

/// Fresh keypair from the operating system CSPRNG.
pub fn generate_keypair() -> KeyPair {
    KeyPair::generate_with(&mut OsRng)
}

pub fn sign(private_key: &PrivateKey, message: &[u8]) -> Signature {
    Signature(private_key.signing_half().sign(message).to_bytes().to_vec())
}

/// Strict Ed25519 verification; malformed keys or signatures yield `false`.
pub fn verify(public_key: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Some(vk) = public_key.verifying_half() else {
        return false;
    };
    let Ok(sig_bytes) = <[u8; 64]>::try_from(signature.0.as_slice()) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
    vk.verify_strict(message, &sig).is_ok()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedEnvelope {
    /// Ephemeral X25519 public key, IV, and the GCM-wrapped content key.
    pub wrapped_key: Vec<u8>,
    /// IV followed by the GCM ciphertext of the payload.
    pub ciphertext: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvelopeWire {
    wrapped_key: String,
    ciphertext: String,
}

impl Serialize for SealedEnvelope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        EnvelopeWire {
            wrapped_key: B64.encode(&self.wrapped_key),
            ciphertext: B64.encode(&self.ciphertext),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SealedEnvelope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = EnvelopeWire::deserialize(d)?;
        let wrapped_key = B64.decode(&w.wrapped_key).map_err(serde::de::Error::custom)?;
        let ciphertext = B64.decode(&w.ciphertext).map_err(serde::de::Error::custom)?;
        Ok(SealedEnvelope { wrapped_key, ciphertext })
    }
}

fn key_encryption_key(shared: &[u8; 32], eph: &[u8; 32], recipient: &[u8; 32]) -> [u8; 32] {
    let mut info = Vec::with_capacity(SEAL_INFO.len() + 64);
    info.extend_from_slice(SEAL_INFO);
    info.extend_from_slice(eph);
    info.extend_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(None, shared);
    let mut okm = [0u8; 32];
    hk.expand(&info, &mut okm).expect("32 bytes is a valid HKDF length");
    okm
}

pub fn seal(public_key: &PublicKey, payload: &[u8]) -> Result<SealedEnvelope, CryptoError> {
    seal_with(&mut OsRng, public_key, payload, MAX_SEAL_PAYLOAD)
}

pub fn seal_with<R: RngCore + CryptoRng>(
    rng: &mut R,
    public_key: &PublicKey,
    payload: &[u8],
    limit: usize,
) -> Result<SealedEnvelope, CryptoError> {
    if payload.len() > limit {
        return Err(CryptoError::PayloadTooLarge { size: payload.len(), limit });
    }
    let recipient = public_key.exchange_half();
    let ephemeral = StaticSecret::random_from_rng(&mut *rng);
    let eph_pub = XPublic::from(&ephemeral);
    let shared = ephemeral.diffie_hellman(&recipient);
    if !shared.was_contributory() {
        return Err(CryptoError::WeakKey);
    }
    let kek = key_encryption_key(shared.as_bytes(), eph_pub.as_bytes(), recipient.as_bytes());

    let mut content_key = [0u8; CONTENT_KEY_LEN];
    rng.fill_bytes(&mut content_key);
    let mut iv_wrap = [0u8; GCM_IV_LEN];
    rng.fill_bytes(&mut iv_wrap);
    let mut iv_body = [0u8; GCM_IV_LEN];
    rng.fill_bytes(&mut iv_body);

    let wrapped = Aes256Gcm::new(&kek.into())
        .encrypt(
            GcmNonce::from_slice(&iv_wrap),
            Payload { msg: &content_key, aad: eph_pub.as_bytes() },
        )
        .map_err(|_| CryptoError::Decryption)?;
    let mut wrapped_key = Vec::with_capacity(WRAPPED_KEY_LEN);
    wrapped_key.extend_from_slice(eph_pub.as_bytes());
    wrapped_key.extend_from_slice(&iv_wrap);
    wrapped_key.extend_from_slice(&wrapped);

    let body = Aes256Gcm::new(&content_key.into())
        .encrypt(GcmNonce::from_slice(&iv_body), Payload { msg: payload, aad: &wrapped_key })
        .map_err(|_| CryptoError::Decryption)?;
    let mut ciphertext = Vec::with_capacity(GCM_IV_LEN + body.len());
    ciphertext.extend_from_slice(&iv_body);
    ciphertext.extend_from_slice(&body);

    Ok(SealedEnvelope { wrapped_key, ciphertext })
}

pub fn open(private_key: &PrivateKey, envelope: &SealedEnvelope) -> Result<Vec<u8>, CryptoError> {
    if envelope.wrapped_key.len() != WRAPPED_KEY_LEN {
        return Err(CryptoError::Malformed("wrapped key"));
    }
    if envelope.ciphertext.len() < GCM_IV_LEN + GCM_TAG_LEN {
        return Err(CryptoError::Malformed("ciphertext"));
    }
    let eph: [u8; 32] = envelope.wrapped_key[..32].try_into().expect("checked length");
    let iv_wrap = &envelope.wrapped_key[32..32 + GCM_IV_LEN];
    let wrapped = &envelope.wrapped_key[32 + GCM_IV_LEN..];

    let secret = private_key.exchange_half();
    let own_pub = XPublic::from(&secret);
    let shared = secret.diffie_hellman(&XPublic::from(eph));
    if !shared.was_contributory() {
        return Err(CryptoError::WeakKey);
    }
    let kek = key_encryption_key(shared.as_bytes(), &eph, own_pub.as_bytes());
    let content_key = Aes256Gcm::new(&kek.into())
        .decrypt(GcmNonce::from_slice(iv_wrap), Payload { msg: wrapped, aad: &eph })
        .map_err(|_| CryptoError::Decryption)?;
    let content_key: [u8; CONTENT_KEY_LEN] =
        content_key.as_slice().try_into().map_err(|_| CryptoError::Decryption)?;

    let (iv_body, body) = envelope.ciphertext.split_at(GCM_IV_LEN);
    Aes256Gcm::new(&content_key.into())
        .decrypt(
            GcmNonce::from_slice(iv_body),
            Payload { msg: body, aad: &envelope.wrapped_key },
        )
        .map_err(|_| CryptoError::Decryption)
}
