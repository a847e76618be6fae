//! Membership service: issues identities whose certificates are signed by a
//! root key, and answers whether a presented certificate belongs to the
//! network.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{canonical_json, sign, verify, KeyPair, PublicKey, Signature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Peer,
    Endorser,
    Orderer,
    Gateway,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::Peer => "peer",
            Role::Endorser => "endorser",
            Role::Orderer => "orderer",
            Role::Gateway => "gateway",
        })
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "user" => Role::User,
            "peer" => Role::Peer,
            "endorser" => Role::Endorser,
            "orderer" => Role::Orderer,
            "gateway" => Role::Gateway,
            other => return Err(format!("unknown role {other:?}")),
        })
    }
}

/// Root-signed binding of name, role and public key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub name: String,
    pub role: Role,
    pub public_key: PublicKey,
    pub signature: Signature,
}

#[derive(Serialize)]
struct CertBody<'a> {
    name: &'a str,
    role: Role,
    public_key: &'a PublicKey,
}

impl Certificate {
    fn body_bytes(name: &str, role: Role, public_key: &PublicKey) -> Vec<u8> {
        canonical_json(&CertBody { name, role, public_key })
    }

    pub fn verify(&self, root: &PublicKey) -> bool {
        verify(root, &Certificate::body_bytes(&self.name, self.role, &self.public_key), &self.signature)
    }
}

/// A network participant together with its private key material.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub name: String,
    pub role: Role,
    pub keypair: KeyPair,
    pub certificate: Certificate,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MspError {
    #[error("{role} {name:?} is already registered")]
    AlreadyRegistered { name: String, role: Role },
    #[error("identity names must be non-empty")]
    EmptyName,
}

enum KeySource {
    Os,
    Seeded(Box<ChaCha20Rng>),
}

impl KeySource {
    fn keypair(&mut self) -> KeyPair {
        match self {
            KeySource::Os => KeyPair::generate_with(&mut OsRng),
            KeySource::Seeded(rng) => KeyPair::generate_with(rng.as_mut()),
        }
    }
}

pub struct Msp {
    root: KeyPair,
    keys: KeySource,
    registry: HashMap<(String, Role), Certificate>,
}

impl fmt::Debug for Msp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Msp")
            .field("root", &self.root.public_key)
            .field("identities", &self.registry.len())
            .finish()
    }
}

impl Msp {
    /// MSP drawing keys from the OS CSPRNG.
    pub fn new() -> Msp {
        let mut keys = KeySource::Os;
        Msp { root: keys.keypair(), keys, registry: HashMap::new() }
    }

    /// MSP whose root and issued keys are a pure function of `seed`.
    pub fn seeded(seed: u64) -> Msp {
        let mut keys = KeySource::Seeded(Box::new(ChaCha20Rng::seed_from_u64(seed)));
        Msp { root: keys.keypair(), keys, registry: HashMap::new() }
    }

    /// Restores an MSP from a persisted root key (fresh identities use the OS RNG).
    pub fn with_root(root: KeyPair) -> Msp {
        Msp { root, keys: KeySource::Os, registry: HashMap::new() }
    }

    pub fn root_public_key(&self) -> &PublicKey {
        &self.root.public_key
    }

    pub fn root_keypair(&self) -> &KeyPair {
        &self.root
    }

    pub fn register_identity(&mut self, name: &str, role: Role) -> Result<Identity, MspError> {
        if name.is_empty() {
            return Err(MspError::EmptyName);
        }
        let key = (name.to_owned(), role);
        if self.registry.contains_key(&key) {
            return Err(MspError::AlreadyRegistered { name: name.to_owned(), role });
        }
        let keypair = self.keys.keypair();
        let certificate = self.issue(name, role, keypair.public_key);
        self.registry.insert(key, certificate.clone());
        Ok(Identity { name: name.to_owned(), role, keypair, certificate })
    }

    fn issue(&self, name: &str, role: Role, public_key: PublicKey) -> Certificate {
        let signature = sign(&self.root.private_key, &Certificate::body_bytes(name, role, &public_key));
        Certificate { name: name.to_owned(), role, public_key, signature }
    }

    /// Re-admits a previously issued certificate (e.g. after a restart).
    pub fn admit(&mut self, cert: Certificate) -> bool {
        if !cert.verify(&self.root.public_key) {
            return false;
        }
        self.registry.insert((cert.name.clone(), cert.role), cert);
        true
    }

    pub fn certificate(&self, name: &str, role: Role) -> Option<&Certificate> {
        self.registry.get(&(name.to_owned(), role))
    }

    /// The certificate verifies under the root and is the one on record.
    pub fn validate(&self, cert: &Certificate) -> bool {
        cert.verify(&self.root.public_key)
            && self.registry.get(&(cert.name.clone(), cert.role)) == Some(cert)
    }

    pub fn certificates(&self) -> impl Iterator<Item = &Certificate> {
        self.registry.values()
    }
}

impl Default for Msp {
    fn default() -> Self {
        Msp::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_issues_verifiable_certificate() {
        let mut msp = Msp::new();
        let peer = msp.register_identity("org1-peer0", Role::Peer).unwrap();
        assert!(peer.certificate.verify(msp.root_public_key()));
        assert!(msp.validate(&peer.certificate));
        assert_eq!(peer.certificate.public_key, peer.keypair.public_key);
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut msp = Msp::new();
        msp.register_identity("org1-peer0", Role::Peer).unwrap();
        assert_eq!(
            msp.register_identity("org1-peer0", Role::Peer),
            Err(MspError::AlreadyRegistered { name: "org1-peer0".into(), role: Role::Peer })
        );
        // same name under another role is a distinct identity
        assert!(msp.register_identity("org1-peer0", Role::Endorser).is_ok());
    }

    #[test]
    fn wrong_root_or_forged_cert_fails() {
        let mut msp = Msp::new();
        let other = Msp::new();
        let peer = msp.register_identity("org1-peer0", Role::Peer).unwrap();
        assert!(!peer.certificate.verify(other.root_public_key()));

        let mut forged = peer.certificate.clone();
        forged.role = Role::Gateway;
        assert!(!msp.validate(&forged));

        let rogue = Msp::new().register_identity_detached("mallory");
        assert!(!msp.validate(&rogue));
    }

    #[test]
    fn seeded_msp_is_deterministic() {
        let mut a = Msp::seeded(7);
        let mut b = Msp::seeded(7);
        assert_eq!(a.root_public_key(), b.root_public_key());
        assert_eq!(
            a.register_identity("x", Role::User).unwrap(),
            b.register_identity("x", Role::User).unwrap()
        );
    }

    impl Msp {
        fn register_identity_detached(mut self, name: &str) -> Certificate {
            self.register_identity(name, Role::User).unwrap().certificate
        }
    }
}
