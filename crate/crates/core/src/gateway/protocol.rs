//! Wire messages exchanged between clients and the gateway, plus the
//! client-side builders and checks used by scripted clients and tests.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::chaincode::{AccountNumber, Credentials, Request, Response};
use crate::crypto::{
    canonical_json, fresh_nonce, hash, hash_canonical, seal, sign, verify, CryptoError, KeyPair, MessageDigest,
    Nonce, PrivateKey, PublicKey, SealedEnvelope, Signature,
};
use crate::nlu::{Entity, Intent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    M1,
    M2,
    M3,
    M4,
    #[serde(rename = "LOGIN")]
    Login,
    #[serde(rename = "LOGIN_RESP")]
    LoginResp,
    #[serde(rename = "CHAT")]
    Chat,
    #[serde(rename = "CHAT_RESP")]
    ChatResp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolMessage {
    pub kind: MessageKind,
    pub nonce: Nonce,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<Signature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<MessageDigest>,
}

impl ProtocolMessage {
    pub fn new(kind: MessageKind, nonce: Nonce, payload: Value) -> ProtocolMessage {
        ProtocolMessage { kind, nonce, session_id: None, payload, signature: None, digest: None }
    }

    /// Canonical bytes covered by `signature`: the message without its
    /// signature and digest fields.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let body = ProtocolMessage { signature: None, digest: None, ..self.clone() };
        canonical_json(&body)
    }

    pub fn signed(mut self, key: &PrivateKey) -> ProtocolMessage {
        self.signature = Some(sign(key, &self.signing_bytes()));
        self
    }

    pub fn verify_signature(&self, key: &PublicKey) -> bool {
        self.signature.as_ref().is_some_and(|s| verify(key, &self.signing_bytes(), s))
    }
}

/// Plaintext inside a sealed M1 or LOGIN envelope. The nonce and issue time
/// are sealed with the request so neither can be swapped on a captured
/// envelope.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SealedBody {
    pub nonce: Nonce,
    pub issued_at: u64,
    pub request: Request,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatPayload {
    pub utterance: String,
    pub issued_at: u64,
}

/// `resp'`: the chaincode response with the freshly issued keypair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationResponse {
    pub resp: Response,
    pub public_key: PublicKey,
    pub private_key: PrivateKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoginGrant {
    pub session_id: String,
    #[serde(rename = "userName")]
    pub user_name: String,
    #[serde(rename = "accountNum")]
    pub account_num: AccountNumber,
    pub expires_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatOutcome {
    pub response: Response,
    #[serde(default)]
    pub tx_id: Option<MessageDigest>,
    #[serde(default)]
    pub block_height: Option<u64>,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatReply {
    pub intent: Intent,
    pub entities: Vec<Entity>,
    pub complete: bool,
    pub bot_text: String,
    #[serde(default)]
    pub outcome: Option<ChatOutcome>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ClientError {
    #[error("unexpected message kind {0:?}")]
    Kind(MessageKind),
    #[error("reply does not echo the request nonce")]
    NonceMismatch,
    #[error("gateway signature does not verify")]
    Signature,
    #[error("digest does not match the registration response")]
    Digest,
    #[error("issued keypair is inconsistent")]
    KeyPair,
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

pub mod client {
    //! Helpers a client uses to talk to the gateway.

    use super::*;

    /// The client-side password digest `h`.
    pub fn password_digest(password: &str) -> MessageDigest {
        hash(password.as_bytes())
    }

    fn sealed(kind: MessageKind, gateway_key: &PublicKey, request: Request, now_ms: u64) -> Result<ProtocolMessage, CryptoError> {
        let nonce = fresh_nonce();
        let body = SealedBody { nonce, issued_at: now_ms, request };
        let env = seal(gateway_key, &canonical_json(&body))?;
        Ok(ProtocolMessage::new(kind, nonce, serde_json::to_value(env).expect("envelope serializes")))
    }

    pub fn registration_m1(gateway_key: &PublicKey, user_name: &str, password: &str, now_ms: u64) -> Result<ProtocolMessage, CryptoError> {
        let req = Request::Registration(Credentials { user_name: user_name.to_owned(), h: password_digest(password) });
        sealed(MessageKind::M1, gateway_key, req, now_ms)
    }

    /// Sealed to the gateway and signed with the user's key.
    pub fn login_message(
        gateway_key: &PublicKey,
        user_key: &PrivateKey,
        user_name: &str,
        password: &str,
        now_ms: u64,
    ) -> Result<ProtocolMessage, CryptoError> {
        let req = Request::Login(Credentials { user_name: user_name.to_owned(), h: password_digest(password) });
        Ok(sealed(MessageKind::Login, gateway_key, req, now_ms)?.signed(user_key))
    }

    /// Seals an arbitrary request; used to probe the gateway with the wrong
    /// request type.
    pub fn sealed_request(kind: MessageKind, gateway_key: &PublicKey, request: Request, now_ms: u64) -> Result<ProtocolMessage, CryptoError> {
        sealed(kind, gateway_key, request, now_ms)
    }

    pub fn chat_message(key: &PrivateKey, session_id: &str, utterance: &str, now_ms: u64) -> ProtocolMessage {
        let payload = ChatPayload { utterance: utterance.to_owned(), issued_at: now_ms };
        let mut msg = ProtocolMessage::new(MessageKind::Chat, fresh_nonce(), serde_json::to_value(payload).expect("payload serializes"));
        msg.session_id = Some(session_id.to_owned());
        msg.signed(key)
    }

    /// Checks kind, nonce echo and gateway signature, then decodes the payload.
    pub fn open_reply<T: DeserializeOwned>(
        msg: &ProtocolMessage,
        gateway_key: &PublicKey,
        kind: MessageKind,
        nonce: &Nonce,
    ) -> Result<T, ClientError> {
        if msg.kind != kind {
            return Err(ClientError::Kind(msg.kind));
        }
        if msg.nonce != *nonce {
            return Err(ClientError::NonceMismatch);
        }
        if !msg.verify_signature(gateway_key) {
            return Err(ClientError::Signature);
        }
        serde_json::from_value(msg.payload.clone()).map_err(|e| ClientError::Payload(e.to_string()))
    }

    /// Verifies M4 and returns `resp'` with a keypair that is known to match.
    pub fn verify_m4(m4: &ProtocolMessage, gateway_key: &PublicKey, n1: &Nonce) -> Result<RegistrationResponse, ClientError> {
        let resp: RegistrationResponse = open_reply(m4, gateway_key, MessageKind::M4, n1)?;
        if m4.digest != Some(hash_canonical(&resp)) {
            return Err(ClientError::Digest);
        }
        let kp = KeyPair { public_key: resp.public_key, private_key: resp.private_key.clone() };
        if !kp.is_consistent() {
            return Err(ClientError::KeyPair);
        }
        Ok(resp)
    }

    pub fn envelope_of(msg: &ProtocolMessage) -> Result<SealedEnvelope, ClientError> {
        serde_json::from_value(msg.payload.clone()).map_err(|e| ClientError::Payload(e.to_string()))
    }
}
