//! The dApp: bridges clients to the NLU engine and the network.
//!
//! Registration and login arrive sealed to the gateway key. Login and chat
//! are signed by the user's key. Every reply is signed by the gateway and
//! echoes the request nonce.

pub mod protocol;
pub mod state;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaincode::{account_key, balance_key, AccountNumber, BalData, Request, Status, TransferData};
use crate::crypto::{canonical_json, fresh_nonce, hash_canonical, open, KeyPair, MessageDigest, PublicKey, SealedEnvelope};
use crate::ledger::{Ledger, LedgerTransaction};
use crate::network::live::LiveNetwork;
use crate::network::{Certificate, Identity, Msp, NetworkConfig, NetworkCore, NetworkError, Role, TransactionResult};
use crate::nlu::{
    load_datasets, EntitySet, Intent, NluCredential, NluEngine, NluError, NluRequest, NluService, PatternTables,
};

pub use protocol::{
    client, ChatOutcome, ChatPayload, ChatReply, ClientError, LoginGrant, MessageKind, ProtocolMessage,
    RegistrationResponse, SealedBody,
};
pub use state::{Clock, ManualClock, NonceLedger, Session, SessionError, SessionTable, SystemClock};

pub const GATEWAY_IDENTITY: &str = "gateway";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub network: NetworkConfig,
    pub nonce_ttl_ms: u64,
    pub session_idle_ms: u64,
    /// Accepted distance between a message's `issued_at` and the gateway clock
    /// for messages from the future. Past messages are accepted for one nonce TTL.
    pub max_clock_skew_ms: u64,
    /// Hex-encoded 256-bit NLU secret; generated per process when absent.
    pub nlu_secret: Option<String>,
    pub user_dataset: Option<PathBuf>,
    pub bot_dataset: Option<PathBuf>,
    pub ledger_path: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            network: NetworkConfig::default(),
            nonce_ttl_ms: 10 * 60 * 1000,
            session_idle_ms: 30 * 60 * 1000,
            max_clock_skew_ms: 2 * 60 * 1000,
            nlu_secret: None,
            user_dataset: None,
            bot_dataset: None,
            ledger_path: None,
        }
    }
}

impl GatewayConfig {
    pub fn from_json(text: &str) -> Result<GatewayConfig, GatewayError> {
        let cfg: GatewayConfig = serde_json::from_str(text).map_err(|e| GatewayError::Config(e.to_string()))?;
        cfg.network.validate().map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GatewayConfig, GatewayError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        GatewayConfig::from_json(&text)
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("message is outside the freshness window")]
    Stale,
    #[error("nonce already used")]
    Replay,
    #[error("registration rejected: {0}")]
    RegistrationRejected(String),
    #[error("authentication failed")]
    AuthenticationFailed,
    #[error("session is invalid or expired; log in again")]
    ReloginRequired,
    #[error("signature rejected")]
    BadSignature,
    #[error("access to another user's data is forbidden")]
    Forbidden,
    #[error("{0} not found")]
    NotFound(String),
    #[error("language service unavailable")]
    NluUnavailable,
    #[error(transparent)]
    Parsing(#[from] ParseError),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Protocol(_) => "PROTOCOL_ERROR",
            GatewayError::Stale => "STALE_MESSAGE",
            GatewayError::Replay => "REPLAY_REJECTED",
            GatewayError::RegistrationRejected(_) => "REGISTRATION_REJECTED",
            GatewayError::AuthenticationFailed => "AUTHENTICATION_FAILED",
            GatewayError::ReloginRequired => "RELOGIN_REQUIRED",
            GatewayError::BadSignature => "SIGNATURE_REJECTED",
            GatewayError::Forbidden => "FORBIDDEN",
            GatewayError::NotFound(_) => "NOT_FOUND",
            GatewayError::NluUnavailable => "SERVICE_UNAVAILABLE",
            GatewayError::Parsing(_) => "UNMAPPABLE_REQUEST",
            GatewayError::Rejected(_) => "REQUEST_REJECTED",
            GatewayError::Config(_) | GatewayError::Internal(_) => "INTERNAL",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            GatewayError::Protocol(_) | GatewayError::Stale | GatewayError::Rejected(_) => 400,
            GatewayError::AuthenticationFailed | GatewayError::ReloginRequired | GatewayError::BadSignature => 401,
            GatewayError::Forbidden => 403,
            GatewayError::NotFound(_) => 404,
            GatewayError::Replay | GatewayError::RegistrationRejected(_) => 409,
            GatewayError::Parsing(_) => 422,
            GatewayError::NluUnavailable => 503,
            GatewayError::Config(_) | GatewayError::Internal(_) => 500,
        }
    }
}

impl From<NetworkError> for GatewayError {
    fn from(e: NetworkError) -> Self {
        match e {
            e @ (NetworkError::EndorsementFailed(_) | NetworkError::NotOwner { .. }) => {
                GatewayError::Rejected(e.to_string())
            }
            other => GatewayError::Internal(other.to_string()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("entity set is incomplete")]
    Incomplete,
    #[error("intent {0} does not map to a request")]
    Unmappable(Intent),
}

/// Maps a complete entity set to the request it stands for. The debited and
/// queried account is always the session user's own.
pub fn parsing(entity_set: &EntitySet, session: &Session) -> Result<Request, ParseError> {
    if !entity_set.complete {
        return Err(ParseError::Incomplete);
    }
    match entity_set.intent {
        Intent::Transfer => {
            let (Some(to_acc), Some(amount)) = (entity_set.account_number(), entity_set.amount()) else {
                return Err(ParseError::Incomplete);
            };
            Ok(Request::Transfer(TransferData {
                user_name: session.user_name.clone(),
                from_acc: session.account.clone(),
                to_acc,
                amount,
            }))
        }
        Intent::BalQuery => Ok(Request::BalQuery(BalData {
            user_name: session.user_name.clone(),
            account_num: session.account.clone(),
        })),
        other => Err(ParseError::Unmappable(other)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub height: u64,
    pub balance: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryView {
    #[serde(rename = "userName")]
    pub user_name: String,
    #[serde(rename = "accountNum")]
    pub account_num: AccountNumber,
    pub entries: Vec<HistoryEntry>,
}

/// Block metadata with only the session user's own transactions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockView {
    pub height: u64,
    pub block_hash: MessageDigest,
    pub prev_hash: MessageDigest,
    pub tx_count: usize,
    pub transactions: Vec<LedgerTransaction>,
}

#[derive(Serialize, Deserialize)]
struct IdentityFile {
    root: KeyPair,
    gateway: Identity,
    users: Vec<Certificate>,
}

fn sidecar_path(ledger: &Path) -> PathBuf {
    let mut s = ledger.as_os_str().to_owned();
    s.push(".identities.json");
    PathBuf::from(s)
}

pub struct Dapp {
    net: LiveNetwork,
    identity: Identity,
    nlu: NluService,
    nlu_secret: NluCredential,
    nonces: NonceLedger,
    sessions: Arc<SessionTable>,
    clock: Arc<dyn Clock>,
    skew_ms: u64,
    sidecar: Option<PathBuf>,
    persist: Mutex<()>,
}

impl Dapp {
    /// Builds the gateway, its network and NLU engine from `cfg`.
    pub fn open(cfg: &GatewayConfig, clock: Arc<dyn Clock>) -> Result<Dapp, GatewayError> {
        let secret = match &cfg.nlu_secret {
            Some(s) => s.parse().map_err(|_| GatewayError::Config("nlu_secret must be 64 hex characters".into()))?,
            None => NluCredential::generate(),
        };
        let tables = match (&cfg.user_dataset, &cfg.bot_dataset) {
            (None, None) => PatternTables::shipped(),
            (Some(u), Some(b)) => load_datasets(u, b).map_err(|e| GatewayError::Config(e.to_string()))?,
            _ => return Err(GatewayError::Config("user_dataset and bot_dataset go together".into())),
        };
        Dapp::open_with_engine(cfg, clock, secret.clone(), NluEngine::new(tables, secret))
    }

    /// Like [`Dapp::open`] with an explicit engine; `nlu_secret` is what the
    /// gateway presents to it.
    pub fn open_with_engine(
        cfg: &GatewayConfig,
        clock: Arc<dyn Clock>,
        nlu_secret: NluCredential,
        engine: NluEngine,
    ) -> Result<Dapp, GatewayError> {
        let io = |e: std::io::Error| GatewayError::Internal(e.to_string());
        let (ledger, sidecar) = match &cfg.ledger_path {
            Some(p) => (Ledger::open(p).map_err(|e| GatewayError::Internal(e.to_string()))?, Some(sidecar_path(p))),
            None => (Ledger::new(), None),
        };
        let saved: Option<IdentityFile> = match &sidecar {
            Some(p) if p.exists() => {
                let text = std::fs::read_to_string(p).map_err(io)?;
                Some(serde_json::from_str(&text).map_err(|e| GatewayError::Internal(format!("{}: {e}", p.display())))?)
            }
            _ => None,
        };
        let msp = match &saved {
            Some(f) => Msp::with_root(f.root.clone()),
            None => Msp::new(),
        };
        let mut core = NetworkCore::new(cfg.network.clone(), msp, ledger)?;
        let identity = match saved {
            Some(f) => {
                for cert in std::iter::once(f.gateway.certificate.clone()).chain(f.users) {
                    if !core.msp_mut().admit(cert) {
                        return Err(GatewayError::Internal("stored certificate does not verify".into()));
                    }
                }
                f.gateway
            }
            None => core.register_identity(GATEWAY_IDENTITY, Role::Gateway)?,
        };
        let sessions = Arc::new(SessionTable::new(cfg.session_idle_ms));
        let lookup = Arc::clone(&sessions);
        let dapp = Dapp {
            net: LiveNetwork::start(core),
            identity,
            nlu: NluService::new(engine, move |sid| lookup.account_of(sid)),
            nlu_secret,
            nonces: NonceLedger::new(cfg.nonce_ttl_ms),
            sessions,
            clock,
            skew_ms: cfg.max_clock_skew_ms,
            sidecar,
            persist: Mutex::new(()),
        };
        dapp.persist_identities()?;
        Ok(dapp)
    }

    fn persist_identities(&self) -> Result<(), GatewayError> {
        let Some(path) = &self.sidecar else { return Ok(()) };
        let _guard = self.persist.lock().expect("persist lock");
        let file = {
            let core = self.net.core();
            let mut users: Vec<Certificate> =
                core.msp().certificates().filter(|c| c.role == Role::User).cloned().collect();
            users.sort_by(|a, b| a.name.cmp(&b.name));
            IdentityFile { root: core.msp().root_keypair().clone(), gateway: self.identity.clone(), users }
        };
        let tmp = path.with_extension("tmp");
        let io = |e: std::io::Error| GatewayError::Internal(e.to_string());
        std::fs::write(&tmp, serde_json::to_vec_pretty(&file).expect("identities serialize")).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn network(&self) -> &LiveNetwork {
        &self.net
    }

    pub fn gateway_public_key(&self) -> &PublicKey {
        &self.identity.keypair.public_key
    }

    pub fn gateway_certificate(&self) -> &Certificate {
        &self.identity.certificate
    }

    pub fn sessions(&self) -> &SessionTable {
        &self.sessions
    }

    pub fn nonces(&self) -> &NonceLedger {
        &self.nonces
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Drops expired nonces and sessions.
    pub fn sweep(&self) {
        let now = self.now_ms();
        self.nonces.sweep(now);
        for id in self.sessions.sweep(now) {
            self.nlu.end_session(&id);
        }
    }

    fn check_fresh(&self, issued_at: u64, now: u64) -> Result<(), GatewayError> {
        if issued_at > now.saturating_add(self.skew_ms) || now.saturating_sub(issued_at) >= self.nonces.ttl_ms() {
            return Err(GatewayError::Stale);
        }
        Ok(())
    }

    fn reply(&self, kind: MessageKind, request: &ProtocolMessage, payload: impl Serialize) -> ProtocolMessage {
        let mut msg = ProtocolMessage::new(kind, request.nonce, serde_json::to_value(payload).expect("payload serializes"));
        msg.session_id = request.session_id.clone();
        msg
    }

    fn sign(&self, msg: ProtocolMessage) -> ProtocolMessage {
        msg.signed(&self.identity.keypair.private_key)
    }

    /// Opens a sealed M1/LOGIN message and checks nonce binding and
    /// freshness. The nonce is not claimed here.
    fn open_sealed(&self, msg: &ProtocolMessage, kind: MessageKind) -> Result<Request, GatewayError> {
        if msg.kind != kind {
            return Err(GatewayError::Protocol(format!("expected {kind:?}, got {:?}", msg.kind)));
        }
        let env: SealedEnvelope = serde_json::from_value(msg.payload.clone())
            .map_err(|e| GatewayError::Protocol(format!("payload is not a sealed envelope: {e}")))?;
        let plain = open(&self.identity.keypair.private_key, &env)
            .map_err(|_| GatewayError::Protocol("envelope does not open under the gateway key".into()))?;
        let body: SealedBody = serde_json::from_slice(&plain)
            .map_err(|e| GatewayError::Protocol(format!("sealed body: {e}")))?;
        if canonical_json(&body) != plain {
            return Err(GatewayError::Protocol("sealed body is not canonical".into()));
        }
        if body.nonce != msg.nonce {
            return Err(GatewayError::Protocol("nonce does not match the sealed nonce".into()));
        }
        self.check_fresh(body.issued_at, self.now_ms())?;
        Ok(body.request)
    }

    /// Claimed only after every other check so a tampered copy cannot burn
    /// the nonce of the genuine message.
    fn claim(&self, msg: &ProtocolMessage) -> Result<(), GatewayError> {
        if self.nonces.claim(msg.nonce, self.now_ms()) {
            Ok(())
        } else {
            Err(GatewayError::Replay)
        }
    }

    /// M2/M3: hands the request to the chaincode under a fresh correlation
    /// nonce and checks it comes back.
    fn invoke(&self, cert: &Certificate, request: Request) -> Result<TransactionResult, GatewayError> {
        let n2 = fresh_nonce();
        let result = self.net.submit_transaction(cert, request, Some(n2))?;
        if result.correlation != Some(n2) {
            return Err(GatewayError::Protocol("chaincode reply does not echo N_2".into()));
        }
        Ok(result)
    }

    /// M1 → M4.
    pub fn handle_register(&self, m1: &ProtocolMessage) -> Result<ProtocolMessage, GatewayError> {
        let request = self.open_sealed(m1, MessageKind::M1)?;
        let Request::Registration(data) = &request else {
            return Err(GatewayError::Protocol(format!("M1 carries a {} request", request.type_name())));
        };
        self.claim(m1)?;
        let user_name = data.user_name.clone();
        let result = self.invoke(&self.identity.certificate, request)?;
        let resp = result.response.ok_or_else(|| GatewayError::Internal("registration was not endorsed".into()))?;
        match resp.status {
            Status::True => {}
            Status::Error(_) => {
                return Err(GatewayError::RegistrationRejected(resp.detail.unwrap_or_else(|| resp.status.to_string())))
            }
            other => return Err(GatewayError::RegistrationRejected(other.to_string())),
        }
        let user = self.net.register_identity(&user_name, Role::User)?;
        self.persist_identities()?;
        let resp_prime = RegistrationResponse {
            resp,
            public_key: user.keypair.public_key,
            private_key: user.keypair.private_key,
        };
        let mut m4 = self.reply(MessageKind::M4, m1, &resp_prime);
        m4.digest = Some(hash_canonical(&resp_prime));
        Ok(self.sign(m4))
    }

    pub fn handle_login(&self, msg: &ProtocolMessage) -> Result<ProtocolMessage, GatewayError> {
        let request = self.open_sealed(msg, MessageKind::Login)?;
        let Request::Login(data) = &request else {
            return Err(GatewayError::Protocol(format!("LOGIN carries a {} request", request.type_name())));
        };
        let user_name = data.user_name.clone();
        let cert = self.net.core().msp().certificate(&user_name, Role::User).cloned();
        let Some(cert) = cert else {
            return Err(GatewayError::AuthenticationFailed);
        };
        if !msg.verify_signature(&cert.public_key) {
            return Err(GatewayError::BadSignature);
        }
        self.claim(msg)?;
        let result = self.invoke(&self.identity.certificate, request)?;
        if result.response.map(|r| r.status) != Some(Status::True) {
            return Err(GatewayError::AuthenticationFailed);
        }
        let account = self.net.get_state(&account_key(&user_name)).and_then(|a| a.parse().ok());
        let Some(account) = account else {
            return Err(GatewayError::AuthenticationFailed);
        };
        let session = self.sessions.create(cert, account, self.now_ms());
        let grant = LoginGrant {
            session_id: session.session_id.clone(),
            user_name,
            account_num: session.account,
            expires_at: session.expires_at,
        };
        Ok(self.sign(self.reply(MessageKind::LoginResp, msg, &grant)))
    }

    /// One signed chat turn. Balance queries run at once; transfers run only
    /// on the turn that confirms them.
    pub fn handle_chat(&self, msg: &ProtocolMessage) -> Result<ProtocolMessage, GatewayError> {
        if msg.kind != MessageKind::Chat {
            return Err(GatewayError::Protocol(format!("expected CHAT, got {:?}", msg.kind)));
        }
        let sid = msg.session_id.as_deref().ok_or(GatewayError::ReloginRequired)?;
        let now = self.now_ms();
        let slot = self.sessions.get(sid, now).map_err(|_| GatewayError::ReloginRequired)?;
        let _turn = slot.turn();
        let session = slot.snapshot();
        if !msg.verify_signature(&session.public_key) {
            return Err(GatewayError::BadSignature);
        }
        let payload: ChatPayload = serde_json::from_value(msg.payload.clone())
            .map_err(|e| GatewayError::Protocol(format!("chat payload: {e}")))?;
        self.check_fresh(payload.issued_at, now)?;
        self.claim(msg)?;
        self.sessions.touch(&slot, now);

        let nlu = self
            .nlu
            .handle(&NluRequest {
                session_id: sid.to_owned(),
                utterance: payload.utterance,
                secret_key: self.nlu_secret.to_hex(),
            })
            .map_err(|e| match e {
                NluError::EmptyUtterance => GatewayError::Protocol(e.to_string()),
                _ => GatewayError::NluUnavailable,
            })?;
        let set = nlu.entity_set();
        let mut reply = ChatReply {
            intent: nlu.intent,
            entities: nlu.entities,
            complete: nlu.complete,
            bot_text: nlu.bot_text,
            outcome: None,
        };
        let actionable = set.complete
            && match set.intent {
                Intent::BalQuery => true,
                Intent::Transfer => set.is_affirmed(),
                _ => false,
            };
        if actionable {
            let request = parsing(&set, &session)?;
            match self.invoke(&session.certificate, request) {
                Ok(r) => {
                    let response = r.response.ok_or_else(|| GatewayError::Internal("transaction was not endorsed".into()))?;
                    reply.bot_text = response.status.to_string();
                    reply.outcome = Some(ChatOutcome { response, tx_id: r.tx_id, block_height: r.block_height, valid: r.valid });
                }
                Err(GatewayError::Rejected(reason)) => reply.bot_text = format!("REQUEST REJECTED: {reason}"),
                Err(e) => return Err(e),
            }
        }
        Ok(self.sign(self.reply(MessageKind::ChatResp, msg, &reply)))
    }

    fn session(&self, session_id: &str) -> Result<Session, GatewayError> {
        let now = self.now_ms();
        let slot = self.sessions.get(session_id, now).map_err(|_| GatewayError::ReloginRequired)?;
        self.sessions.touch(&slot, now);
        Ok(slot.snapshot())
    }

    /// Balance history of the session user's account. Naming any other
    /// account is forbidden.
    pub fn explorer_history(&self, session_id: &str, account: Option<&str>) -> Result<HistoryView, GatewayError> {
        let session = self.session(session_id)?;
        if account.is_some_and(|a| a != session.account.as_str()) {
            return Err(GatewayError::Forbidden);
        }
        let entries = self
            .net
            .read_history(&balance_key(&session.account))
            .into_iter()
            .map(|(height, balance)| HistoryEntry { height, balance })
            .collect();
        Ok(HistoryView { user_name: session.user_name, account_num: session.account, entries })
    }

    pub fn explorer_block(&self, session_id: &str, height: u64) -> Result<BlockView, GatewayError> {
        let session = self.session(session_id)?;
        let block = self.net.block(height).ok_or_else(|| GatewayError::NotFound(format!("block {height}")))?;
        let tx_count = block.tx_list.len();
        let transactions = block
            .tx_list
            .into_iter()
            .filter(|tx| tx.request.user_name() == session.user_name)
            .collect();
        Ok(BlockView { height: block.height, block_hash: block.block_hash, prev_hash: block.prev_hash, tx_count, transactions })
    }

    /// The NLU service endpoint, for callers that talk to it directly.
    pub fn nlu(&self) -> &NluService {
        &self.nlu
    }

    pub fn shutdown(&self) {
        self.net.shutdown();
    }
}
