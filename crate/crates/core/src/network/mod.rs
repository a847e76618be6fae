//! In-process model of the permissioned network: organizations with peers
//! and endorsers, an ordering service and an MSP, driving transactions
//! through endorse → order → commit.
//!
//! Two drivers share [`NetworkCore`]: [`sim::Simulator`] runs on a virtual
//! clock for benchmarks, [`live::LiveNetwork`] runs on the wall clock for the
//! interactive gateway.

pub mod live;
pub mod msp;
pub mod sim;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::chaincode::{Request, Response};
use crate::crypto::{sign, verify, MessageDigest, Nonce, PublicKey};
use crate::ledger::{
    simulate, EndorsedTransaction, Endorsement, EndorsementPolicy, Ledger, LedgerError,
};

pub use msp::{Certificate, Identity, Msp, MspError, Role};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("certificate of {0:?} is not valid for this network")]
    Unauthorized(String),
    #[error("{submitter:?} may not act for user {user:?}")]
    NotOwner { submitter: String, user: String },
    #[error("endorsement failed: {0}")]
    EndorsementFailed(String),
    #[error("request type {0} is not read-only")]
    NotReadOnly(&'static str),
    #[error("unknown topology {0:?} (expected 2O2P, 2O4P or 2O6P)")]
    UnknownTopology(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("ordering service stopped")]
    Stopped,
    #[error(transparent)]
    Msp(#[from] MspError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Topology {
    pub orderer_count: u32,
    pub peers_per_org: u32,
    pub endorsers_per_org: u32,
    pub org_count: u32,
}

impl Topology {
    pub const PRESETS: [&'static str; 3] = ["2O2P", "2O4P", "2O6P"];

    /// Two orderers and `total_peers` peers split over two organizations,
    /// each organization running two endorsers.
    pub fn preset(name: &str) -> Result<Topology, NetworkError> {
        let total_peers = match name {
            "2O2P" => 2,
            "2O4P" => 4,
            "2O6P" => 6,
            other => return Err(NetworkError::UnknownTopology(other.to_owned())),
        };
        Ok(Topology { orderer_count: 2, peers_per_org: total_peers / 2, endorsers_per_org: 2, org_count: 2 })
    }

    pub fn total_peers(&self) -> u32 {
        self.peers_per_org * self.org_count
    }

    pub fn total_endorsers(&self) -> u32 {
        self.endorsers_per_org * self.org_count
    }

    /// Preset name when this topology is one of the presets.
    pub fn preset_name(&self) -> Option<&'static str> {
        Topology::PRESETS.into_iter().find(|n| Topology::preset(n).ok().as_ref() == Some(self))
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.orderer_count == 0 || self.peers_per_org == 0 || self.endorsers_per_org == 0 || self.org_count == 0 {
            return Err(NetworkError::Config("topology counts must be positive".into()));
        }
        Ok(())
    }
}

impl Default for Topology {
    fn default() -> Self {
        Topology::preset("2O2P").expect("preset exists")
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset_name() {
            Some(n) => f.write_str(n),
            None => write!(
                f,
                "{}O{}P/{}E/{}org",
                self.orderer_count,
                self.total_peers(),
                self.total_endorsers(),
                self.org_count
            ),
        }
    }
}

impl FromStr for Topology {
    type Err = NetworkError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topology::preset(s)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFields {
    orderer_count: u32,
    peers_per_org: u32,
    endorsers_per_org: u32,
    #[serde(default = "two")]
    org_count: u32,
}

fn two() -> u32 {
    2
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TopologyWire {
    Preset(String),
    Explicit(TopologyFields),
}

impl Serialize for Topology {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.preset_name() {
            Some(n) => s.serialize_str(n),
            None => TopologyFields {
                orderer_count: self.orderer_count,
                peers_per_org: self.peers_per_org,
                endorsers_per_org: self.endorsers_per_org,
                org_count: self.org_count,
            }
            .serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Topology {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let t = match TopologyWire::deserialize(d)? {
            TopologyWire::Preset(name) => Topology::preset(&name).map_err(serde::de::Error::custom)?,
            TopologyWire::Explicit(f) => Topology {
                orderer_count: f.orderer_count,
                peers_per_org: f.peers_per_org,
                endorsers_per_org: f.endorsers_per_org,
                org_count: f.org_count,
            },
        };
        t.validate().map_err(serde::de::Error::custom)?;
        Ok(t)
    }
}

/// Service times of the simulated entities, in milliseconds.
///
/// The defaults are the shipped calibration profile: with the default batch
/// policy they put the 2O2P create/transfer/query cells of the benchmark in
/// the neighbourhood of the published measurements while preserving their
/// trends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyProfile {
    /// Endorsement round trip (all endorsers work in parallel).
    pub endorse_ms: f64,
    /// Fixed cost of ordering one batch.
    pub order_base_ms: f64,
    /// Ordering cost per transaction in the batch.
    pub order_per_tx_ms: f64,
    /// Block dissemination cost per peer in the network.
    pub disseminate_per_peer_ms: f64,
    /// Validation and state update once a block reaches the peers.
    pub commit_ms: f64,
    /// Local chaincode query at a peer.
    pub read_ms: f64,
    /// Extra read service time per additional concurrent client.
    pub read_contention_ms_per_client: f64,
}

impl LatencyProfile {
    pub fn calibrated() -> LatencyProfile {
        LatencyProfile {
            endorse_ms: 8.0,
            order_base_ms: 6.0,
            order_per_tx_ms: 4.0,
            disseminate_per_peer_ms: 70.0,
            commit_ms: 6.0,
            read_ms: 1.0,
            read_contention_ms_per_client: 0.189,
        }
    }

    /// All-zero profile: only the batch policy consumes time.
    pub fn instant() -> LatencyProfile {
        LatencyProfile {
            endorse_ms: 0.0,
            order_base_ms: 0.0,
            order_per_tx_ms: 0.0,
            disseminate_per_peer_ms: 0.0,
            commit_ms: 0.0,
            read_ms: 0.0,
            read_contention_ms_per_client: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let all = [
            self.endorse_ms,
            self.order_base_ms,
            self.order_per_tx_ms,
            self.disseminate_per_peer_ms,
            self.commit_ms,
            self.read_ms,
            self.read_contention_ms_per_client,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(NetworkError::Config("latencies must be finite and non-negative".into()))
        }
    }

    /// Ordering + dissemination time of one batch, in microseconds.
    pub fn batch_service_us(&self, batch_len: usize, peers: u32) -> u64 {
        ms_to_us(self.order_base_ms)
            + ms_to_us(self.order_per_tx_ms) * batch_len as u64
            + ms_to_us(self.disseminate_per_peer_ms) * u64::from(peers)
    }

    /// Read service time with `clients` concurrent clients, in microseconds.
    pub fn read_service_us(&self, clients: usize) -> u64 {
        ms_to_us(self.read_ms)
            + ms_to_us(self.read_contention_ms_per_client) * clients.saturating_sub(1) as u64
    }
}

impl Default for LatencyProfile {
    fn default() -> Self {
        LatencyProfile::calibrated()
    }
}

pub fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

/// Block cutting rule: a batch is cut when `batch_timeout_ms` has elapsed
/// since its first transaction arrived or when it holds `max_message_count`
/// transactions, whichever comes first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchPolicy {
    pub batch_timeout_ms: u64,
    pub max_message_count: usize,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        BatchPolicy { batch_timeout_ms: 1000, max_message_count: 500 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub topology: Topology,
    pub latency: LatencyProfile,
    pub batch: BatchPolicy,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        self.topology.validate()?;
        self.latency.validate()?;
        if self.batch.max_message_count == 0 {
            return Err(NetworkError::Config("max_message_count must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<NetworkConfig, NetworkError> {
        let cfg: NetworkConfig =
            serde_json::from_str(text).map_err(|e| NetworkError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<NetworkConfig, NetworkError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| NetworkError::Config(format!("{}: {e}", path.as_ref().display())))?;
        NetworkConfig::from_json(&text)
    }
}

/// Every endorser of every organization must sign the tx id.
#[derive(Clone, Debug)]
pub struct AllEndorsers {
    keys: BTreeMap<String, PublicKey>,
}

impl EndorsementPolicy for AllEndorsers {
    fn is_satisfied(&self, tx: &EndorsedTransaction) -> bool {
        if tx.endorsements.len() != self.keys.len() {
            return false;
        }
        let mut seen = std::collections::BTreeSet::new();
        tx.endorsements.iter().all(|e| {
            seen.insert(e.endorser.as_str())
                && self
                    .keys
                    .get(&e.endorser)
                    .is_some_and(|k| verify(k, tx.tx_id.as_bytes(), &e.signature))
        })
    }
}

/// Outcome of a transaction that went through ordering, or of a read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TransactionResult {
    pub tx_id: Option<MessageDigest>,
    /// Height of the committing block; `None` for reads.
    pub block_height: Option<u64>,
    pub valid: bool,
    pub response: Option<Response>,
    /// Caller-supplied correlation nonce, echoed back unchanged.
    pub correlation: Option<Nonce>,
}

/// State shared by both network drivers.
#[derive(Debug)]
pub struct NetworkCore {
    config: NetworkConfig,
    msp: Msp,
    endorsers: Vec<Identity>,
    peers: Vec<Identity>,
    orderers: Vec<Identity>,
    policy: AllEndorsers,
    ledger: Ledger,
}

impl NetworkCore {
    pub fn new(config: NetworkConfig, mut msp: Msp, ledger: Ledger) -> Result<NetworkCore, NetworkError> {
        config.validate()?;
        let t = config.topology;
        let mut endorsers = Vec::new();
        let mut peers = Vec::new();
        for org in 1..=t.org_count {
            for p in 0..t.peers_per_org {
                peers.push(msp.register_identity(&format!("org{org}-peer{p}"), Role::Peer)?);
            }
            for e in 0..t.endorsers_per_org {
                endorsers.push(msp.register_identity(&format!("org{org}-endorser{e}"), Role::Endorser)?);
            }
        }
        let orderers = (0..t.orderer_count)
            .map(|o| msp.register_identity(&format!("orderer{o}"), Role::Orderer))
            .collect::<Result<Vec<_>, _>>()?;
        let policy = AllEndorsers {
            keys: endorsers.iter().map(|e| (e.name.clone(), e.keypair.public_key)).collect(),
        };
        Ok(NetworkCore { config, msp, endorsers, peers, orderers, policy, ledger })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn msp(&self) -> &Msp {
        &self.msp
    }

    pub fn msp_mut(&mut self) -> &mut Msp {
        &mut self.msp
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn into_ledger(self) -> Ledger {
        self.ledger
    }

    pub fn peers(&self) -> &[Identity] {
        &self.peers
    }

    pub fn endorsers(&self) -> &[Identity] {
        &self.endorsers
    }

    pub fn orderers(&self) -> &[Identity] {
        &self.orderers
    }

    pub fn endorsement_policy(&self) -> &AllEndorsers {
        &self.policy
    }

    pub fn register_identity(&mut self, name: &str, role: Role) -> Result<Identity, NetworkError> {
        Ok(self.msp.register_identity(name, role)?)
    }

    /// Gate applied before endorsement: the certificate must be on record
    /// and users may only act for themselves.
    pub fn authorize(&self, cert: &Certificate, request: &Request) -> Result<(), NetworkError> {
        if !self.msp.validate(cert) {
            return Err(NetworkError::Unauthorized(cert.name.clone()));
        }
        if cert.role == Role::User
            && (matches!(request, Request::Registration(_)) || request.user_name() != cert.name)
        {
            return Err(NetworkError::NotOwner {
                submitter: cert.name.clone(),
                user: request.user_name().to_owned(),
            });
        }
        Ok(())
    }

    /// Simulates the proposal at every endorser and collects their
    /// signatures over the tx id.
    pub fn endorse(
        &self,
        cert: &Certificate,
        request: Request,
        timestamp: u64,
    ) -> Result<EndorsedTransaction, NetworkError> {
        self.authorize(cert, &request)?;
        request.validate().map_err(|e| NetworkError::EndorsementFailed(e.to_string()))?;
        // The proposal response is informational; state effects are decided
        // at commit against the then-current world state.
        let _ = simulate(self.ledger.state(), &request);
        let mut tx = EndorsedTransaction::new(cert.name.clone(), request, timestamp);
        tx.endorsements = self
            .endorsers
            .iter()
            .map(|e| Endorsement {
                endorser: e.name.clone(),
                signature: sign(&e.keypair.private_key, tx.tx_id.as_bytes()),
            })
            .collect();
        Ok(tx)
    }

    /// Appends one block and reports, per transaction, validity and response.
    pub fn commit(
        &mut self,
        batch: Vec<EndorsedTransaction>,
    ) -> Result<(u64, Vec<(MessageDigest, bool, Option<Response>)>), NetworkError> {
        let block = self.ledger.append_block(batch, &self.policy)?;
        let outcomes = block
            .tx_list
            .iter()
            .map(|tx| (tx.tx_id, tx.valid, tx.response.clone()))
            .collect();
        Ok((block.height, outcomes))
    }

    /// Read-only chaincode query answered from committed state.
    pub fn query(&self, cert: &Certificate, request: &Request) -> Result<Response, NetworkError> {
        self.authorize(cert, request)?;
        if !request.is_read_only() {
            return Err(NetworkError::NotReadOnly(request.type_name()));
        }
        request.validate().map_err(|e| NetworkError::EndorsementFailed(e.to_string()))?;
        Ok(simulate(self.ledger.state(), request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaincode::{Credentials, Status};
    use crate::crypto::hash;

    #[test]
    fn presets_split_peers_over_two_orgs() {
        for (name, peers) in [("2O2P", 2), ("2O4P", 4), ("2O6P", 6)] {
            let t: Topology = name.parse().unwrap();
            assert_eq!(t.orderer_count, 2);
            assert_eq!(t.total_peers(), peers);
            assert_eq!(t.org_count, 2);
            assert_eq!(t.to_string(), name);
        }
        assert!(matches!(Topology::preset("3O3P"), Err(NetworkError::UnknownTopology(_))));
    }

    #[test]
    fn config_json_accepts_presets_and_explicit_topologies() {
        let cfg = NetworkConfig::from_json(r#"{"topology":"2O4P"}"#).unwrap();
        assert_eq!(cfg.topology.total_peers(), 4);
        assert_eq!(cfg.batch, BatchPolicy::default());
        assert_eq!(cfg.latency, LatencyProfile::calibrated());
        let cfg = NetworkConfig::from_json(
            r#"{"topology":{"orderer_count":1,"peers_per_org":3,"endorsers_per_org":1},
                "latency":{"endorse_ms":2.5},"batch":{"batch_timeout_ms":200}}"#,
        )
        .unwrap();
        assert_eq!(cfg.topology.total_peers(), 6);
        assert_eq!(cfg.latency.endorse_ms, 2.5);
        assert_eq!(cfg.batch.max_message_count, 500);
        assert!(NetworkConfig::from_json(r#"{"topology":"9O9P"}"#).is_err());
        assert!(NetworkConfig::from_json(r#"{"latency":{"read_ms":-1}}"#).is_err());
        let round = serde_json::to_string(&NetworkConfig::default()).unwrap();
        assert_eq!(NetworkConfig::from_json(&round).unwrap(), NetworkConfig::default());
    }

    #[test]
    fn endorse_and_commit_registration() {
        let mut core = NetworkCore::new(NetworkConfig::default(), Msp::seeded(1), Ledger::new()).unwrap();
        let gw = core.register_identity("gateway", Role::Gateway).unwrap();
        let req = Request::Registration(Credentials { user_name: "alice".into(), h: hash(b"pw") });
        let tx = core.endorse(&gw.certificate, req, 5).unwrap();
        assert_eq!(tx.endorsements.len(), 4);
        assert!(core.endorsement_policy().is_satisfied(&tx));
        let (h, out) = core.commit(vec![tx]).unwrap();
        assert_eq!(h, 1);
        assert_eq!(out[0].2.as_ref().unwrap().status, Status::True);
    }

    #[test]
    fn uncertified_and_impersonating_submitters_are_rejected() {
        let mut core = NetworkCore::new(NetworkConfig::default(), Msp::seeded(1), Ledger::new()).unwrap();
        let rogue = Msp::seeded(99).register_identity("gateway", Role::Gateway).unwrap();
        let req = Request::Registration(Credentials { user_name: "alice".into(), h: hash(b"pw") });
        assert!(matches!(
            core.endorse(&rogue.certificate, req.clone(), 0),
            Err(NetworkError::Unauthorized(_))
        ));
        let bob = core.register_identity("bob", Role::User).unwrap();
        assert!(matches!(core.endorse(&bob.certificate, req, 0), Err(NetworkError::NotOwner { .. })));
    }

    #[test]
    fn policy_requires_every_endorser() {
        let mut core = NetworkCore::new(NetworkConfig::default(), Msp::seeded(3), Ledger::new()).unwrap();
        let gw = core.register_identity("gateway", Role::Gateway).unwrap();
        let req = Request::Registration(Credentials { user_name: "a".into(), h: hash(b"pw") });
        let mut tx = core.endorse(&gw.certificate, req, 1).unwrap();
        let policy = core.endorsement_policy().clone();
        assert!(policy.is_satisfied(&tx));
        let dup = tx.endorsements[0].clone();
        tx.endorsements[1] = dup;
        assert!(!policy.is_satisfied(&tx));
        tx.endorsements.pop();
        assert!(!policy.is_satisfied(&tx));
    }
}
