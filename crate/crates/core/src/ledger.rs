//! Append-only hash-chained block store and the world state materialized
//! from it.
//!
//! A block hash commits to the height, the previous hash, every tx id in
//! order, and the digest of the canonical `tx_list` encoding, so any byte of
//! a committed block (including endorsements and recorded responses) is
//! covered by the chain.
//!
//! On disk the ledger is newline-delimited JSON, one block per line with the
//! fields `{height, prev_hash, tx_list, block_hash}`. The world state is never
//! persisted; it is rebuilt by replaying the file.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaincode::{scc_invoke, Request, Response, StateAccess, StateError};
use crate::crypto::{canonical_json, hash, MessageDigest, Signature};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("a block needs at least one transaction")]
    EmptyBlock,
    #[error(transparent)]
    State(#[from] StateError),
    #[error("ledger file {path}: line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("ledger io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endorsement {
    pub endorser: String,
    pub signature: Signature,
}

/// A transaction as it leaves endorsement, before the ordering service has
/// placed it in a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EndorsedTransaction {
    pub tx_id: MessageDigest,
    pub submitter: String,
    pub request: Request,
    pub timestamp: u64,
    pub endorsements: Vec<Endorsement>,
}

/// `tx_id = H(canonical(request) ‖ submitter ‖ timestamp_be)`.
pub fn compute_tx_id(request: &Request, submitter: &str, timestamp: u64) -> MessageDigest {
    let mut bytes = canonical_json(request);
    bytes.extend_from_slice(submitter.as_bytes());
    bytes.extend_from_slice(&timestamp.to_be_bytes());
    hash(&bytes)
}

impl EndorsedTransaction {
    pub fn new(submitter: impl Into<String>, request: Request, timestamp: u64) -> Self {
        let submitter = submitter.into();
        EndorsedTransaction {
            tx_id: compute_tx_id(&request, &submitter, timestamp),
            submitter,
            request,
            timestamp,
            endorsements: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerTransaction {
    pub tx_id: MessageDigest,
    pub submitter: String,
    pub request: Request,
    pub timestamp: u64,
    pub endorsements: Vec<Endorsement>,
    /// False when endorsement validation failed; such transactions are kept
    /// in the block but have no state effects.
    pub valid: bool,
    /// Chaincode response, absent for invalid transactions.
    pub response: Option<Response>,
}

impl LedgerTransaction {
    pub fn recomputed_id(&self) -> MessageDigest {
        compute_tx_id(&self.request, &self.submitter, self.timestamp)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub height: u64,
    pub prev_hash: MessageDigest,
    pub tx_list: Vec<LedgerTransaction>,
    pub block_hash: MessageDigest,
}

pub fn compute_block_hash(height: u64, prev_hash: &MessageDigest, tx_list: &[LedgerTransaction]) -> MessageDigest {
    let mut bytes = Vec::with_capacity(8 + 32 * (tx_list.len() + 2));
    bytes.extend_from_slice(&height.to_be_bytes());
    bytes.extend_from_slice(prev_hash.as_bytes());
    for tx in tx_list {
        bytes.extend_from_slice(tx.tx_id.as_bytes());
    }
    bytes.extend_from_slice(hash(&canonical_json(tx_list)).as_bytes());
    hash(&bytes)
}

impl Block {
    fn seal(height: u64, prev_hash: MessageDigest, tx_list: Vec<LedgerTransaction>) -> Block {
        let block_hash = compute_block_hash(height, &prev_hash, &tx_list);
        Block { height, prev_hash, tx_list, block_hash }
    }

    pub fn genesis() -> Block {
        Block::seal(0, MessageDigest::ZERO, Vec::new())
    }

    /// Recomputes every tx id and the block hash.
    pub fn is_self_consistent(&self) -> bool {
        self.tx_list.iter().all(|tx| tx.recomputed_id() == tx.tx_id)
            && compute_block_hash(self.height, &self.prev_hash, &self.tx_list) == self.block_hash
    }

    pub fn to_line(&self) -> String {
        String::from_utf8(canonical_json(self)).expect("JSON is UTF-8")
    }

    /// Parses one ledger line, insisting on the canonical encoding.
    pub fn from_line(line: &str) -> Result<Block, String> {
        let block: Block = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if block.to_line() != line {
            return Err("non-canonical block encoding".into());
        }
        Ok(block)
    }
}

/// Decides whether an endorsed transaction satisfies the endorsement policy.
pub trait EndorsementPolicy {
    fn is_satisfied(&self, tx: &EndorsedTransaction) -> bool;
}

/// Accepts everything; used when replaying already-validated blocks.
pub struct AcceptAll;

impl EndorsementPolicy for AcceptAll {
    fn is_satisfied(&self, _tx: &EndorsedTransaction) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateEntry {
    pub value: String,
    /// Height of the block that last wrote the key.
    pub height: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorldState {
    entries: BTreeMap<String, StateEntry>,
}

impl WorldState {
    pub fn get_state(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn entry(&self, key: &str) -> Option<&StateEntry> {
        self.entries.get(key)
    }

    pub fn put_state(&mut self, key: &str, value: String, height: u64) -> Result<(), StateError> {
        if key.is_empty() {
            return Err(StateError::InvalidKey);
        }
        self.entries.insert(key.to_owned(), StateEntry { value, height });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &StateEntry)> {
        self.entries.iter()
    }
}

/// Buffered write set of a single chaincode execution over a read-only base.
pub struct TxOverlay<'a> {
    base: &'a WorldState,
    writes: BTreeMap<String, String>,
}

impl<'a> TxOverlay<'a> {
    pub fn new(base: &'a WorldState) -> Self {
        TxOverlay { base, writes: BTreeMap::new() }
    }

    pub fn into_writes(self) -> BTreeMap<String, String> {
        self.writes
    }
}

impl StateAccess for TxOverlay<'_> {
    fn get_state(&self, key: &str) -> Option<String> {
        self.writes
            .get(key)
            .cloned()
            .or_else(|| self.base.get_state(key).map(str::to_owned))
    }

    fn put_state(&mut self, key: &str, value: String) -> Result<(), StateError> {
        if key.is_empty() {
            return Err(StateError::InvalidKey);
        }
        self.writes.insert(key.to_owned(), value);
        Ok(())
    }
}

/// Runs `request` against `state` without committing anything.
pub fn simulate(state: &WorldState, request: &Request) -> Response {
    let mut overlay = TxOverlay::new(state);
    scc_invoke(&mut overlay, request)
}

#[derive(Debug)]
pub struct Ledger {
    blocks: Vec<Block>,
    state: WorldState,
    history: BTreeMap<String, Vec<(u64, String)>>,
    sink: Option<BufWriter<File>>,
}

impl Default for Ledger {
    fn default() -> Self {
        Ledger::new()
    }
}

impl Ledger {
    /// In-memory ledger holding only the genesis block.
    pub fn new() -> Ledger {
        Ledger {
            blocks: vec![Block::genesis()],
            state: WorldState::default(),
            history: BTreeMap::new(),
            sink: None,
        }
    }

    /// Opens (or creates) a ledger file, verifying and replaying it.
    pub fn open(path: impl AsRef<Path>) -> Result<Ledger, LedgerError> {
        let path = path.as_ref();
        let mut ledger = if path.exists() && std::fs::metadata(path)?.len() > 0 {
            let reader = BufReader::new(File::open(path)?);
            let mut lines = Vec::new();
            for line in reader.lines() {
                lines.push(line?);
            }
            Ledger::from_lines(&lines).map_err(|(line, reason)| LedgerError::Corrupt {
                path: path.to_owned(),
                line: line + 1,
                reason,
            })?
        } else {
            let mut f = File::create(path)?;
            writeln!(f, "{}", Block::genesis().to_line())?;
            f.sync_all()?;
            Ledger::new()
        };
        let file = OpenOptions::new().append(true).open(path)?;
        ledger.sink = Some(BufWriter::new(file));
        Ok(ledger)
    }

    /// Rebuilds a ledger from serialized lines; errors carry the offending
    /// line index.
    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Ledger, (usize, String)> {
        let mut ledger = Ledger { blocks: Vec::new(), ..Ledger::new() };
        for (i, line) in lines.iter().enumerate() {
            let line = line.as_ref();
            if line.is_empty() && i + 1 == lines.len() {
                break;
            }
            let block = Block::from_line(line).map_err(|e| (i, e))?;
            ledger.check_link(&block).map_err(|e| (i, e))?;
            ledger.replay_block(&block).map_err(|e| (i, e))?;
            ledger.blocks.push(block);
        }
        if ledger.blocks.is_empty() {
            return Err((0, "missing genesis block".into()));
        }
        Ok(ledger)
    }

    fn check_link(&self, block: &Block) -> Result<(), String> {
        let (expected_height, expected_prev) = match self.blocks.last() {
            None => (0, MessageDigest::ZERO),
            Some(tip) => (tip.height + 1, tip.block_hash),
        };
        if block.height != expected_height {
            return Err(format!("expected height {expected_height}, found {}", block.height));
        }
        if block.prev_hash != expected_prev {
            return Err("prev_hash does not match predecessor".into());
        }
        if block.height == 0 && !block.tx_list.is_empty() {
            return Err("genesis block carries transactions".into());
        }
        if block.height > 0 && block.tx_list.is_empty() {
            return Err("empty block".into());
        }
        if !block.is_self_consistent() {
            return Err("block or tx hash mismatch".into());
        }
        Ok(())
    }

    fn replay_block(&mut self, block: &Block) -> Result<(), String> {
        for tx in &block.tx_list {
            if !tx.valid {
                if tx.response.is_some() {
                    return Err("invalid transaction carries a response".into());
                }
                continue;
            }
            let (response, writes) = {
                let mut overlay = TxOverlay::new(&self.state);
                let r = scc_invoke(&mut overlay, &tx.request);
                (r, overlay.into_writes())
            };
            if tx.response.as_ref() != Some(&response) {
                return Err(format!("replayed response differs for tx {}", tx.tx_id));
            }
            self.apply_writes(writes, block.height).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    fn apply_writes(&mut self, writes: BTreeMap<String, String>, height: u64) -> Result<(), StateError> {
        for (k, v) in writes {
            self.state.put_state(&k, v.clone(), height)?;
            self.history.entry(k).or_default().push((height, v));
        }
        Ok(())
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("ledger always holds genesis")
    }

    pub fn block(&self, height: u64) -> Option<&Block> {
        self.blocks.get(usize::try_from(height).ok()?)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn get_state(&self, key: &str) -> Option<&str> {
        self.state.get_state(key)
    }

    /// Orders `txs` into a new block: each transaction is validated against
    /// `policy`, valid ones run through the system chaincode in list order,
    /// and the block is linked to the current tip.
    pub fn append_block(
        &mut self,
        txs: Vec<EndorsedTransaction>,
        policy: &dyn EndorsementPolicy,
    ) -> Result<&Block, LedgerError> {
        if txs.is_empty() {
            return Err(LedgerError::EmptyBlock);
        }
        let height = self.height() + 1;
        let mut tx_list = Vec::with_capacity(txs.len());
        for tx in txs {
            let valid = tx.recomputed_id_matches() && policy.is_satisfied(&tx);
            let response = if valid {
                let (r, writes) = {
                    let mut overlay = TxOverlay::new(&self.state);
                    let r = scc_invoke(&mut overlay, &tx.request);
                    (r, overlay.into_writes())
                };
                self.apply_writes(writes, height)?;
                Some(r)
            } else {
                None
            };
            tx_list.push(LedgerTransaction {
                tx_id: tx.tx_id,
                submitter: tx.submitter,
                request: tx.request,
                timestamp: tx.timestamp,
                endorsements: tx.endorsements,
                valid,
                response,
            });
        }
        let block = Block::seal(height, self.tip().block_hash, tx_list);
        if let Some(sink) = self.sink.as_mut() {
            writeln!(sink, "{}", block.to_line())?;
            sink.flush()?;
        }
        self.blocks.push(block);
        Ok(self.tip())
    }

    /// True iff every block links to its predecessor and every tx id and
    /// block hash recomputes.
    pub fn verify_chain(&self) -> bool {
        verify_blocks(&self.blocks)
    }

    /// Every committed write to `key`, ascending by height.
    pub fn read_history(&self, key: &str) -> Vec<(u64, String)> {
        self.history.get(key).cloned().unwrap_or_default()
    }

    /// Fresh world state obtained by replaying the whole block log.
    pub fn replay_state(&self) -> Result<WorldState, String> {
        let mut fresh = Ledger { blocks: Vec::new(), ..Ledger::new() };
        for b in &self.blocks {
            fresh.replay_block(b)?;
            fresh.blocks.push(b.clone());
        }
        Ok(fresh.state)
    }

    pub fn to_lines(&self) -> Vec<String> {
        self.blocks.iter().map(Block::to_line).collect()
    }

    /// Serialized ledger file contents.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for line in self.to_lines() {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

impl EndorsedTransaction {
    fn recomputed_id_matches(&self) -> bool {
        compute_tx_id(&self.request, &self.submitter, self.timestamp) == self.tx_id
    }
}

pub fn verify_blocks(blocks: &[Block]) -> bool {
    let mut prev = MessageDigest::ZERO;
    for (i, b) in blocks.iter().enumerate() {
        if b.height != i as u64 || b.prev_hash != prev || !b.is_self_consistent() {
            return false;
        }
        if (i == 0) != b.tx_list.is_empty() {
            return false;
        }
        prev = b.block_hash;
    }
    !blocks.is_empty()
}

/// Verifies serialized ledger text: every line must be a canonical block and
/// the chain must link and hash correctly.
pub fn verify_serialized(text: &str) -> bool {
    let mut blocks = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    for line in body.split('\n') {
        match Block::from_line(line) {
            Ok(b) => blocks.push(b),
            Err(_) => return false,
        }
    }
    verify_blocks(&blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaincode::{
        balance_key, AccountNumber, Credentials, Status, TransferData, INITIAL_BALANCE,
    };
    use crate::crypto::{hash, sign, KeyPair};

    /// Requires a single signature by a known key over the tx id.
    struct SingleSigner(KeyPair);

    impl EndorsementPolicy for SingleSigner {
        fn is_satisfied(&self, tx: &EndorsedTransaction) -> bool {
            tx.endorsements.len() == 1
                && crate::crypto::verify(&self.0.public_key, tx.tx_id.as_bytes(), &tx.endorsements[0].signature)
        }
    }

    fn endorsed(kp: &KeyPair, submitter: &str, request: Request, ts: u64) -> EndorsedTransaction {
        let mut tx = EndorsedTransaction::new(submitter, request, ts);
        tx.endorsements.push(Endorsement {
            endorser: "peer0".into(),
            signature: sign(&kp.private_key, tx.tx_id.as_bytes()),
        });
        tx
    }

    fn reg(name: &str) -> Request {
        Request::Registration(Credentials { user_name: name.into(), h: hash(name.as_bytes()) })
    }

    fn xfer(from: &str, to: &str, amount: u64) -> Request {
        Request::Transfer(TransferData {
            user_name: "x".into(),
            from_acc: from.parse().unwrap(),
            to_acc: to.parse().unwrap(),
            amount,
        })
    }

    fn setup() -> (Ledger, SingleSigner) {
        let kp = KeyPair::from_seed(&[1; 32]);
        let mut l = Ledger::new();
        let txs = vec![endorsed(&kp, "gw", reg("a"), 1), endorsed(&kp, "gw", reg("b"), 2)];
        let policy = SingleSigner(kp);
        l.append_block(txs, &policy).unwrap();
        (l, policy)
    }

    #[test]
    fn genesis_only_chain_verifies() {
        let l = Ledger::new();
        assert_eq!(l.height(), 0);
        assert_eq!(l.tip().prev_hash, MessageDigest::ZERO);
        assert!(l.verify_chain());
    }

    #[test]
    fn world_state_put_get() {
        let mut ws = WorldState::default();
        assert_eq!(ws.get_state("alice"), None);
        ws.put_state("alice", "h1".into(), 1).unwrap();
        assert_eq!(ws.get_state("alice"), Some("h1"));
        ws.put_state("alice", "h2".into(), 2).unwrap();
        assert_eq!(ws.entry("alice").unwrap(), &StateEntry { value: "h2".into(), height: 2 });
        assert_eq!(ws.put_state("", "v".into(), 3), Err(StateError::InvalidKey));
    }

    #[test]
    fn append_links_blocks_and_applies_state() {
        let (mut l, policy) = setup();
        assert_eq!(l.get_state("bal:1000000001"), Some("10000"));
        let kp = &policy.0;
        let txs = vec![
            endorsed(kp, "gw", xfer("1000000001", "1000000002", 1000), 3),
            endorsed(kp, "gw", xfer("1000000001", "1000000002", 1000), 4),
            endorsed(kp, "gw", reg("c"), 5),
        ];
        let b = l.append_block(txs, &policy).unwrap();
        assert_eq!(b.height, 2);
        assert_eq!(b.tx_list.len(), 3);
        assert_eq!(l.get_state("bal:1000000001"), Some("8000"));
        assert_eq!(l.block(2).unwrap().prev_hash, l.block(1).unwrap().block_hash);
        assert!(l.verify_chain());
        assert!(matches!(l.append_block(vec![], &policy), Err(LedgerError::EmptyBlock)));
    }

    #[test]
    fn tampered_endorsement_is_flagged_and_skipped() {
        let (mut l, policy) = setup();
        let kp = &policy.0;
        let mut bad = endorsed(kp, "gw", xfer("1000000001", "1000000002", 500), 3);
        bad.endorsements[0].signature.0[0] ^= 1;
        let good = endorsed(kp, "gw", xfer("1000000002", "1000000001", 200), 4);

        // oracle: the same block without the tampered transaction
        let (mut reference, _) = setup();
        reference.append_block(vec![good.clone()], &policy).unwrap();

        l.append_block(vec![bad, good], &policy).unwrap();
        let tip = l.tip();
        assert!(!tip.tx_list[0].valid);
        assert!(tip.tx_list[0].response.is_none());
        assert!(tip.tx_list[1].valid);
        assert_eq!(l.state(), reference.state());
        assert!(l.verify_chain());
    }

    #[test]
    fn flipping_any_payload_byte_breaks_verification() {
        let (mut l, policy) = setup();
        for i in 0..5 {
            let tx = endorsed(&policy.0, "gw", xfer("1000000001", "1000000002", 10), 10 + i);
            l.append_block(vec![tx], &policy).unwrap();
        }
        let text = l.to_file_string();
        assert!(verify_serialized(&text));
        let bytes = text.as_bytes();
        for pos in (0..bytes.len()).step_by(7) {
            if bytes[pos] == b'\n' {
                continue;
            }
            let mut m = bytes.to_vec();
            m[pos] ^= 0x01;
            let mutated = String::from_utf8_lossy(&m);
            assert!(!verify_serialized(&mutated), "mutation at {pos} went unnoticed");
        }
    }

    #[test]
    fn in_memory_tamper_breaks_chain() {
        let (mut l, policy) = setup();
        for i in 0..100 {
            let tx = endorsed(&policy.0, "gw", reg(&format!("u{i}")), 100 + i);
            l.append_block(vec![tx], &policy).unwrap();
        }
        assert!(l.verify_chain());
        if let Request::Registration(d) = &mut l.blocks[50].tx_list[0].request {
            d.user_name.push('!');
        }
        assert!(!l.verify_chain());
    }

    #[test]
    fn history_tracks_every_write() {
        let (mut l, policy) = setup();
        assert!(l.read_history("nothing").is_empty());
        let n = 4;
        for i in 0..n {
            let tx = endorsed(&policy.0, "gw", xfer("1000000001", "1000000002", 1), 20 + i);
            l.append_block(vec![tx], &policy).unwrap();
        }
        let a: AccountNumber = "1000000001".parse().unwrap();
        let hist = l.read_history(&balance_key(&a));
        assert_eq!(hist.len(), n as usize + 1);
        assert_eq!(hist[0], (1, INITIAL_BALANCE.to_string()));
        assert!(hist.windows(2).all(|w| w[0].0 < w[1].0));
        assert_eq!(hist.last().unwrap().1, (INITIAL_BALANCE - n).to_string());
    }

    #[test]
    fn replay_reproduces_state_and_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.ndjson");
        let kp = KeyPair::from_seed(&[1; 32]);
        let policy = SingleSigner(kp.clone());
        {
            let mut l = Ledger::open(&path).unwrap();
            l.append_block(vec![endorsed(&kp, "gw", reg("a"), 1), endorsed(&kp, "gw", reg("b"), 2)], &policy)
                .unwrap();
            l.append_block(vec![endorsed(&kp, "gw", xfer("1000000001", "1000000002", 10_000), 3)], &policy)
                .unwrap();
            assert_eq!(
                l.tip().tx_list[0].response.as_ref().unwrap().status,
                Status::TransactionAborted
            );
            assert_eq!(l.replay_state().unwrap(), *l.state());
        }
        let reopened = Ledger::open(&path).unwrap();
        assert_eq!(reopened.height(), 2);
        assert_eq!(reopened.get_state("bal:1000000002"), Some("10000"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, reopened.to_file_string());
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
            assert_eq!(keys, ["block_hash", "height", "prev_hash", "tx_list"]);
        }

        // a corrupted file refuses to open
        let corrupted = text.replacen("\"height\":1", "\"height\":7", 1);
        std::fs::write(&path, corrupted).unwrap();
        assert!(matches!(Ledger::open(&path), Err(LedgerError::Corrupt { line: 2, .. })));
    }
}
