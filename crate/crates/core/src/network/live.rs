//! Wall-clock driver used by the interactive gateway.
//!
//! Submissions are endorsed on the caller's thread and handed to a single
//! ordering thread, which cuts blocks by timeout or size and commits them.
//! Each submitter gets a [`PendingCommit`] it can block on.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::chaincode::{Request, Response};
use crate::crypto::Nonce;
use crate::ledger::{Block, EndorsedTransaction};
use crate::network::{Certificate, Identity, NetworkCore, NetworkError, Role, TransactionResult};

struct Submission {
    tx: EndorsedTransaction,
    correlation: Option<Nonce>,
    reply: Sender<Result<TransactionResult, String>>,
}

/// Completion handle for a submitted write.
pub struct PendingCommit {
    rx: Receiver<Result<TransactionResult, String>>,
}

impl PendingCommit {
    pub fn wait(self) -> Result<TransactionResult, NetworkError> {
        match self.rx.recv() {
            Ok(Ok(r)) => Ok(r),
            Ok(Err(e)) => Err(NetworkError::Config(e)),
            Err(_) => Err(NetworkError::Stopped),
        }
    }
}

pub struct LiveNetwork {
    core: Arc<Mutex<NetworkCore>>,
    submit: Mutex<Option<Sender<Submission>>>,
    orderer: Mutex<Option<JoinHandle<()>>>,
}

fn wall_clock_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl LiveNetwork {
    pub fn start(core: NetworkCore) -> LiveNetwork {
        let batch = core.config().batch;
        let core = Arc::new(Mutex::new(core));
        let (tx, rx) = mpsc::channel::<Submission>();
        let shared = Arc::clone(&core);
        let handle = std::thread::Builder::new()
            .name("bonik-orderer".into())
            .spawn(move || {
                let timeout = Duration::from_millis(batch.batch_timeout_ms);
                while let Ok(first) = rx.recv() {
                    let deadline = Instant::now() + timeout;
                    let mut items = vec![first];
                    while items.len() < batch.max_message_count {
                        let left = deadline.saturating_duration_since(Instant::now());
                        match rx.recv_timeout(left) {
                            Ok(s) => items.push(s),
                            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => break,
                        }
                    }
                    let txs = items.iter().map(|s| s.tx.clone()).collect();
                    let result = shared.lock().expect("network lock").commit(txs);
                    match result {
                        Ok((height, outcomes)) => {
                            for (s, (tx_id, valid, response)) in items.into_iter().zip(outcomes) {
                                let _ = s.reply.send(Ok(TransactionResult {
                                    tx_id: Some(tx_id),
                                    block_height: Some(height),
                                    valid,
                                    response,
                                    correlation: s.correlation,
                                }));
                            }
                        }
                        Err(e) => {
                            for s in items {
                                let _ = s.reply.send(Err(e.to_string()));
                            }
                        }
                    }
                }
            })
            .expect("spawn orderer thread");
        LiveNetwork { core, submit: Mutex::new(Some(tx)), orderer: Mutex::new(Some(handle)) }
    }

    /// Read access to the shared network state.
    pub fn core(&self) -> MutexGuard<'_, NetworkCore> {
        self.core.lock().expect("network lock")
    }

    pub fn register_identity(&self, name: &str, role: Role) -> Result<Identity, NetworkError> {
        self.core().register_identity(name, role)
    }

    /// Endorses now and queues for ordering; reads are rejected here, use
    /// [`LiveNetwork::query`].
    pub fn submit(
        &self,
        cert: &Certificate,
        request: Request,
        correlation: Option<Nonce>,
    ) -> Result<PendingCommit, NetworkError> {
        let tx = self.core().endorse(cert, request, wall_clock_ms())?;
        let (reply, rx) = mpsc::channel();
        let guard = self.submit.lock().expect("submit lock");
        let sender = guard.as_ref().ok_or(NetworkError::Stopped)?;
        sender.send(Submission { tx, correlation, reply }).map_err(|_| NetworkError::Stopped)?;
        Ok(PendingCommit { rx })
    }

    /// Write path for non-read requests, read path for balance queries.
    pub fn submit_transaction(
        &self,
        cert: &Certificate,
        request: Request,
        correlation: Option<Nonce>,
    ) -> Result<TransactionResult, NetworkError> {
        if request.is_read_only() {
            let response = self.query(cert, &request)?;
            return Ok(TransactionResult {
                tx_id: None,
                block_height: None,
                valid: true,
                response: Some(response),
                correlation,
            });
        }
        self.submit(cert, request, correlation)?.wait()
    }

    pub fn query(&self, cert: &Certificate, request: &Request) -> Result<Response, NetworkError> {
        self.core().query(cert, request)
    }

    pub fn height(&self) -> u64 {
        self.core().ledger().height()
    }

    pub fn block(&self, height: u64) -> Option<Block> {
        self.core().ledger().block(height).cloned()
    }

    pub fn get_state(&self, key: &str) -> Option<String> {
        self.core().ledger().get_state(key).map(str::to_owned)
    }

    pub fn read_history(&self, key: &str) -> Vec<(u64, String)> {
        self.core().ledger().read_history(key)
    }

    /// Stops accepting submissions and joins the ordering thread.
    pub fn shutdown(&self) {
        self.submit.lock().expect("submit lock").take();
        if let Some(h) = self.orderer.lock().expect("orderer lock").take() {
            let _ = h.join();
        }
    }
}

impl Drop for LiveNetwork {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaincode::{account_key, BalData, Credentials, Status, TransferData};
    use crate::crypto::hash;
    use crate::ledger::Ledger;
    use crate::network::{BatchPolicy, LatencyProfile, Msp, NetworkConfig};

    fn live(timeout_ms: u64) -> (Arc<LiveNetwork>, Identity) {
        let cfg = NetworkConfig {
            batch: BatchPolicy { batch_timeout_ms: timeout_ms, max_message_count: 500 },
            latency: LatencyProfile::instant(),
            ..NetworkConfig::default()
        };
        let core = NetworkCore::new(cfg, Msp::new(), Ledger::new()).unwrap();
        let net = Arc::new(LiveNetwork::start(core));
        let gw = net.register_identity("gateway", Role::Gateway).unwrap();
        (net, gw)
    }

    #[test]
    fn concurrent_submissions_are_serialized_into_blocks() {
        let (net, gw) = live(50);
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let net = Arc::clone(&net);
                let cert = gw.certificate.clone();
                std::thread::spawn(move || {
                    let req = Request::Registration(Credentials { user_name: format!("u{i}"), h: hash(b"x") });
                    net.submit_transaction(&cert, req, None).unwrap()
                })
            })
            .collect();
        for h in handles {
            let r = h.join().unwrap();
            assert_eq!(r.response.unwrap().status, Status::True);
            assert!(r.block_height.unwrap() >= 1);
        }
        let core = net.core();
        assert!(core.ledger().verify_chain());
        let total: usize = core.ledger().blocks().iter().map(|b| b.tx_list.len()).sum();
        assert_eq!(total, 8);
    }

    #[test]
    fn reads_short_circuit_and_correlation_is_echoed() {
        let (net, gw) = live(5);
        let n = crate::crypto::fresh_nonce();
        let req = Request::Registration(Credentials { user_name: "a".into(), h: hash(b"x") });
        let r = net.submit_transaction(&gw.certificate, req, Some(n)).unwrap();
        assert_eq!(r.correlation, Some(n));
        let req = Request::Registration(Credentials { user_name: "b".into(), h: hash(b"x") });
        net.submit_transaction(&gw.certificate, req, None).unwrap();
        let a: crate::chaincode::AccountNumber = net.get_state(&account_key("a")).unwrap().parse().unwrap();
        let b = net.get_state(&account_key("b")).unwrap().parse().unwrap();
        let height = net.height();
        let q = Request::BalQuery(BalData { user_name: "a".into(), account_num: a.clone() });
        let r = net.submit_transaction(&gw.certificate, q, None).unwrap();
        assert_eq!(r.response.unwrap().status, Status::Balance(10_000));
        assert_eq!(r.block_height, None);
        assert_eq!(net.height(), height);
        let t = Request::Transfer(TransferData { user_name: "a".into(), from_acc: a, to_acc: b, amount: 1000 });
        let r = net.submit_transaction(&gw.certificate, t, None).unwrap();
        assert_eq!(r.response.unwrap().status, Status::TransactionSuccessful);
        assert_eq!(net.height(), height + 1);
    }
}
