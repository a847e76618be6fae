//! Discrete-event driver over a virtual clock.
//!
//! Time is kept in integer microseconds. Events fire in timestamp order with
//! ties broken by scheduling sequence, so a run is a pure function of its
//! inputs.
//!
//! Write path: endorsement (`endorse_ms`) → pending batch at the ordering
//! service → batch cut on timeout or size → one logical sequencer that is
//! busy for `order_base + order_per_tx·|batch| + disseminate_per_peer·peers`
//! → `commit_ms` → block appended.
//!
//! Read path: the request goes to the client's anchor peer, a FIFO server
//! whose service time is `read_ms + read_contention_ms_per_client·(clients−1)`.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use crate::chaincode::{Request, Response};
use crate::crypto::{MessageDigest, Nonce};
use crate::ledger::EndorsedTransaction;
use crate::network::{ms_to_us, Certificate, NetworkCore, NetworkError};

/// Virtual time in microseconds.
pub type Micros = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ticket(pub u64);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Completion {
    /// A transaction left the commit stage.
    Committed {
        ticket: Ticket,
        tx_id: MessageDigest,
        block_height: u64,
        valid: bool,
        response: Option<Response>,
        correlation: Option<Nonce>,
        submitted_at: Micros,
        completed_at: Micros,
    },
    /// A read-only query was answered by a peer.
    Read {
        ticket: Ticket,
        response: Response,
        correlation: Option<Nonce>,
        submitted_at: Micros,
        completed_at: Micros,
    },
    /// A block was appended.
    BlockCommitted { height: u64, tx_count: usize, at: Micros },
}

impl Completion {
    pub fn at(&self) -> Micros {
        match self {
            Completion::Committed { completed_at, .. } | Completion::Read { completed_at, .. } => *completed_at,
            Completion::BlockCommitted { at, .. } => *at,
        }
    }

    pub fn ticket(&self) -> Option<Ticket> {
        match self {
            Completion::Committed { ticket, .. } | Completion::Read { ticket, .. } => Some(*ticket),
            Completion::BlockCommitted { .. } => None,
        }
    }
}

#[derive(Debug)]
struct InFlight {
    ticket: Ticket,
    tx: EndorsedTransaction,
    correlation: Option<Nonce>,
    submitted_at: Micros,
}

#[derive(Debug)]
enum Event {
    Endorsed(InFlight),
    BatchTimeout { epoch: u64 },
    Commit(Vec<InFlight>),
    ReadDone { ticket: Ticket, request: Request, correlation: Option<Nonce>, submitted_at: Micros },
}

#[derive(Debug)]
struct Scheduled {
    at: Micros,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Debug)]
pub struct Simulator {
    core: NetworkCore,
    now: Micros,
    seq: u64,
    next_ticket: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    pending: Vec<InFlight>,
    batch_epoch: u64,
    orderer_free_at: Micros,
    peer_free_at: Vec<Micros>,
    anchor_peer: HashMap<String, usize>,
    concurrent_clients: usize,
}

impl Simulator {
    pub fn new(core: NetworkCore) -> Simulator {
        let peers = core.config().topology.total_peers() as usize;
        Simulator {
            core,
            now: 0,
            seq: 0,
            next_ticket: 0,
            queue: BinaryHeap::new(),
            pending: Vec::new(),
            batch_epoch: 0,
            orderer_free_at: 0,
            peer_free_at: vec![0; peers],
            anchor_peer: HashMap::new(),
            concurrent_clients: 1,
        }
    }

    pub fn core(&self) -> &NetworkCore {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut NetworkCore {
        &mut self.core
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    /// Number of clients competing for peer reads (drives read contention).
    pub fn set_concurrent_clients(&mut self, clients: usize) {
        self.concurrent_clients = clients.max(1);
    }

    pub fn next_event_time(&self) -> Option<Micros> {
        self.queue.peek().map(|Reverse(s)| s.at)
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    fn schedule(&mut self, at: Micros, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq: self.seq, event }));
    }

    pub fn submit_transaction(&mut self, cert: &Certificate, request: Request) -> Result<Ticket, NetworkError> {
        self.submit_with_correlation(cert, request, None)
    }

    /// Submits at the current virtual time. Read-only requests go to the
    /// submitter's anchor peer; everything else is endorsed and ordered.
    pub fn submit_with_correlation(
        &mut self,
        cert: &Certificate,
        request: Request,
        correlation: Option<Nonce>,
    ) -> Result<Ticket, NetworkError> {
        let ticket = Ticket(self.next_ticket);
        let lat = self.core.config().latency;
        if request.is_read_only() {
            self.core.authorize(cert, &request)?;
            request.validate().map_err(|e| NetworkError::EndorsementFailed(e.to_string()))?;
            let peer_count = self.peer_free_at.len();
            let next = self.anchor_peer.len() % peer_count;
            let peer = *self.anchor_peer.entry(cert.name.clone()).or_insert(next);
            let start = self.now.max(self.peer_free_at[peer]);
            let done = start + lat.read_service_us(self.concurrent_clients);
            self.peer_free_at[peer] = done;
            self.schedule(done, Event::ReadDone { ticket, request, correlation, submitted_at: self.now });
        } else {
            let tx = self.core.endorse(cert, request, self.now / 1000)?;
            let at = self.now + ms_to_us(lat.endorse_ms);
            self.schedule(at, Event::Endorsed(InFlight { ticket, tx, correlation, submitted_at: self.now }));
        }
        self.next_ticket += 1;
        Ok(ticket)
    }

    /// Processes every event with timestamp ≤ `until` and moves the clock there.
    pub fn advance_to(&mut self, until: Micros) -> Result<Vec<Completion>, NetworkError> {
        let mut done = Vec::new();
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.at > until {
                break;
            }
            let Reverse(Scheduled { at, event, .. }) = self.queue.pop().expect("peeked");
            self.now = at;
            self.dispatch(event, &mut done)?;
        }
        self.now = self.now.max(until);
        Ok(done)
    }

    /// Millisecond convenience over [`Simulator::advance_to`].
    pub fn advance_virtual_time(&mut self, until_ms: u64) -> Result<Vec<Completion>, NetworkError> {
        self.advance_to(until_ms * 1000)
    }

    /// Drains the queue completely.
    pub fn run_until_idle(&mut self) -> Result<Vec<Completion>, NetworkError> {
        let mut all = Vec::new();
        while let Some(t) = self.next_event_time() {
            all.extend(self.advance_to(t)?);
        }
        Ok(all)
    }

    fn dispatch(&mut self, event: Event, done: &mut Vec<Completion>) -> Result<(), NetworkError> {
        let batch = self.core.config().batch;
        match event {
            Event::Endorsed(item) => {
                if self.pending.is_empty() {
                    let at = self.now + batch.batch_timeout_ms * 1000;
                    self.schedule(at, Event::BatchTimeout { epoch: self.batch_epoch });
                }
                self.pending.push(item);
                if self.pending.len() >= batch.max_message_count {
                    self.cut_batch();
                }
            }
            Event::BatchTimeout { epoch } => {
                if epoch == self.batch_epoch && !self.pending.is_empty() {
                    self.cut_batch();
                }
            }
            Event::Commit(items) => {
                let txs = items.iter().map(|i| i.tx.clone()).collect();
                let (height, outcomes) = self.core.commit(txs)?;
                for (item, (tx_id, valid, response)) in items.into_iter().zip(outcomes) {
                    done.push(Completion::Committed {
                        ticket: item.ticket,
                        tx_id,
                        block_height: height,
                        valid,
                        response,
                        correlation: item.correlation,
                        submitted_at: item.submitted_at,
                        completed_at: self.now,
                    });
                }
                let tx_count = self.core.ledger().tip().tx_list.len();
                done.push(Completion::BlockCommitted { height, tx_count, at: self.now });
            }
            Event::ReadDone { ticket, request, correlation, submitted_at } => {
                let response = crate::ledger::simulate(self.core.ledger().state(), &request);
                done.push(Completion::Read { ticket, response, correlation, submitted_at, completed_at: self.now });
            }
        }
        Ok(())
    }

    fn cut_batch(&mut self) {
        let items = std::mem::take(&mut self.pending);
        self.batch_epoch += 1;
        let cfg = self.core.config();
        let service = cfg.latency.batch_service_us(items.len(), cfg.topology.total_peers());
        let commit = ms_to_us(cfg.latency.commit_ms);
        let start = self.now.max(self.orderer_free_at);
        self.orderer_free_at = start + service;
        self.schedule(start + service + commit, Event::Commit(items));
    }
}
