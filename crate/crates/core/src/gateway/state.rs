//! Replay and session bookkeeping.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::rngs::OsRng;
use rand::RngCore;

use crate::chaincode::AccountNumber;
use crate::crypto::{Nonce, PublicKey};
use crate::network::Certificate;

/// Milliseconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> ManualClock {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

struct Seen {
    at: HashMap<Nonce, u64>,
    last_sweep: u64,
}

/// Accepts each nonce at most once within `ttl_ms` of its first use.
pub struct NonceLedger {
    ttl_ms: u64,
    seen: Mutex<Seen>,
}

impl NonceLedger {
    pub fn new(ttl_ms: u64) -> NonceLedger {
        NonceLedger { ttl_ms, seen: Mutex::new(Seen { at: HashMap::new(), last_sweep: 0 }) }
    }

    pub fn ttl_ms(&self) -> u64 {
        self.ttl_ms
    }

    /// Records `nonce`; false if it was already used inside the window.
    pub fn claim(&self, nonce: Nonce, now: u64) -> bool {
        let mut seen = self.seen.lock().expect("nonce lock");
        if now.saturating_sub(seen.last_sweep) >= (self.ttl_ms / 10).max(1) {
            Self::sweep_locked(&mut seen, self.ttl_ms, now);
        }
        if let Some(&t) = seen.at.get(&nonce) {
            if now.saturating_sub(t) < self.ttl_ms {
                return false;
            }
        }
        seen.at.insert(nonce, now);
        true
    }

    fn sweep_locked(seen: &mut Seen, ttl: u64, now: u64) -> usize {
        let before = seen.at.len();
        seen.at.retain(|_, t| now.saturating_sub(*t) < ttl);
        seen.last_sweep = now;
        before - seen.at.len()
    }

    /// Drops expired entries and returns how many were removed.
    pub fn sweep(&self, now: u64) -> usize {
        let mut seen = self.seen.lock().expect("nonce lock");
        Self::sweep_locked(&mut seen, self.ttl_ms, now)
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("nonce lock").at.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub session_id: String,
    pub user_name: String,
    pub public_key: PublicKey,
    pub certificate: Certificate,
    pub account: AccountNumber,
    pub created_at: u64,
    pub expires_at: u64,
}

pub struct SessionSlot {
    session: Mutex<Session>,
    turn: Mutex<()>,
}

impl SessionSlot {
    pub fn snapshot(&self) -> Session {
        self.session.lock().expect("session lock").clone()
    }

    /// Serializes requests on one session.
    pub fn turn(&self) -> MutexGuard<'_, ()> {
        self.turn.lock().expect("turn lock")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionError {
    Unknown,
    Expired,
}

/// Sessions with an idle timeout; any valid use pushes the expiry forward.
pub struct SessionTable {
    idle_ms: u64,
    slots: Mutex<HashMap<String, Arc<SessionSlot>>>,
}

fn new_session_id() -> String {
    let mut b = [0u8; 32];
    OsRng.fill_bytes(&mut b);
    hex::encode(b)
}

impl SessionTable {
    pub fn new(idle_ms: u64) -> SessionTable {
        SessionTable { idle_ms, slots: Mutex::new(HashMap::new()) }
    }

    pub fn create(&self, certificate: Certificate, account: AccountNumber, now: u64) -> Session {
        let session = Session {
            session_id: new_session_id(),
            user_name: certificate.name.clone(),
            public_key: certificate.public_key,
            certificate,
            account,
            created_at: now,
            expires_at: now + self.idle_ms,
        };
        let slot = Arc::new(SessionSlot { session: Mutex::new(session.clone()), turn: Mutex::new(()) });
        self.slots.lock().expect("session table lock").insert(session.session_id.clone(), slot);
        session
    }

    pub fn get(&self, session_id: &str, now: u64) -> Result<Arc<SessionSlot>, SessionError> {
        let mut slots = self.slots.lock().expect("session table lock");
        let slot = slots.get(session_id).cloned().ok_or(SessionError::Unknown)?;
        if now >= slot.snapshot().expires_at {
            slots.remove(session_id);
            return Err(SessionError::Expired);
        }
        Ok(slot)
    }

    pub fn touch(&self, slot: &SessionSlot, now: u64) {
        let mut s = slot.session.lock().expect("session lock");
        s.expires_at = s.expires_at.max(now + self.idle_ms);
    }

    pub fn account_of(&self, session_id: &str) -> Option<AccountNumber> {
        let slots = self.slots.lock().expect("session table lock");
        slots.get(session_id).map(|s| s.snapshot().account)
    }

    /// Removes expired sessions, returning their ids.
    pub fn sweep(&self, now: u64) -> Vec<String> {
        let mut slots = self.slots.lock().expect("session table lock");
        let dead: Vec<String> =
            slots.iter().filter(|(_, s)| now >= s.snapshot().expires_at).map(|(k, _)| k.clone()).collect();
        for k in &dead {
            slots.remove(k);
        }
        dead
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("session table lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Msp, Role};

    #[test]
    fn nonce_accepted_once_inside_window() {
        let l = NonceLedger::new(1000);
        let n = Nonce([1; 16]);
        assert!(l.claim(n, 0));
        assert!(!l.claim(n, 999));
        assert!(l.claim(Nonce([2; 16]), 500));
        assert_eq!(l.sweep(1400), 1);
        assert_eq!(l.len(), 1);
        assert!(l.claim(n, 1400));
    }

    #[test]
    fn sessions_expire_when_idle() {
        let mut msp = Msp::new();
        let id = msp.register_identity("alice", Role::User).unwrap();
        let acc = AccountNumber::from_sequence(1_000_000_001).unwrap();
        let t = SessionTable::new(100);
        let s = t.create(id.certificate.clone(), acc.clone(), 0);
        assert_eq!(s.session_id.len(), 64);
        let slot = t.get(&s.session_id, 50).unwrap();
        t.touch(&slot, 50);
        assert!(t.get(&s.session_id, 149).is_ok());
        assert_eq!(t.get(&s.session_id, 150).err(), Some(SessionError::Expired));
        assert_eq!(t.get(&s.session_id, 150).err(), Some(SessionError::Unknown));
        let a = t.create(id.certificate.clone(), acc.clone(), 0);
        let b = t.create(id.certificate, acc, 50);
        assert_ne!(a.session_id, b.session_id);
        assert_eq!(t.sweep(120), vec![a.session_id]);
        assert_eq!(t.len(), 1);
    }
}
