//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use bonik_core::chaincode::{
    account_key, balance_key, AccountNumber, Credentials, Request, Status, TransferData, INITIAL_BALANCE,
};
use bonik_core::crypto::hash;
use bonik_core::ledger::{AcceptAll, EndorsedTransaction, Ledger};
use bonik_core::network::{Msp, NetworkConfig, NetworkCore, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn registration(name: &str) -> Request {
    Request::Registration(Credentials { user_name: name.into(), h: hash(name.as_bytes()) })
}

pub fn transfer(user: &str, from: &AccountNumber, to: &AccountNumber, amount: u64) -> Request {
    Request::Transfer(TransferData { user_name: user.into(), from_acc: from.clone(), to_acc: to.clone(), amount })
}

pub fn account_of(ledger: &Ledger, user: &str) -> AccountNumber {
    ledger.get_state(&account_key(user)).expect("registered").parse().expect("account number")
}

pub fn balance_of(ledger: &Ledger, acc: &AccountNumber) -> u64 {
    ledger.get_state(&balance_key(acc)).expect("balance").parse().expect("number")
}

/// Ledger holding `n` registered users `u0 .. u{n-1}` and their accounts.
pub fn ledger_with_accounts(n: usize) -> (Ledger, Vec<(String, AccountNumber)>) {
    let mut ledger = Ledger::new();
    let txs = (0..n)
        .map(|i| EndorsedTransaction::new(format!("u{i}"), registration(&format!("u{i}")), i as u64))
        .collect();
    ledger.append_block(txs, &AcceptAll).expect("registration block");
    let users = (0..n).map(|i| format!("u{i}")).map(|u| (u.clone(), account_of(&ledger, &u))).collect();
    (ledger, users)
}

/// Oracle: the transfer rule replayed over a plain map.
pub fn naive_replay(initial: &BTreeMap<usize, u64>, ops: &[(usize, usize, u64)]) -> (BTreeMap<usize, u64>, Vec<bool>) {
    let mut bal = initial.clone();
    let mut ok = Vec::with_capacity(ops.len());
    for &(from, to, amount) in ops {
        if from != to && bal[&from] > amount {
            *bal.get_mut(&from).unwrap() -= amount;
            *bal.get_mut(&to).unwrap() += amount;
            ok.push(true);
        } else {
            ok.push(false);
        }
    }
    (bal, ok)
}

pub fn initial_balances(n: usize) -> BTreeMap<usize, u64> {
    (0..n).map(|i| (i, INITIAL_BALANCE)).collect()
}

/// Runs `ops` through the ledger in blocks of `block_size` and returns the
/// per-account balances and per-transfer success flags.
pub fn ledger_replay(ops: &[(usize, usize, u64)], accounts: usize, block_size: usize) -> (Ledger, BTreeMap<usize, u64>, Vec<bool>) {
    let (mut ledger, users) = ledger_with_accounts(accounts);
    let mut ok = Vec::with_capacity(ops.len());
    for (chunk_no, chunk) in ops.chunks(block_size.max(1)).enumerate() {
        let txs = chunk
            .iter()
            .enumerate()
            .map(|(k, &(f, t, a))| {
                let ts = (chunk_no * block_size + k) as u64 + 1000;
                EndorsedTransaction::new(users[f].0.clone(), transfer(&users[f].0, &users[f].1, &users[t].1, a), ts)
            })
            .collect();
        let block = ledger.append_block(txs, &AcceptAll).expect("block");
        ok.extend(block.tx_list.iter().map(|tx| {
            tx.response.as_ref().is_some_and(|r| r.status == Status::TransactionSuccessful)
        }));
    }
    let balances = users.iter().enumerate().map(|(i, (_, a))| (i, balance_of(&ledger, a))).collect();
    (ledger, balances, ok)
}

/// A network core with the instant latency profile and a gateway identity.
pub fn core_with_gateway(seed: u64) -> (NetworkCore, bonik_core::network::Certificate) {
    let mut core = NetworkCore::new(NetworkConfig::default(), Msp::seeded(seed), Ledger::new()).expect("core");
    let gw = core.register_identity("gateway", Role::Gateway).expect("gateway identity");
    (core, gw.certificate)
}

/// Commits `n` transactions mixing registrations, logins (good and bad
/// passwords), transfers and one tampered transaction, in blocks of up to 40.
pub fn mixed_workload(n: usize, seed: u64) -> Ledger {
    let (mut core, gw) = core_with_gateway(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users: Vec<(String, Option<AccountNumber>)> = Vec::new();
    let mut pending = Vec::new();
    let mut ts = 0u64;
    for i in 0..n {
        ts += 1;
        let request = if users.len() < 10 || rng.gen_bool(0.15) {
            let name = format!("m{i}");
            users.push((name.clone(), None));
            registration(&name)
        } else {
            let known: Vec<_> = users.iter().filter(|u| u.1.is_some()).collect();
            match rng.gen_range(0..4) {
                0 => {
                    let u = &users[rng.gen_range(0..users.len())].0;
                    let pw = if rng.gen_bool(0.8) { u.as_str() } else { "wrong" };
                    Request::Login(Credentials { user_name: u.clone(), h: hash(pw.as_bytes()) })
                }
                _ if known.len() >= 2 => {
                    let a = rng.gen_range(0..known.len());
                    let mut b = rng.gen_range(0..known.len() - 1);
                    if b >= a {
                        b += 1;
                    }
                    let (from, to) = (known[a], known[b]);
                    transfer(&from.0, from.1.as_ref().unwrap(), to.1.as_ref().unwrap(), rng.gen_range(1..12_000))
                }
                _ => registration(&format!("m{i}")),
            }
        };
        let mut tx = core.endorse(&gw, request, ts).expect("endorse");
        if i == n / 2 {
            tx.endorsements.clear();
        }
        pending.push(tx);
        if pending.len() == 40 || i + 1 == n {
            core.commit(std::mem::take(&mut pending)).expect("commit");
            for u in users.iter_mut().filter(|u| u.1.is_none()) {
                u.1 = core.ledger().get_state(&account_key(&u.0)).and_then(|a| a.parse().ok());
            }
        }
    }
    core.into_ledger()
}
