mod support;

use bonik_core::ledger::{verify_blocks, verify_serialized, Ledger};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn mixed_workload_chain_verifies() {
    let ledger = support::mixed_workload(500, 7);
    let txs: usize = ledger.blocks().iter().map(|b| b.tx_list.len()).sum();
    assert_eq!(txs, 500);
    assert!(ledger.verify_chain());
    assert!(ledger.blocks().iter().flat_map(|b| &b.tx_list).any(|tx| !tx.valid));
    assert_eq!(&ledger.replay_state().unwrap(), ledger.state());
}

#[test]
fn any_byte_flip_breaks_verification() {
    let ledger = support::mixed_workload(120, 3);
    let text = ledger.to_file_string();
    assert!(verify_serialized(&text));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let mut bytes = text.clone().into_bytes();
        let i = rng.gen_range(0..bytes.len());
        bytes[i] ^= rng.gen_range(1..=255u8);
        let mutated = String::from_utf8_lossy(&bytes);
        assert!(!verify_serialized(&mutated), "flip at {i} went unnoticed");
    }
}

#[test]
fn structural_tampering_is_detected() {
    let ledger = support::mixed_workload(100, 5);
    let blocks = ledger.blocks().to_vec();
    let mut b = blocks.clone();
    b[1].tx_list[0].timestamp += 1;
    assert!(!verify_blocks(&b));
    let mut b = blocks.clone();
    b[2].tx_list.swap(0, 1);
    assert!(!verify_blocks(&b));
    let mut b = blocks.clone();
    b[1].tx_list[0].valid = !b[1].tx_list[0].valid;
    assert!(!verify_blocks(&b));
    let mut b = blocks.clone();
    b.remove(1);
    assert!(!verify_blocks(&b));
    assert!(verify_blocks(&blocks));
}

#[test]
fn file_round_trip_and_reopen() {
    let ledger = support::mixed_workload(80, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.ndjson");
    std::fs::write(&path, ledger.to_file_string()).unwrap();
    let reopened = Ledger::open(&path).unwrap();
    assert_eq!(reopened.blocks(), ledger.blocks());
    assert_eq!(reopened.state(), ledger.state());
    let lines = ledger.to_lines();
    let mut bad = lines.clone();
    bad[2] = bad[2].replacen("\"height\":2", "\"height\":3", 1);
    assert!(Ledger::from_lines(&bad).is_err());
}
