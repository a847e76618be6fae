mod support;

use bonik_core::chaincode::{balance_key, trans_func, MemoryState, Status, TransferData, INITIAL_BALANCE};
use proptest::prelude::*;

fn two_accounts(from: u64, to: u64) -> (MemoryState, TransferData) {
    let (_, users) = support::ledger_with_accounts(2);
    let mut state = MemoryState::default();
    state.0.insert(balance_key(&users[0].1), from.to_string());
    state.0.insert(balance_key(&users[1].1), to.to_string());
    let data = TransferData { user_name: "u0".into(), from_acc: users[0].1.clone(), to_acc: users[1].1.clone(), amount: 0 };
    (state, data)
}

#[test]
fn transfer_of_whole_balance_aborts() {
    let (mut state, mut data) = two_accounts(10_000, 10_000);
    data.amount = 10_000;
    let before = state.clone();
    assert_eq!(trans_func(&mut state, &data).status, Status::TransactionAborted);
    assert_eq!(state, before);
}

#[test]
fn transfer_leaving_one_unit_succeeds() {
    let (mut state, mut data) = two_accounts(10_000, 10_000);
    data.amount = 9_999;
    assert_eq!(trans_func(&mut state, &data).status, Status::TransactionSuccessful);
    assert_eq!(state.0[&balance_key(&data.from_acc)], "1");
    assert_eq!(state.0[&balance_key(&data.to_acc)], "19999");
}

fn ops(accounts: usize) -> impl Strategy<Value = Vec<(usize, usize, u64)>> {
    prop::collection::vec((0..accounts, 0..accounts, prop_oneof![1u64..200, 1u64..15_000, Just(10_000u64)]), 1..60)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn transfers_conserve_and_match_the_oracle(ops in ops(10), block_size in 1usize..16) {
        let (ledger, balances, ok) = support::ledger_replay(&ops, 10, block_size);
        let (expected, expected_ok) = support::naive_replay(&support::initial_balances(10), &ops);
        prop_assert_eq!(balances.values().sum::<u64>(), 10 * INITIAL_BALANCE);
        prop_assert_eq!(&balances, &expected);
        prop_assert_eq!(ok, expected_ok);
        prop_assert!(ledger.verify_chain());
    }
}
