//! BONIK core: a permissioned-ledger simulator with system and bank
//! chaincode, the dApp gateway's protocol logic, a deterministic rule-based
//! NLU engine, and a throughput benchmark over the simulator's virtual clock.

pub mod bench;
pub mod chaincode;
pub mod crypto;
pub mod gateway;
pub mod ledger;
pub mod network;
pub mod nlu;
