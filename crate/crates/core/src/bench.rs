//! Closed-loop workload driver over the virtual-time simulator.
//!
//! Each synthetic client keeps at most one request in flight and never
//! submits more often than `send_rate_per_user_tps`. A repetition runs for
//! `duration_s` virtual seconds; only requests that complete inside that
//! window are counted.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chaincode::{account_key, balance_key, AccountNumber, BalData, Credentials, Request, Response, Status, TransferData};
use crate::crypto::hash;
use crate::ledger::Ledger;
use crate::network::sim::{Completion, Micros, Simulator, Ticket};
use crate::network::{BatchPolicy, Certificate, LatencyProfile, Msp, NetworkConfig, NetworkCore, NetworkError, Role, Topology};

pub const CSV_HEADER: &str = "workload,users,topology,repetition,committed,aborted,elapsed_ms,tps";
pub const MATRIX_USERS: [u32; 5] = [10, 20, 30, 40, 50];

/// Published TPS figures the shipped latency profile is tuned against.
pub const CALIBRATION_REFERENCES: [(Workload, u32, &str, f64); 6] = [
    (Workload::Create, 10, "2O2P", 8.6),
    (Workload::Create, 50, "2O2P", 37.98),
    (Workload::Create, 50, "2O6P", 28.14),
    (Workload::Transfer, 50, "2O2P", 36.72),
    (Workload::Query, 10, "2O2P", 286.16),
    (Workload::Query, 50, "2O2P", 194.9),
];
pub const CALIBRATION_TOLERANCE: f64 = 0.30;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid workload configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("no reports to write")]
    EmptyReports,
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    Create,
    Transfer,
    Query,
}

impl Workload {
    pub const ALL: [Workload; 3] = [Workload::Create, Workload::Transfer, Workload::Query];

    pub fn as_str(&self) -> &'static str {
        match self {
            Workload::Create => "create",
            Workload::Transfer => "transfer",
            Workload::Query => "query",
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Workload {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "create" => Ok(Workload::Create),
            "transfer" => Ok(Workload::Transfer),
            "query" => Ok(Workload::Query),
            other => Err(BenchError::Config(format!("unknown workload {other:?} (create, transfer or query)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub workload: Workload,
    pub users: u32,
    pub topology: Topology,
    pub send_rate_per_user_tps: f64,
    pub duration_s: u64,
    pub repetitions: u32,
    pub seed: u64,
    pub latency: LatencyProfile,
    pub batch: BatchPolicy,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            workload: Workload::Create,
            users: 10,
            topology: Topology::default(),
            send_rate_per_user_tps: 20.0,
            duration_s: 60,
            repetitions: 5,
            seed: 42,
            latency: LatencyProfile::calibrated(),
            batch: BatchPolicy::default(),
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if !(10..=50).contains(&self.users) {
            return Err(BenchError::Config(format!("users must be in 10..=50, got {}", self.users)));
        }
        if self.repetitions == 0 {
            return Err(BenchError::Config("repetitions must be at least 1".into()));
        }
        if !(self.send_rate_per_user_tps.is_finite() && self.send_rate_per_user_tps > 0.0) {
            return Err(BenchError::Config("send rate must be positive".into()));
        }
        if self.duration_s == 0 {
            return Err(BenchError::Config("duration must be positive".into()));
        }
        self.network().validate()?;
        Ok(())
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig { topology: self.topology, latency: self.latency, batch: self.batch }
    }

    fn interval_us(&self) -> Micros {
        ((1e6 / self.send_rate_per_user_tps).round() as Micros).max(1)
    }

    fn repetition_seed(&self, repetition: u32) -> u64 {
        self.seed.wrapping_add(u64::from(repetition))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    /// 1-based.
    pub repetition: u32,
    pub seed: u64,
    pub offered: u64,
    pub committed: u64,
    pub aborted: u64,
    /// Submitted but not complete when the window closed.
    pub in_flight: u64,
    pub elapsed_ms: u64,
    pub tps: f64,
    pub blocks_during_run: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub workload: Workload,
    pub users: u32,
    pub topology: String,
    pub repetitions: Vec<RepetitionReport>,
    pub committed_count: u64,
    pub aborted_count: u64,
    pub virtual_elapsed_ms: u64,
    pub tps: f64,
    pub mean_tps: f64,
}

struct Client {
    cert: Certificate,
    user: String,
    account: Option<AccountNumber>,
    last_submit: Micros,
    sent: u64,
}

fn is_success(response: &Response) -> bool {
    matches!(response.status, Status::True | Status::TransactionSuccessful | Status::Balance(_))
}

fn tps(committed: u64, elapsed_ms: u64) -> f64 {
    if elapsed_ms == 0 {
        0.0
    } else {
        committed as f64 * 1000.0 / elapsed_ms as f64
    }
}

fn registration(name: String) -> Request {
    let h = hash(name.as_bytes());
    Request::Registration(Credentials { user_name: name, h })
}

/// Runs one repetition and hands back the simulator for inspection.
pub fn simulate_repetition(cfg: &WorkloadConfig, repetition: u32) -> Result<(RepetitionReport, Simulator), BenchError> {
    cfg.validate()?;
    let seed = cfg.repetition_seed(repetition);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let core = NetworkCore::new(cfg.network(), Msp::seeded(seed), Ledger::new())?;
    let mut sim = Simulator::new(core);
    let users = cfg.users as usize;

    let mut clients = Vec::with_capacity(users);
    for i in 0..users {
        let id = sim.core_mut().register_identity(&format!("bench-client-{i}"), Role::Gateway)?;
        clients.push(Client { cert: id.certificate, user: format!("user-{i}"), account: None, last_submit: 0, sent: 0 });
    }

    if cfg.workload != Workload::Create {
        for c in &clients {
            sim.submit_transaction(&c.cert, registration(c.user.clone()))?;
        }
        for done in sim.run_until_idle()? {
            if let Completion::Committed { valid, response, .. } = &done {
                if !(*valid && response.as_ref().is_some_and(is_success)) {
                    return Err(BenchError::Setup(format!("account registration failed: {response:?}")));
                }
            }
        }
        for c in &mut clients {
            let acc = sim.core().ledger().get_state(&account_key(&c.user)).and_then(|a| a.parse().ok());
            c.account = Some(acc.ok_or_else(|| BenchError::Setup(format!("no account for {}", c.user)))?);
        }
    }

    sim.set_concurrent_clients(users);
    let interval = cfg.interval_us();
    let start = sim.now();
    let end = start + cfg.duration_s * 1_000_000;
    let height_before = sim.core().ledger().height();
    let accounts: Vec<AccountNumber> = clients.iter().filter_map(|c| c.account.clone()).collect();

    let mut wakes: BinaryHeap<Reverse<(Micros, usize)>> = (0..users).map(|i| Reverse((start, i))).collect();
    let mut owner: HashMap<Ticket, usize> = HashMap::new();
    let (mut offered, mut committed, mut aborted) = (0u64, 0u64, 0u64);

    loop {
        let next_client = wakes.peek().map(|Reverse((t, _))| *t);
        let next_sim = sim.next_event_time();
        // completions first on ties, so a freed client can resubmit at once
        let sim_first = match (next_sim, next_client) {
            (Some(s), Some(c)) => s <= c,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        if sim_first {
            let t = next_sim.expect("checked");
            if t > end {
                break;
            }
            for done in sim.advance_to(t)? {
                let (ticket, ok, at) = match &done {
                    Completion::Committed { ticket, valid, response, completed_at, .. } => {
                        (*ticket, *valid && response.as_ref().is_some_and(is_success), *completed_at)
                    }
                    Completion::Read { ticket, response, completed_at, .. } => (*ticket, is_success(response), *completed_at),
                    Completion::BlockCommitted { .. } => continue,
                };
                if ok {
                    committed += 1;
                } else {
                    aborted += 1;
                }
                if let Some(i) = owner.remove(&ticket) {
                    wakes.push(Reverse((at.max(clients[i].last_submit + interval), i)));
                }
            }
        } else {
            let Reverse((t, i)) = wakes.pop().expect("checked");
            if t > end {
                break;
            }
            sim.advance_to(t)?;
            let c = &mut clients[i];
            let request = match cfg.workload {
                Workload::Create => registration(format!("{}-{}", c.user, c.sent)),
                Workload::Query => Request::BalQuery(BalData {
                    user_name: c.user.clone(),
                    account_num: c.account.clone().expect("set up"),
                }),
                Workload::Transfer => {
                    let from = c.account.clone().expect("set up");
                    let mut j = rng.gen_range(0..accounts.len() - 1);
                    if accounts[j] == from {
                        j = accounts.len() - 1;
                    }
                    Request::Transfer(TransferData {
                        user_name: c.user.clone(),
                        from_acc: from,
                        to_acc: accounts[j].clone(),
                        amount: rng.gen_range(1..=100),
                    })
                }
            };
            let ticket = sim.submit_transaction(&c.cert, request)?;
            c.last_submit = t;
            c.sent += 1;
            offered += 1;
            owner.insert(ticket, i);
        }
    }

    let elapsed_ms = (end - start) / 1000;
    let report = RepetitionReport {
        repetition: repetition + 1,
        seed,
        offered,
        committed,
        aborted,
        in_flight: owner.len() as u64,
        elapsed_ms,
        tps: tps(committed, elapsed_ms),
        blocks_during_run: sim.core().ledger().height() - height_before,
    };
    Ok((report, sim))
}

/// Sum of balances over the bench accounts `user-0 .. user-{n-1}`.
pub fn bench_balance_sum(sim: &Simulator, users: u32) -> Option<u64> {
    let ledger = sim.core().ledger();
    (0..users)
        .map(|i| {
            let acc: AccountNumber = ledger.get_state(&account_key(&format!("user-{i}")))?.parse().ok()?;
            ledger.get_state(&balance_key(&acc))?.parse::<u64>().ok()
        })
        .sum()
}

pub fn run_workload(cfg: &WorkloadConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let repetitions = (0..cfg.repetitions)
        .map(|r| simulate_repetition(cfg, r).map(|(rep, _)| rep))
        .collect::<Result<Vec<_>, _>>()?;
    let committed_count = repetitions.iter().map(|r| r.committed).sum();
    let aborted_count = repetitions.iter().map(|r| r.aborted).sum();
    let virtual_elapsed_ms = repetitions.iter().map(|r| r.elapsed_ms).sum();
    let mean_tps = repetitions.iter().map(|r| r.tps).sum::<f64>() / repetitions.len() as f64;
    Ok(BenchReport {
        workload: cfg.workload,
        users: cfg.users,
        topology: cfg.topology.to_string(),
        repetitions,
        committed_count,
        aborted_count,
        virtual_elapsed_ms,
        tps: tps(committed_count, virtual_elapsed_ms),
        mean_tps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixConfig {
    pub workloads: Vec<Workload>,
    pub users: Vec<u32>,
    pub topologies: Vec<Topology>,
    /// Rate, duration, repetitions, seed, latency and batch for every cell.
    pub base: WorkloadConfig,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            workloads: Workload::ALL.to_vec(),
            users: MATRIX_USERS.to_vec(),
            topologies: Topology::PRESETS.iter().map(|p| Topology::preset(p).expect("preset")).collect(),
            base: WorkloadConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub workload: Workload,
    pub users: u32,
    pub topology: String,
    pub outcome: Result<BenchReport, String>,
}

impl CellResult {
    pub fn tps(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|r| r.mean_tps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendVerdict {
    pub id: &'static str,
    pub description: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationPoint {
    pub workload: Workload,
    pub users: u32,
    pub topology: &'static str,
    pub reference: f64,
    pub measured: Option<f64>,
    /// (measured − reference) / reference.
    pub deviation: Option<f64>,
    pub within_tolerance: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixReport {
    pub cells: Vec<CellResult>,
    pub trends: Vec<TrendVerdict>,
    pub calibration: Vec<CalibrationPoint>,
}

impl MatrixReport {
    pub fn cell(&self, workload: Workload, users: u32, topology: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.workload == workload && c.users == users && c.topology == topology)
    }

    pub fn reports(&self) -> Vec<BenchReport> {
        self.cells.iter().filter_map(|c| c.outcome.as_ref().ok().cloned()).collect()
    }

    pub fn failed_cells(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.outcome.is_err()).collect()
    }

    pub fn trends_pass(&self) -> bool {
        self.trends.iter().all(|t| t.passed)
    }
}

/// Runs every workload × users × topology cell. A failing cell is recorded
/// and the matrix carries on.
pub fn run_matrix(cfg: &MatrixConfig) -> MatrixReport {
    let mut cells = Vec::new();
    for &workload in &cfg.workloads {
        for &users in &cfg.users {
            for &topology in &cfg.topologies {
                let wc = WorkloadConfig { workload, users, topology, ..cfg.base.clone() };
                cells.push(CellResult {
                    workload,
                    users,
                    topology: topology.to_string(),
                    outcome: run_workload(&wc).map_err(|e| e.to_string()),
                });
            }
        }
    }
    let mut report = MatrixReport { cells, trends: Vec::new(), calibration: Vec::new() };
    report.trends = evaluate_trends(&report);
    report.calibration = calibration(&report);
    report
}

fn fmt_tps(v: Option<f64>) -> String {
    v.map_or_else(|| "missing".to_owned(), |v| format!("{v:.2}"))
}

pub fn evaluate_trends(m: &MatrixReport) -> Vec<TrendVerdict> {
    let tps = |w, u, t: &str| m.cell(w, u, t).and_then(CellResult::tps);
    let mut out = Vec::new();

    let (lo, hi) = (tps(Workload::Create, 10, "2O2P"), tps(Workload::Create, 50, "2O2P"));
    out.push(TrendVerdict {
        id: "a",
        description: "create TPS at 2O2P increases from 10 to 50 users",
        passed: matches!((lo, hi), (Some(a), Some(b)) if b > a),
        detail: format!("10 users {} -> 50 users {}", fmt_tps(lo), fmt_tps(hi)),
    });

    let (p2, p6) = (tps(Workload::Create, 50, "2O2P"), tps(Workload::Create, 50, "2O6P"));
    out.push(TrendVerdict {
        id: "b",
        description: "create TPS at 50 users decreases from 2O2P to 2O6P",
        passed: matches!((p2, p6), (Some(a), Some(b)) if b < a),
        detail: format!("2O2P {} -> 2O6P {}", fmt_tps(p2), fmt_tps(p6)),
    });

    let mut worst: Option<(f64, u32, String)> = None;
    let mut matched = 0;
    let mut ok = true;
    for c in m.cells.iter().filter(|c| c.workload == Workload::Query) {
        let (Some(q), Some(t)) = (c.tps(), tps(Workload::Transfer, c.users, &c.topology)) else {
            continue;
        };
        matched += 1;
        let ratio = if t > 0.0 { q / t } else { f64::INFINITY };
        ok &= ratio >= 3.0;
        if worst.as_ref().is_none_or(|w| ratio < w.0) {
            worst = Some((ratio, c.users, c.topology.clone()));
        }
    }
    out.push(TrendVerdict {
        id: "c",
        description: "query TPS is at least 3x transfer TPS in every matching cell",
        passed: ok && matched > 0,
        detail: match worst {
            Some((r, u, t)) => format!("{matched} cells, lowest ratio {r:.2}x at {u} users {t}"),
            None => "no matching cells".into(),
        },
    });

    let (lo, hi) = (tps(Workload::Query, 10, "2O2P"), tps(Workload::Query, 50, "2O2P"));
    out.push(TrendVerdict {
        id: "d",
        description: "query TPS at 2O2P decreases from 10 to 50 users",
        passed: matches!((lo, hi), (Some(a), Some(b)) if b < a),
        detail: format!("10 users {} -> 50 users {}", fmt_tps(lo), fmt_tps(hi)),
    });
    out
}

pub fn calibration(m: &MatrixReport) -> Vec<CalibrationPoint> {
    CALIBRATION_REFERENCES
        .iter()
        .map(|&(workload, users, topology, reference)| {
            let measured = m.cell(workload, users, topology).and_then(CellResult::tps);
            let deviation = measured.map(|v| (v - reference) / reference);
            CalibrationPoint {
                workload,
                users,
                topology,
                reference,
                measured,
                deviation,
                within_tolerance: deviation.is_some_and(|d| d.abs() <= CALIBRATION_TOLERANCE),
            }
        })
        .collect()
}

/// CSV text, one row per repetition.
pub fn csv_string(reports: &[BenchReport]) -> Result<String, BenchError> {
    if reports.is_empty() {
        return Err(BenchError::EmptyReports);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))?;
    for r in reports {
        for rep in &r.repetitions {
            w.write_record([
                r.workload.to_string(),
                r.users.to_string(),
                r.topology.clone(),
                rep.repetition.to_string(),
                rep.committed.to_string(),
                rep.aborted.to_string(),
                rep.elapsed_ms.to_string(),
                format!("{:.4}", rep.tps),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV is ASCII"))
}

pub fn emit_csv(reports: &[BenchReport], path: impl AsRef<Path>) -> Result<(), BenchError> {
    let text = csv_string(reports)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(workload: Workload, users: u32, topology: &str) -> WorkloadConfig {
        WorkloadConfig {
            workload,
            users,
            topology: topology.parse().unwrap(),
            duration_s: 10,
            repetitions: 1,
            ..WorkloadConfig::default()
        }
    }

    #[test]
    fn config_bounds() {
        for (users, ok) in [(9, false), (10, true), (50, true), (51, false)] {
            assert_eq!(WorkloadConfig { users, ..WorkloadConfig::default() }.validate().is_ok(), ok);
        }
        assert!(WorkloadConfig { repetitions: 0, ..WorkloadConfig::default() }.validate().is_err());
        assert!(WorkloadConfig { send_rate_per_user_tps: 0.0, ..WorkloadConfig::default() }.validate().is_err());
        assert!("bogus".parse::<Workload>().is_err());
        let cfg: Result<WorkloadConfig, _> = serde_json::from_str(r#"{"topology": "3O9P"}"#);
        assert!(cfg.is_err());
    }

    #[test]
    fn single_client_cycle_matches_the_latency_model() {
        // one block per cycle: endorse 8 + timeout 1000 + order 6+4·10+70·2 + commit 6 = 1200 ms
        let (r, _) = simulate_repetition(&quick(Workload::Create, 10, "2O2P"), 0).unwrap();
        assert_eq!(r.committed, 10 * (10_000 / 1200));
        assert_eq!(r.aborted, 0);
        assert_eq!(r.offered, r.committed + r.in_flight);
        assert!((r.tps - r.committed as f64 / 10.0).abs() < 1e-9);
    }

    #[test]
    fn queries_never_commit_and_respect_the_rate_cap() {
        let (r, _) = simulate_repetition(&quick(Workload::Query, 10, "2O2P"), 0).unwrap();
        assert_eq!(r.blocks_during_run, 0);
        assert_eq!(r.committed, 10 * 200);
        assert!(r.tps <= 10.0 * 20.0);
    }

    #[test]
    fn transfers_conserve_balance() {
        let cfg = quick(Workload::Transfer, 20, "2O4P");
        let (r, sim) = simulate_repetition(&cfg, 0).unwrap();
        assert!(r.committed > 0);
        assert_eq!(bench_balance_sum(&sim, 20), Some(20 * 10_000));
        assert!(sim.core().ledger().verify_chain());
    }

    #[test]
    fn same_seed_same_report() {
        let cfg = WorkloadConfig { repetitions: 2, ..quick(Workload::Transfer, 10, "2O2P") };
        assert_eq!(run_workload(&cfg).unwrap(), run_workload(&cfg).unwrap());
    }

    #[test]
    fn csv_shape() {
        assert!(matches!(csv_string(&[]), Err(BenchError::EmptyReports)));
        let cfg = WorkloadConfig { repetitions: 2, ..quick(Workload::Create, 10, "2O2P") };
        let r = run_workload(&cfg).unwrap();
        let text = csv_string(&[r.clone()]).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("create,10,2O2P,1,"), "{}", lines[1]);
        assert_eq!(text, csv_string(&[r]).unwrap());
    }

    #[test]
    fn matrix_marks_failed_cells_and_continues() {
        let cfg = MatrixConfig {
            workloads: vec![Workload::Create],
            users: vec![5, 10],
            topologies: vec![Topology::default()],
            base: WorkloadConfig { duration_s: 3, repetitions: 1, ..WorkloadConfig::default() },
        };
        let m = run_matrix(&cfg);
        assert_eq!(m.cells.len(), 2);
        assert_eq!(m.failed_cells().len(), 1);
        assert!(m.cell(Workload::Create, 10, "2O2P").unwrap().outcome.is_ok());
        assert!(!m.trends_pass());
    }
}
