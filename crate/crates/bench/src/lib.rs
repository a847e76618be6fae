//! Command-line front end for the throughput benchmark.

use std::io::Write;
use std::path::PathBuf;

use bonik_core::bench::{csv_string, run_matrix, run_workload, MatrixConfig, MatrixReport, Workload, WorkloadConfig};
use bonik_core::network::Topology;
use clap::Parser;

/// Closed-loop throughput benchmark over the simulated network.
#[derive(Parser, Debug, Clone, PartialEq)]
#[command(version)]
pub struct Args {
    /// Run every workload, user count and topology.
    #[arg(long, conflicts_with_all = ["workload", "users", "topology"])]
    pub matrix: bool,
    #[arg(long, required_unless_present_any = ["matrix", "config"])]
    pub workload: Option<Workload>,
    #[arg(long)]
    pub users: Option<u32>,
    /// 2O2P, 2O4P or 2O6P.
    #[arg(long)]
    pub topology: Option<Topology>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub duration_s: Option<u64>,
    #[arg(long)]
    pub repetitions: Option<u32>,
    /// JSON workload configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Args {
    pub fn workload_config(&self) -> Result<WorkloadConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => WorkloadConfig::default(),
        };
        if let Some(w) = self.workload {
            cfg.workload = w;
        }
        if let Some(u) = self.users {
            cfg.users = u;
        }
        if let Some(t) = self.topology {
            cfg.topology = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.duration_s {
            cfg.duration_s = d;
        }
        if let Some(r) = self.repetitions {
            cfg.repetitions = r;
        }
        Ok(cfg)
    }
}

fn write_summary(report: &MatrixReport, log: &mut dyn Write) -> std::io::Result<()> {
    for c in &report.cells {
        match &c.outcome {
            Ok(r) => writeln!(log, "{:<8} {:>2} users {}  {:>9.3} tps", c.workload, c.users, c.topology, r.mean_tps)?,
            Err(e) => writeln!(log, "{:<8} {:>2} users {}  failed: {e}", c.workload, c.users, c.topology)?,
        }
    }
    for t in &report.trends {
        writeln!(log, "trend ({}) {}: {} [{}]", t.id, t.description, if t.passed { "PASS" } else { "FAIL" }, t.detail)?;
    }
    for p in &report.calibration {
        let measured = p.measured.map_or("missing".to_owned(), |m| format!("{m:.2}"));
        let dev = p.deviation.map_or(String::new(), |d| format!(" ({:+.1}%)", d * 100.0));
        writeln!(
            log,
            "calibration {} {} {}: {measured} vs {}{dev} {}",
            p.workload,
            p.users,
            p.topology,
            p.reference,
            if p.within_tolerance { "within" } else { "outside" }
        )?;
    }
    Ok(())
}

/// Runs the benchmark, writes CSV to `--out` or `out` and a summary to `log`.
/// Returns false when a matrix cell failed or a trend check did not hold.
pub fn run(args: &Args, out: &mut dyn Write, log: &mut dyn Write) -> Result<bool, String> {
    let cfg = args.workload_config()?;
    let (csv, ok) = if args.matrix {
        let report = run_matrix(&MatrixConfig { base: cfg, ..MatrixConfig::default() });
        write_summary(&report, log).map_err(|e| e.to_string())?;
        let ok = report.failed_cells().is_empty() && report.trends_pass();
        (csv_string(&report.reports()).map_err(|e| e.to_string())?, ok)
    } else {
        let report = run_workload(&cfg).map_err(|e| e.to_string())?;
        writeln!(
            log,
            "{} {} users {}: {} committed, {} aborted, {:.3} tps",
            report.workload, report.users, report.topology, report.committed_count, report.aborted_count, report.mean_tps
        )
        .map_err(|e| e.to_string())?;
        (csv_string(&[report]).map_err(|e| e.to_string())?, true)
    };
    match &args.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| format!("{}: {e}", p.display()))?,
        None => out.write_all(csv.as_bytes()).map_err(|e| e.to_string())?,
    }
    Ok(ok)
}
