use bonik_bench::{run, Args};
use clap::Parser;

fn args(line: &str) -> Result<Args, clap::Error> {
    Args::try_parse_from(std::iter::once("bonik-bench").chain(line.split_whitespace()))
}

#[test]
fn single_workload_writes_csv() {
    let a = args("--workload query --users 10 --topology 2O4P --duration-s 5 --repetitions 2 --seed 1").unwrap();
    let (mut out, mut log) = (Vec::new(), Vec::new());
    assert!(run(&a, &mut out, &mut log).unwrap());
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "workload,users,topology,repetition,committed,aborted,elapsed_ms,tps");
    assert!(lines[2].starts_with("query,10,2O4P,2,1000,0,5000,200.0000"), "{}", lines[2]);
    assert!(String::from_utf8(log).unwrap().contains("200.000 tps"));
}

#[test]
fn out_file_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("w.json");
    std::fs::write(&cfg, r#"{"workload": "create", "users": 20, "duration_s": 3, "repetitions": 1}"#).unwrap();
    let out = dir.path().join("out.csv");
    let a = args(&format!("--config {} --out {}", cfg.display(), out.display())).unwrap();
    assert!(a.workload.is_none());
    assert!(run(&a, &mut Vec::new(), &mut Vec::new()).unwrap());
    let text = std::fs::read_to_string(out).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("create,20,2O2P,1,"));
}

#[test]
fn rejects_bad_arguments() {
    assert!(args("").is_err());
    assert!(args("--workload mint").is_err());
    assert!(args("--workload create --topology 3O3P").is_err());
    assert!(args("--matrix --users 10").is_err());
    let a = args("--workload create --users 60").unwrap();
    assert!(run(&a, &mut Vec::new(), &mut Vec::new()).unwrap_err().contains("10..=50"));
}
