use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_splitfed");

/// A run small enough for debug-free test builds.
const SMALL: &[&str] = &[
    "--network", "unet", "--base-width", "4", "--depth", "2", "--input-size", "16", "--num-classes", "3",
    "--client-counts", "6,8", "--test-count", "4", "--global-rounds", "2", "--local-epochs", "1", "--seed", "7",
];

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn small(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success() || !extra.is_empty(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn config_errors_exit_with_2() {
    let o = run(&["train-splitfed", "--global-rounds", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("network"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"network": "unet", "trainig": {}}"#).unwrap();
    let o = run(&["train-centralized", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trainig"));
}

#[test]
fn splitfed_runs_are_reproducible_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    small("train-splitfed", &a, &[]);
    small("train-splitfed", &b, &[]);
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
    let echoed = |d: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&read(&d.join("config.json"))).unwrap();
        v.as_object_mut().unwrap().remove("output_dir");
        v
    };
    assert_eq!(echoed(&a), echoed(&b));
    assert!(!a.join("RUNNING").exists() && !a.join("FAILED").exists());
    let masks: Vec<_> = fs::read_dir(a.join("masks")).unwrap().collect();
    assert_eq!(masks.len(), 12);

    // The echoed config alone reproduces the run.
    let c = dir.path().join("c");
    let cfg = a.join("config.json");
    let o = run(&["train-splitfed", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(c.join("metrics.jsonl")).unwrap());
}

#[test]
fn report_tabulates_all_three_regimes() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["train-centralized", "train-local", "train-splitfed"]
        .iter()
        .map(|cmd| {
            let d = dir.path().join(cmd);
            small(cmd, &d, &[]);
            d
        })
        .collect();
    let out = dir.path().join("report");
    let mut args = vec!["report", "--out", out.to_str().unwrap(), "--costs", "--cost-input-size", "64", "--runs"];
    args.extend(runs.iter().map(|r| r.to_str().unwrap()));
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = read(&out.join("summary.txt"));
    let mut lines = table.lines();
    assert!(lines.next().unwrap().split_whitespace().eq(["network", "C", "L", "S"]));
    let row: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(row[0], "unet");
    assert!(row[1..].iter().all(|v| v.parse::<f64>().is_ok()));
    assert_eq!(read(&out.join("costs.csv")).lines().count(), 5);
    assert!(read(&runs[1].join("metrics.jsonl")).lines().count() >= 2 * 3);
}

#[test]
fn plan_split_reports_infeasibility_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = small("plan-split", dir.path(), &["--max-client-share", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(dir.path().join("infeasible.txt").exists());
    assert!(dir.path().join("FAILED").exists());
    let o = small("plan-split", dir.path(), &["--max-client-share", "0.5"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("recommended plan"));
    assert!(!dir.path().join("FAILED").exists());
}

#[test]
fn generated_data_directory_trains() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&["gen-data", "--out", data.to_str().unwrap(), "--samples", "18", "--size", "16", "--classes", "3"]);
    assert!(o.status.success());
    assert_eq!(fs::read_dir(data.join("masks")).unwrap().count(), 18);
    let o = small("train-centralized", &dir.path().join("run"), &["--data-dir", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn serve_and_clients_reproduce_inproc_run() {
    let dir = tempfile::tempdir().unwrap();
    let inproc = dir.path().join("inproc");
    small("train-splitfed", &inproc, &[]);

    let server_dir = dir.path().join("server");
    let mut args = vec!["serve", "--out", server_dir.to_str().unwrap(), "--address", "127.0.0.1:0"];
    args.extend_from_slice(SMALL);
    let mut server = Command::new(BIN).args(&args).stdout(Stdio::piped()).spawn().unwrap();
    let mut first = String::new();
    BufReader::new(server.stdout.as_mut().unwrap()).read_line(&mut first).unwrap();
    let addr = first.trim().strip_prefix("listening on ").unwrap().to_string();

    let clients: Vec<_> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("client{i}"));
            let id = i.to_string();
            let mut args = vec!["client", "--client-id", id.as_str(), "--address", addr.as_str(), "--out", out.to_str().unwrap()];
            args.extend_from_slice(SMALL);
            Command::new(BIN).args(&args).stdout(Stdio::null()).spawn().unwrap()
        })
        .collect();
    for mut c in clients {
        assert!(c.wait().unwrap().success());
    }
    assert!(server.wait().unwrap().success());
    assert_eq!(read(&server_dir.join("metrics.jsonl")), read(&inproc.join("metrics.jsonl")));
    assert_eq!(read(&server_dir.join("history.json")), read(&inproc.join("history.json")));
}
