use std::path::Path;
use std::process::Command;

const CONFIG: &str = "\
[run]
name = smoke
strategy = mlmoc
seeds = 5
initial_labeled = 10
query_batch = 4
subset_size = 40
cycles = 3

[data]
kind = two_gaussians
train_per_class = 60
test_per_class = 100
separation = 2.0

[network]
hidden = 32

[train]
learning_rate = 0.2
epochs = 10
minibatch_size = 16
";

fn ntkal(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ntkal")).args(args).output().unwrap()
}

fn accuracy_column(csv: &Path) -> Vec<String> {
    std::fs::read_to_string(csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            format!("{},{},{}", f[0], f[1], f[2])
        })
        .collect()
}

#[test]
fn run_writes_csv_and_summary_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.conf");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out1 = dir.path().join("a");
    let o = ntkal(&["run", "--config", cfg.to_str().unwrap(), "--out", out1.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = out1.join("smoke_seed5.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(
        lines[0],
        "cycle,labeled_size,test_accuracy,query_seconds,train_seconds,strategy,seed,degenerate_skipped"
    );

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out1.join("smoke_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["records"].as_array().unwrap().len(), 3);
    assert!(summary["summary"][0]["final_accuracy"].is_number());
    assert_eq!(summary["config_echo"]["seeds"][0], 5);

    // same config again, then from the echoed config
    let out2 = dir.path().join("b");
    let o = ntkal(&["run", "--config", cfg.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(accuracy_column(&csv), accuracy_column(&out2.join("smoke_seed5.csv")));

    let out3 = dir.path().join("c");
    let echo = out1.join("smoke_summary.json");
    let o = ntkal(&["run", "--config", echo.to_str().unwrap(), "--out", out3.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(accuracy_column(&csv), accuracy_column(&out3.join("smoke_seed5.csv")));

    let svg = dir.path().join("plot.svg");
    let o = ntkal(&["report", "--in", csv.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
}

#[test]
fn bad_config_exits_2_with_valid_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, CONFIG.replace("strategy = mlmoc", "strategy = coreset")).unwrap();
    let o = ntkal(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("mlmoc") && err.contains("margin"), "{err}");
}

#[test]
fn runtime_failure_exits_1_with_cycle_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("div.conf");
    std::fs::write(&cfg, CONFIG.replace("learning_rate = 0.2", "learning_rate = 10000")).unwrap();
    let o = ntkal(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("cycle 0") && err.contains("diverged"), "{err}");
}

#[test]
fn bench_rejects_zero_reps_and_reports_speedup() {
    let o = ntkal(&["bench", "block-vs-direct", "--l", "10", "--u", "5", "--reps", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ntkal(&["bench", "block-vs-direct", "--l", "40", "--u", "20", "--width", "32", "--json"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["fast_seconds"].as_array().unwrap().len(), 5);
    assert!(report["speedup"].as_f64().unwrap() > 0.0);
}
