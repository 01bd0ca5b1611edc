use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn desk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn sfedkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfedkd"))
        .args(args)
        .output()
        .unwrap()
}

fn out_dir_arg(dir: &Path) -> String {
    format!("output.dir={}", serde_json::to_string(dir).unwrap())
}

const QUICK: [&str; 6] = [
    "--set",
    "train.R=3",
    "--set",
    "dataset.n_per_class=40",
    "--set",
    "train.batch_size=32",
];

#[test]
fn run_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk();
    let dir_arg = out_dir_arg(tmp.path());
    let mut args = vec!["run", cfg.to_str().unwrap(), "--set", &dir_arg];
    args.extend(QUICK);
    let out = sfedkd(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let rounds = std::fs::read_to_string(tmp.path().join("rounds.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = rounds
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["round"], 1);
    assert_eq!(lines[0]["mode"], "sfedkd");
    assert!(lines[0]["teachers"].as_array().unwrap().is_empty());
    assert!(lines[2]["top1"].as_f64().is_some());

    let summary = std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("mode,master_seed,rounds,final_top1"));
    assert_eq!(summary.lines().count(), 2);

    let resolved: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("config.resolved.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(resolved["train"]["R"], 3);
    assert_eq!(resolved["train"]["kd"]["tau_squared"], true);

    let ckpt = std::fs::read(tmp.path().join("model.ckpt")).unwrap();
    assert!(ckpt.starts_with(b"SFKDMLP1"));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    let cfg = desk();
    let dir_arg = out_dir_arg(&first);
    let mut args = vec!["run", cfg.to_str().unwrap(), "--set", &dir_arg];
    args.extend(QUICK);
    assert!(sfedkd(&args).status.success());

    let resolved = first.join("config.resolved.json");
    let dir_arg = out_dir_arg(&second);
    let out = sfedkd(&["run", resolved.to_str().unwrap(), "--set", &dir_arg]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        std::fs::read(first.join("rounds.jsonl")).unwrap(),
        std::fs::read(second.join("rounds.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(first.join("model.ckpt")).unwrap(),
        std::fs::read(second.join("model.ckpt")).unwrap()
    );
}

#[test]
fn too_many_teachers_is_a_config_error() {
    let cfg = desk();
    let out = sfedkd(&["run", cfg.to_str().unwrap(), "--set", "train.K=9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.K"));
}

#[test]
fn unknown_keys_and_missing_files_fail() {
    let out = sfedkd(&["run", desk().to_str().unwrap(), "--set", "train.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sfedkd(&["run", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn select_reports_both_solvers() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("dists.csv");
    std::fs::write(&path, "c0,c1\n1,0\n0,1\n1,0\n0.5,0.5\n").unwrap();
    let p = path.to_str().unwrap();

    let greedy = sfedkd(&["select", p, "--k", "2", "--metric", "L1"]);
    let g: serde_json::Value = serde_json::from_slice(&greedy.stdout).unwrap();
    assert_eq!(g["indices"], serde_json::json!([3, 0]));
    assert_eq!(g["objective"], 0.5);

    let exact = sfedkd(&[
        "select", p, "--k", "2", "--metric", "L1", "--solver", "exact",
    ]);
    let e: serde_json::Value = serde_json::from_slice(&exact.stdout).unwrap();
    assert_eq!(e["indices"], serde_json::json!([0, 1]));
    assert_eq!(e["objective"], 0.0);

    let random = sfedkd(&["select", p, "--k", "3", "--solver", "random", "--seed", "5"]);
    let r: serde_json::Value = serde_json::from_slice(&random.stdout).unwrap();
    assert_eq!(r["indices"].as_array().unwrap().len(), 3);

    let bad = sfedkd(&["select", p, "--k", "7"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn inspect_partition_prints_histograms() {
    let out = sfedkd(&["inspect-partition", desk().to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("client,size,c0,"));
    let rows: Vec<Vec<usize>> = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 20);
    for row in &rows {
        assert_eq!(row[1], row[2..].iter().sum::<usize>());
        assert!(row[2..].iter().filter(|&&n| n > 0).count() <= 2);
    }
    assert_eq!(rows.iter().map(|r| r[1]).sum::<usize>(), 2400);
}

#[test]
fn export_data_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("train.csv");
    let out = sfedkd(&[
        "export-data",
        desk().to_str().unwrap(),
        "--out",
        path.to_str().unwrap(),
        "--set",
        "dataset.dim=2",
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "f0,f1,label");
    assert_eq!(text.lines().count(), 2401);
}
