use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn geoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SQUARE_2_2_2: &str = r#"
seed = 11
output_dir = "out"

[network]
widths = [2, 2, 2]

[dataset]
law = "gaussian"
n = 6

[stop]
rule = "time_limit"
value = 6.0
require_completion = true
"#;

#[test]
fn run_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = geoflow(&[
        "run",
        &config("overparam.toy"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["trajectory.csv", "verification.json", "run.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = out.join("trajectory.csv");
    let res = geoflow(&["verify", csv.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stdout));
    assert!(String::from_utf8_lossy(&res.stdout).contains("\"rate\""));

    // break monotonicity in a copy without a run record
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut cells: Vec<String> = lines[20].split(',').map(str::to_string).collect();
    let c: f64 = cells[1].parse().unwrap();
    cells[1] = format!("{:e}", c * 3.0);
    lines[20] = cells.join(",");
    let tampered = write(dir.path(), "tampered.csv", &(lines.join("\n") + "\n"));
    let res = geoflow(&["verify", &tampered, "--flow", "overparam"]);
    assert_eq!(code(&res), 1);
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = geoflow(&[
        "run",
        &config("overparam.toy"),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
        "--eps",
        "1e-6",
        "--flow",
        "standard",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 3);
    assert_eq!(record["flow"], "standard");
}

#[test]
fn gen_data_writes_csv_pair() {
    let dir = tempfile::tempdir().unwrap();
    let res = geoflow(&[
        "gen-data",
        "-m",
        "2",
        "-q",
        "3",
        "-n",
        "5",
        "--law",
        "grid",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0);
    let inputs = std::fs::read_to_string(dir.path().join("inputs.csv")).unwrap();
    assert_eq!(inputs.lines().count(), 6);
    assert!(dir.path().join("outputs.csv").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        "seed = 1\n[network]\nwidths = [1]\n",
    );
    assert_eq!(code(&geoflow(&["run", &bad])), 2);
    assert_eq!(code(&geoflow(&["run", "/nonexistent/config.toml"])), 2);
    let res = geoflow(&["gen-data", "-m", "1", "-q", "4", "-n", "2"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn compare_requires_shared_setup() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read_to_string(config("overparam.toy")).unwrap();
    let b = a.replace("seed = 7", "seed = 8");
    let a = write(dir.path(), "a.toml", &a);
    let b = write(dir.path(), "b.toml", &b);
    let res = geoflow(&["compare", &a, &b]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("share"));
}

#[test]
fn compare_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let res = geoflow(&[
        "compare",
        &config("standard-vs-modified.toy"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let table = String::from_utf8_lossy(&res.stdout);
    assert!(table.lines().any(|l| l.starts_with("standard")));
    assert!(table.lines().any(|l| l.starts_with("overparam")));
    assert!(dir.path().join("comparison.csv").exists());
}

#[test]
fn rank_loss_with_required_completion_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "square.toml", SQUARE_2_2_2);
    let res = geoflow(&["run", &cfg]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stdout));
    let relaxed = write(
        dir.path(),
        "relaxed.toml",
        &SQUARE_2_2_2.replace("require_completion = true", ""),
    );
    assert_eq!(code(&geoflow(&["run", &relaxed])), 1);
}
