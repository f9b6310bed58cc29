use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const WINDOW: &str = "256";

fn tcn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tcn"))
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn model(&self) -> PathBuf {
        self.path("m.tcn")
    }

    fn train_files(&self) -> Vec<PathBuf> {
        (0..3)
            .map(|c| self.path(&format!("train/condition_{c}.csv")))
            .collect()
    }
}

/// Synthetic data plus a quickly trained model, shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture {
            dir: TempDir::new().unwrap(),
        };
        ok(tcn()
            .args(["synth", "--window", WINDOW, "--train", "8", "--holdout", "3", "--faults", "3"])
            .arg("--out")
            .arg(f.dir.path())
            .output()
            .unwrap());
        ok(tcn()
            .args(["train", "--window", WINDOW, "--epochs1", "2", "--epochs3", "1", "--model"])
            .arg(f.model())
            .arg("--data")
            .args(f.train_files())
            .output()
            .unwrap());
        f
    })
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn train_reports_stages_and_purity() {
    let f = fixture();
    let out = ok(tcn()
        .args(["train", "--window", WINDOW, "--epochs1", "1", "--epochs3", "1", "--model"])
        .arg(f.path("again.tcn"))
        .arg("--data")
        .args(f.train_files())
        .output()
        .unwrap());
    for needle in ["step 1:", "step 2:", "step 3:", "cluster 2:", "purity:"] {
        assert!(out.contains(needle), "missing {needle} in {out}");
    }
}

#[test]
fn empty_input_yields_header_only() {
    let f = fixture();
    let empty = f.path("empty.csv");
    write(&empty, "");
    let csv = ok(tcn()
        .args(["classify", "--model"])
        .arg(f.model())
        .arg("--data")
        .arg(&empty)
        .output()
        .unwrap());
    assert_eq!(csv, "index,p_0,p_1,p_2,outcome,cluster,alarm\n");
    let jsonl = ok(tcn()
        .args(["classify", "--emit", "jsonl", "--model"])
        .arg(f.model())
        .arg("--data")
        .arg(&empty)
        .output()
        .unwrap());
    assert!(jsonl.is_empty());
}

#[test]
fn classify_emits_one_record_per_window() {
    let f = fixture();
    let out = ok(tcn()
        .args(["classify", "--emit", "jsonl", "--model"])
        .arg(f.model())
        .arg("--data")
        .arg(f.path("holdout"))
        .arg(f.path("faults"))
        .output()
        .unwrap());
    let records: Vec<serde_json::Value> = out
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 18);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["index"], i);
        assert_eq!(r["probabilities"].as_array().unwrap().len(), 3);
        let fault = r["outcome"] == "fault";
        assert_eq!(fault, r["cluster"].is_null());
    }
}

#[test]
fn export_plot_has_k_rows_per_signal() {
    let f = fixture();
    let out_path = f.path("plot.csv");
    ok(tcn()
        .args(["export-plot", "--model"])
        .arg(f.model())
        .arg("--data")
        .arg(f.path("holdout"))
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap());
    let text = std::fs::read_to_string(out_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("signal,cluster,probability,threshold,failure"));
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect();
    assert_eq!(rows.len(), 9 * 3);
    for k in 0..3 {
        let per: Vec<&Vec<String>> = rows.iter().filter(|r| r[1] == k.to_string()).collect();
        assert_eq!(per.len(), 9);
        assert!(per.iter().all(|r| r[3] == per[0][3] && r[4] == per[0][4]));
    }
}

#[test]
fn evaluate_counts_every_signal() {
    let f = fixture();
    let out = ok(tcn()
        .args(["evaluate", "--json", "--model"])
        .arg(f.model())
        .arg("--pristine")
        .arg(f.path("holdout"))
        .arg("--faults")
        .arg(f.path("faults"))
        .output()
        .unwrap());
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    let c = &report["confusion"];
    let total = |a: &str, b: &str| c[a].as_u64().unwrap() + c[b].as_u64().unwrap();
    assert_eq!(total("pristine_accepted", "pristine_rejected"), 9);
    assert_eq!(total("fault_detected", "fault_missed"), 9);
    assert_eq!(report["pristine"].as_array().unwrap().len(), 3);
}

#[test]
fn usage_errors_exit_2() {
    let out = tcn().args(["classify"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = tcn().args(["bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn too_many_clusters_exit_2() {
    let f = fixture();
    let out = tcn()
        .args(["train", "--window", WINDOW, "--k", "100", "--model"])
        .arg(f.path("k.tcn"))
        .arg("--data")
        .args(f.train_files())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.path("k.tcn").exists());
}

#[test]
fn malformed_data_exits_3() {
    let f = fixture();
    let bad = f.path("bad.csv");
    write(&bad, "0.1\nnot-a-number\n");
    let out = tcn()
        .args(["classify", "--model"])
        .arg(f.model())
        .arg("--data")
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let missing = tcn()
        .args(["classify", "--model"])
        .arg(f.path("absent.tcn"))
        .arg("--data")
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn model_version_mismatch_exits_3() {
    let f = fixture();
    let mut bytes = std::fs::read(f.model()).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    let path = f.path("future.tcn");
    std::fs::write(&path, bytes).unwrap();
    let out = tcn()
        .args(["classify", "--model"])
        .arg(&path)
        .arg("--data")
        .arg(f.path("holdout"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn divergence_exits_4() {
    let f = fixture();
    let out = tcn()
        .args(["train", "--window", WINDOW, "--epochs1", "3", "--epochs3", "1", "--lr", "1e30", "--model"])
        .arg(f.path("div.tcn"))
        .arg("--data")
        .args(f.train_files())
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
