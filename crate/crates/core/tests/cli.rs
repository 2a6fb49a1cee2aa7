use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &["--set", "users=120", "--set", "items=30", "--set", "missing=0.5"];

fn blc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = blc(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn with(base: &[&'static str], extra: &[&'static str]) -> Vec<&'static str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn train_is_reproducible_and_thread_independent() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &with(&["train", "--run-id", "a", "--threads", "1"], SMALL));
    ok(d, &with(&["train", "--run-id", "b", "--threads", "4"], SMALL));
    for f in [
        "model.csv",
        "assignment.csv",
        "aggregates.csv",
        "trace.csv",
        "joint_trace.csv",
        "train_summary.json",
        "model_meta.json",
    ] {
        assert_eq!(read(d.join("runs/a").join(f)), read(d.join("runs/b").join(f)), "{f}");
    }
    assert!(read(d.join("runs/a/timings.csv")).starts_with("phase,n,m,p,d,seconds\n"));
}

#[test]
fn joint_trace_file_descends() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &with(&["train", "--set", "nyms=4"], SMALL));
    let text = read(d.join("runs/run/joint_trace.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,pass,event,objective"));
    let mut prev: Option<f64> = None;
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let x: f64 = f[3].parse().unwrap();
        if let (Some(p), "switch" | "factorization") = (prev, f[2]) {
            assert!(x <= p + 1e-10 * p.abs().max(1.0), "{l}");
        }
        prev = Some(x);
    }
}

#[test]
fn generate_then_train_on_file_then_evaluate() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &with(&["generate", "--run-id", "data"], SMALL));
    for f in ["ratings.csv", "heldout.csv", "labels.csv", "spec.json", "config.toml"] {
        assert!(d.join("runs/data").join(f).is_file(), "{f}");
    }
    let cfg = d.join("file.toml");
    fs::write(
        &cfg,
        "data = \"runs/data/ratings.csv\"\nindexed = true\nsplit = [0.8, 0.0, 0.2]\nnyms = 5\nclip = [-10.0, 10.0]\n",
    )
    .unwrap();
    let out = ok(d, &["train", "--config", "file.toml", "--run-id", "fit"]);
    assert!(out.contains("test rmse"), "{out}");
    let out = ok(d, &["evaluate", "--model-dir", "runs/fit", "--set", "local=true"]);
    assert!(out.contains("guessing probability"), "{out}");
    let report: serde_json::Value = serde_json::from_str(&read(d.join("runs/fit-eval/report.json"))).unwrap();
    assert_eq!(report["evaluated_on"], "test");
    assert!(report["rmse"].as_f64().unwrap().is_finite());
    assert!(report["rmse_local"].as_f64().is_some());
    let pg = report["p_g"].as_f64().unwrap();
    assert!((0.2..=1.0).contains(&pg));
    let assoc = read(d.join("runs/fit-eval/association.csv"));
    assert!(assoc.starts_with("nym,item,probability\n"));
    for l in assoc.lines().skip(1) {
        let p: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    assert!(read(d.join("runs/fit-eval/worst_item.csv")).starts_with("nym,users,item,probability\n"));
}

#[test]
fn evaluate_als_model() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &with(&["train", "--set", "algo=als", "--run-id", "als"], SMALL));
    let out = ok(d, &["evaluate", "--model-dir", "runs/als"]);
    assert!(out.starts_with("rmse (test)"), "{out}");
    assert!(!d.join("runs/als-eval/association.csv").exists());
}

#[test]
fn adaptive_writes_nym_count_trace() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &with(&["train", "--set", "algo=blc_adaptive"], SMALL));
    let t = read(d.join("runs/run/nym_count_trace.csv"));
    assert!(t.starts_with("stage,nyms,nyms_used,error\n"));
    assert!(t.lines().count() >= 2);
}

#[test]
fn sweep_and_bench_outputs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &with(
            &[
                "sweep",
                "--set",
                "sweep_algo=[\"blc\",\"als\"]",
                "--set",
                "sweep_nyms=[2,5]",
                "--set",
                "sweep_seeds=[0,1]",
            ],
            SMALL,
        ),
    );
    let rows = read(d.join("runs/run/sweep.csv"));
    // Two seeds × (two nym counts + one ALS run).
    assert_eq!(rows.lines().count(), 1 + 2 * 3);
    let summary = read(d.join("runs/run/summary.csv"));
    assert_eq!(summary.lines().count(), 1 + 3);
    assert!(summary.lines().skip(1).all(|l| l.split(',').nth(5) == Some("2")));

    ok(
        d,
        &["bench", "--run-id", "bench", "--set", "bench_users=[50,100]", "--set", "items=20", "--set", "bench_repeats=1"],
    );
    let bench = read(d.join("runs/bench/bench.csv"));
    let mut lines = bench.lines();
    assert_eq!(lines.next(), Some("phase,n,m,p,d,seconds"));
    let phases: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(phases.len(), 8);
    for p in ["aggregate", "factorize_cold", "factorize_warm", "nym_choice"] {
        assert_eq!(phases.iter().filter(|&&x| x == p).count(), 2);
    }
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let code = |args: &[&str]| blc(d, args).status.code();
    assert_eq!(code(&["train", "--set", "nyms=0"]), Some(2));
    assert_eq!(code(&["train", "--set", "bogus=1"]), Some(2));
    assert_eq!(code(&["evaluate"]), Some(2));
    fs::write(d.join("bad.csv"), "0,0,1\n0,0,2\n").unwrap();
    assert_eq!(code(&["train", "--set", "data=\"bad.csv\""]), Some(3));
    fs::write(d.join("junk.csv"), "0,0,1\n0,1,abc\n").unwrap();
    assert_eq!(code(&["train", "--set", "data=\"junk.csv\""]), Some(3));
    assert_eq!(code(&["train", "--set", "data=\"missing.csv\""]), Some(1));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = blc::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}
