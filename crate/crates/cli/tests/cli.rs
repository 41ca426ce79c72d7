//! The `tmcl-lab` binary end to end on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tmcl_cli::record::{without_timestamps, RunRecord, RunStatus, METRICS_FILE};
use tmcl_cli::report;
use tmcl_cli::ExperimentConfig;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmcl-lab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn single_record(dir: &Path) -> RunRecord {
    let files = report::expand_inputs(&[dir.to_path_buf()]).unwrap();
    assert_eq!(files.len(), 1, "{files:?}");
    RunRecord::load(&files[0]).unwrap()
}

/// Writes `text` as a config file inside `dir`.
fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn same_config_and_seed_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture("tiny.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = lab(&["run", "--config", path_str(&cfg), "--seed", "7", "--out", path_str(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ra, rb) = (single_record(&a), single_record(&b));
    assert_eq!(ra.status, RunStatus::Complete);
    assert_eq!(without_timestamps(&ra), without_timestamps(&rb));
    let files = report::expand_inputs(&[a.clone()]).unwrap();
    let dir = files[0].parent().unwrap();
    assert!(dir.join("session0.ckpt").exists() && dir.join("session1.ckpt").exists());
    let other = files[0].strip_prefix(&a).unwrap();
    assert_eq!(std::fs::read(dir.join("session1.ckpt")).unwrap(), std::fs::read(b.join(other).with_file_name("session1.ckpt")).unwrap());
}

#[test]
fn minimal_single_session_vi_run_records_one_session() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("tiny.toml"))
        .unwrap()
        .replace("sessions = 2", "sessions = 1")
        .replace(r#"objectives = ["vi", "mi"]"#, r#"objectives = ["vi"]"#);
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("runs");
    let o = lab(&["run", "--config", path_str(&cfg), "--out", path_str(&out), "--no-checkpoints"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = single_record(&out);
    assert_eq!(r.metrics.sessions.len(), 1);
    assert_eq!(r.method, "vi");
    assert_eq!(r.seed, 4);
    assert!(r.hash_matches());
    assert_eq!(r.config, text);
    assert!(r.artifacts.is_empty());
}

#[test]
fn sweep_writes_one_record_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = lab(&["sweep", "--config", path_str(&fixture("tiny.toml")), "--out", path_str(&out), "--no-checkpoints"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files = report::expand_inputs(&[out]).unwrap();
    let records = report::load_records(&files).unwrap();
    let mut lambdas: Vec<f64> = records.iter().map(|(_, r)| r.lambda_mi).collect();
    lambdas.sort_by(f64::total_cmp);
    assert_eq!(lambdas, vec![0.0, 1.0]);
    // Each record's config is the grid point, not the sweep file.
    for (_, r) in &records {
        let cfg = ExperimentConfig::from_toml(&r.config).unwrap();
        assert_eq!(cfg.train.lambda_mi, r.lambda_mi);
    }
}

#[test]
fn jobs_fan_seeds_out_to_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = fixture("tiny.toml");
    let o = lab(&[
        "run", "--config", path_str(&cfg), "--seed", "1", "--seed", "2", "--jobs", "2", "--out", path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files = report::expand_inputs(&[out]).unwrap();
    let mut seeds: Vec<u64> = report::load_records(&files).unwrap().iter().map(|(_, r)| r.seed).collect();
    seeds.sort();
    assert_eq!(seeds, vec![1, 2]);
}

#[test]
fn invalid_configs_exit_with_code_one_and_a_location() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("tiny.toml")).unwrap().replace("seed = 4", "seed = 4\nlearning_rate = 3");
    let cfg = write_config(tmp.path(), &text);
    let o = lab(&["run", "--config", path_str(&cfg), "--out", path_str(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("learning_rate") && err.contains("line"), "{err}");

    let text = std::fs::read_to_string(fixture("tiny.toml")).unwrap().replace("sessions = 2", "sessions = 3");
    let cfg = write_config(tmp.path(), &text);
    let o = lab(&["run", "--config", path_str(&cfg), "--out", path_str(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("plan.sessions"));

    let o = lab(&["run", "--config", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_passes_and_mutation_is_caught() {
    let o = lab(&["verify"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{table}");
    assert!(table.contains(", 0 failed"));

    let o = lab(&["verify", "--mutate"]);
    assert_eq!(o.status.code(), Some(3));
    let table = String::from_utf8_lossy(&o.stdout);
    let bt_line = table.lines().find(|l| l.contains("bt_loss") && !l.contains("mv_bt")).unwrap();
    assert!(bt_line.contains("FAIL"), "{table}");
}

#[test]
fn make_data_file_replays_the_generated_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("tiny.data");
    let o = lab(&["make-data", "--config", path_str(&fixture("tiny.toml")), "--out", path_str(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let base = std::fs::read_to_string(fixture("tiny.toml")).unwrap();
    let from_file = base.replace("data_seed = 0", &format!("data_seed = 0\ndata_file = {:?}", path_str(&data)));
    let runs = |text: &str, name: &str| {
        let dir = tmp.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = write_config(&dir, text);
        let out = dir.join("runs");
        let o = lab(&["run", "--config", path_str(&cfg), "--out", path_str(&out), "--no-checkpoints"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        single_record(&out).metrics
    };
    assert_eq!(runs(&base, "generated"), runs(&from_file, "file"));
}

#[test]
fn failed_runs_leave_a_partial_record() {
    let tmp = tempfile::tempdir().unwrap();
    // A learning rate this large overflows within the first session.
    let text = std::fs::read_to_string(fixture("tiny.toml"))
        .unwrap()
        .replace("seed = 4", "seed = 4\nlr_feedforward = 1e300\nlr_modulation = 1e300");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("runs");
    let o = lab(&["run", "--config", path_str(&cfg), "--out", path_str(&out), "--no-checkpoints"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = std::fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
    let r = RunRecord::load(&dir.join(METRICS_FILE)).unwrap();
    assert_eq!(r.status, RunStatus::Failed);
    assert!(r.error.is_some());
}
