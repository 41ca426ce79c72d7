//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1–4, 9 and 10 reuse the `verify` suite; 5 trains modulations on
//! a frozen random backbone; 6–8 train the full benchmark from the configs
//! in `configs/acceptance` (about an hour on one core); 11 runs the binary
//! twice. Records, a summary CSV and the figures land in
//! `$CARGO_TARGET_TMPDIR/acceptance`.
//!
//! The process exits 0 whatever the verdicts; the printed lines are the
//! result. Set `TMCL_ACCEPTANCE=1,2,5` to run a subset.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use tmcl_cli::config::ExperimentConfig;
use tmcl_cli::record::{self, without_timestamps, RunOutput, RunRecord};
use tmcl_cli::report;
use tmcl_cli::stats::{spearman, Summary};
use tmcl_cli::verify::{run_checks, Category, Check};
use tmcl_core::datastream::{generate, split_sessions};
use tmcl_core::losses::cosine_similarity;
use tmcl_core::trainer::{EvalConfig, Trainer};

const SEEDS: [u64; 4] = [0, 1, 2, 3];

struct Verdict {
    passed: bool,
    detail: String,
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn out_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn load_config(name: &str) -> (ExperimentConfig, String) {
    let path = workspace().join("configs/acceptance").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Trains `cfg` under `seed` into the acceptance directory.
fn train(cfg: &ExperimentConfig, text: &str, seed: u64, reference: Option<Vec<f64>>) -> RunRecord {
    let dir = out_root().join(record::run_dir_name(cfg, seed));
    let started = Instant::now();
    let rec = record::execute(cfg, text, seed, Some(&RunOutput { dir, checkpoints: false }), reference)
        .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", cfg.method()));
    eprintln!(
        "  trained {} seed {seed} in {:.0}s: final kNN {:.4}",
        rec.method,
        started.elapsed().as_secs_f64(),
        rec.metrics.final_knn().unwrap_or(f64::NAN)
    );
    rec
}

/// One sweep grid point, with the record's config text being the point's
/// own serialization, as `tmcl-lab sweep` writes it.
fn train_point(base: &ExperimentConfig, lambda: f64, seed: u64, reference: &[f64]) -> RunRecord {
    let mut cfg = base.clone();
    cfg.train.lambda_mi = lambda;
    let text = cfg.to_toml();
    train(&cfg, &text, seed, Some(reference.to_vec()))
}

fn from_checks(checks: &[Check], category: Category) -> Verdict {
    let mine: Vec<&Check> = checks.iter().filter(|c| c.category == category).collect();
    let failed: Vec<String> = mine.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
    let detail = if failed.is_empty() {
        mine.iter().map(|c| if c.detail.is_empty() { c.name.clone() } else { format!("{}: {}", c.name, c.detail) }).collect::<Vec<_>>().join("; ")
    } else {
        format!("failed: {}", failed.join("; "))
    };
    Verdict { passed: !mine.is_empty() && failed.is_empty(), detail }
}

/// Modulations of a 2-class labeled subset on a frozen random backbone:
/// cross-class |cos| and within-class cos of the modulated
/// representations, per class.
fn orthogonalization_geometry(seed: u64) -> (f64, f64) {
    let mut cfg = ExperimentConfig::default();
    cfg.data.num_classes = 2;
    cfg.plan.sessions = 1;
    cfg.train.seed = seed;
    assert!(cfg.train.orthogonalization_epochs <= 20);
    let ds = generate(cfg.data_seed, &cfg.data).expect("data");
    let plan = split_sessions(&ds, 1, cfg.plan.label_fraction, 0, 0).expect("plan");
    let eval = EvalConfig { linear_probe: false, cdnv_trace: false, transfer: false };
    let mut tr = Trainer::new(&ds, &plan, cfg.model.clone(), cfg.train.clone(), eval).expect("trainer");
    tr.orthogonalize(0).expect("orthogonalization");

    let net = tr.network();
    let labeled = &plan.sessions[0].labeled;
    let mut cross = Summary::default();
    let mut within = Summary::default();
    for (&c, m) in &net.modulations {
        let z = net.backbone.embed(&ds.train.x, Some(m)).expect("embed");
        let pos: Vec<usize> = labeled.iter().copied().filter(|&i| ds.train.labels[i] == c).collect();
        let neg: Vec<usize> = labeled.iter().copied().filter(|&i| ds.train.labels[i] != c).collect();
        for (k, &i) in pos.iter().enumerate() {
            for &j in &pos[k + 1..] {
                within.push(cosine_similarity(z.row(i), z.row(j)));
            }
            for &j in &neg {
                cross.push(cosine_similarity(z.row(i), z.row(j)).abs());
            }
        }
    }
    (cross.mean().unwrap_or(f64::NAN), within.mean().unwrap_or(f64::NAN))
}

fn criterion5() -> Verdict {
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let (cross, within) = orthogonalization_geometry(seed);
        let pass = cross < 0.1 && within > 0.9;
        ok += usize::from(pass);
        parts.push(format!("s{seed} |cos|x={cross:.3} cos_in={within:.3}"));
    }
    Verdict { passed: ok >= 3, detail: format!("{ok}/4 seeds: {}", parts.join(", ")) }
}

fn criterion6(records: &mut Vec<RunRecord>) -> Verdict {
    let (trained_cfg, trained_text) = load_config("cdnv_mi.toml");
    let (untrained_cfg, untrained_text) = load_config("cdnv_mi_untrained.toml");
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let t = train(&trained_cfg, &trained_text, seed, None);
        let u = train(&untrained_cfg, &untrained_text, seed, None);
        let sessions = &t.metrics.sessions;
        // Entering the first consolidation stage: after pretraining, before
        // any consolidation epoch.
        let pre = sessions[0].cdnv_trace[0];
        let last_start = sessions.last().map(|s| s.cdnv_trace[0]).unwrap_or(f64::NAN);
        let fin = t.metrics.final_cdnv().unwrap_or(f64::NAN);
        let ablation = u.metrics.final_cdnv().unwrap_or(f64::NAN);
        let pass = fin < pre && fin < ablation;
        ok += usize::from(pass);
        parts.push(format!(
            "s{seed} final {fin:.3} vs pre {pre:.3} / untrained {ablation:.3} (last-session start {last_start:.3})"
        ));
        records.push(t);
        records.push(u);
    }
    Verdict { passed: ok >= 3, detail: format!("{ok}/4 seeds: {}", parts.join("; ")) }
}

fn mean_final_knn(records: &[RunRecord]) -> f64 {
    let s: Summary = records.iter().filter_map(|r| r.metrics.final_knn()).collect();
    s.mean().unwrap_or(f64::NAN)
}

/// Criteria 7 and 8 share the VI+MI runs: the λ = 1 sweep point is the
/// VI+MI entry of the table.
fn criteria7_and_8(records: &mut Vec<RunRecord>) -> (Verdict, Verdict) {
    let (sweep_cfg, _) = load_config("lf1pct_mi_sweep.toml");
    let mut by_lambda: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for seed in SEEDS {
        let reference = record::references(&sweep_cfg, seed).expect("reference accuracies");
        for &lambda in &sweep_cfg.sweep.lambda_mi {
            by_lambda.entry(format!("{lambda}")).or_default().push(train_point(&sweep_cfg, lambda, seed, &reference));
        }
    }
    let mut table: BTreeMap<&str, Vec<RunRecord>> = BTreeMap::new();
    for (key, file) in [("vi", "lf1pct_vi.toml"), ("vi+si", "lf1pct_vi_si.toml"), ("vi+si+mi", "lf1pct_vi_si_mi.toml")] {
        let (cfg, text) = load_config(file);
        table.insert(key, SEEDS.iter().map(|&s| train(&cfg, &text, s, None)).collect());
    }
    table.insert("vi+mi", by_lambda["1"].clone());

    let acc = |k: &str| mean_final_knn(&table[k]);
    let (vi, vi_mi, vi_si, vi_si_mi) = (acc("vi"), acc("vi+mi"), acc("vi+si"), acc("vi+si+mi"));
    let c7 = Verdict {
        passed: vi_mi > vi && vi_si_mi >= vi_si - 0.005,
        detail: format!(
            "mean final kNN over 4 seeds: VI {vi:.4}, VI+MI {vi_mi:.4}, VI+SI {vi_si:.4}, VI+SI+MI {vi_si_mi:.4}"
        ),
    };

    let lambdas: Vec<f64> = sweep_cfg.sweep.lambda_mi.clone();
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, seed) in SEEDS.iter().enumerate() {
        let runs: Vec<&RunRecord> = lambdas.iter().map(|l| &by_lambda[&format!("{l}")][k]).collect();
        let transfer: Vec<_> = runs.iter().map(|r| r.metrics.transfer.expect("transfer metrics")).collect();
        let ft: Vec<f64> = transfer.iter().map(|t| t.forward).collect();
        let bt: Vec<f64> = transfer.iter().map(|t| t.backward).collect();
        // A constant series has no rank correlation; it does not decrease.
        let (rf, rb) = (spearman(&lambdas, &ft).unwrap_or(0.0), spearman(&lambdas, &bt).unwrap_or(0.0));
        ok &= rf >= 0.0 && rb >= 0.0;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:+.3}")).collect::<Vec<_>>().join("/");
        parts.push(format!("s{seed} FT {} (ρ={rf:+.2}) BT {} (ρ={rb:+.2})", fmt(&ft), fmt(&bt)));
    }
    let c8 = Verdict { passed: ok, detail: format!("λ_MI {lambdas:?}: {}", parts.join("; ")) };

    records.extend(by_lambda.into_values().flatten());
    for key in ["vi", "vi+si", "vi+si+mi"] {
        records.extend(table.remove(key).unwrap_or_default());
    }
    (c7, c8)
}

fn criterion11() -> Verdict {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml");
    let root = out_root().join("determinism");
    let mut values = Vec::new();
    for name in ["a", "b"] {
        let out = root.join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_tmcl-lab"))
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--seed", "5", "--out"])
            .arg(&out)
            .env("RUST_LOG", "warn")
            .status()
            .expect("binary runs");
        if !status.success() {
            return Verdict { passed: false, detail: format!("run {name} exited with {status}") };
        }
        let files = report::expand_inputs(&[out]).expect("records");
        let rec = RunRecord::load(&files[0]).expect("record");
        values.push(without_timestamps(&rec));
    }
    Verdict {
        passed: values[0] == values[1],
        detail: "two `tmcl-lab run` invocations, metrics files compared without timestamp fields".into(),
    }
}

fn write_reports(records: &[RunRecord]) {
    let root = out_root();
    let tagged: Vec<(PathBuf, RunRecord)> = records.iter().map(|r| (root.clone(), r.clone())).collect();
    if let Ok(csv) = report::summary_csv(&tagged) {
        let _ = std::fs::write(root.join("summary.csv"), csv);
    }
    let lambda: Vec<(PathBuf, RunRecord)> = tagged.iter().filter(|(_, r)| r.method.starts_with("vi+mi") && r.label_fraction < 1.0).cloned().collect();
    let cdnv: Vec<(PathBuf, RunRecord)> = tagged.iter().filter(|(_, r)| r.label_fraction == 1.0).cloned().collect();
    let _ = std::fs::write(root.join(report::TRADEOFF_SVG), report::tradeoff_svg(&lambda));
    let _ = std::fs::write(root.join(report::CDNV_SVG), report::cdnv_svg(&cdnv));
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("TMCL_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: u32| selected.as_ref().is_none_or(|s| s.contains(&n));
    let _ = std::fs::remove_dir_all(out_root());
    std::fs::create_dir_all(out_root()).expect("output directory");

    let titles = [
        (1, "gradient soundness"),
        (2, "loss identities"),
        (3, "stop-gradient contract"),
        (4, "stage isolation"),
        (5, "orthogonalization geometry"),
        (6, "CDNV consolidation effect"),
        (7, "directional 1%-label table"),
        (8, "λ_MI transfer trend"),
        (9, "metric oracles"),
        (10, "formula spot values"),
        (11, "determinism"),
    ];
    let report_line = |n: u32, v: &Verdict, secs: f64| {
        let title = titles[n as usize - 1].1;
        println!("criterion {n:>2} {} {title} [{secs:.0}s]: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        let _ = std::io::stdout().flush();
    };

    let mut verdicts: BTreeMap<u32, Verdict> = BTreeMap::new();
    let started = Instant::now();
    if [1, 2, 3, 4, 9, 10].into_iter().any(wanted) {
        let checks = run_checks(false);
        let secs = started.elapsed().as_secs_f64();
        for (n, cat) in [
            (1, Category::Gradient),
            (2, Category::Identity),
            (3, Category::GradientContract),
            (4, Category::StageIsolation),
            (9, Category::Oracle),
            (10, Category::SpotValue),
        ] {
            if wanted(n) {
                let v = from_checks(&checks, cat);
                report_line(n, &v, secs);
                verdicts.insert(n, v);
            }
        }
    }
    let mut records = Vec::new();
    let timed = |n: u32, f: &mut dyn FnMut() -> Verdict, verdicts: &mut BTreeMap<u32, Verdict>| {
        if wanted(n) {
            let t = Instant::now();
            let v = f();
            report_line(n, &v, t.elapsed().as_secs_f64());
            verdicts.insert(n, v);
        }
    };
    timed(5, &mut criterion5, &mut verdicts);
    timed(6, &mut || criterion6(&mut records), &mut verdicts);
    if wanted(7) || wanted(8) {
        let t = Instant::now();
        let (c7, c8) = criteria7_and_8(&mut records);
        let secs = t.elapsed().as_secs_f64();
        for (n, v) in [(7, c7), (8, c8)] {
            if wanted(n) {
                report_line(n, &v, secs);
                verdicts.insert(n, v);
            }
        }
    }
    timed(11, &mut criterion11, &mut verdicts);
    write_reports(&records);

    let passed = verdicts.values().filter(|v| v.passed).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s; artifacts in {}",
        verdicts.len(),
        started.elapsed().as_secs_f64(),
        out_root().display()
    );
}
