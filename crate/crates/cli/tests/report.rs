//! Report layer: CSV schema, statistics, grouping and record validation.

use std::path::{Path, PathBuf};

use proptest::prelude::*;
use tmcl_cli::record::RunRecord;
use tmcl_cli::report::{self, CSV_COLUMNS};
use tmcl_cli::stats::{spearman, Summary};
use tmcl_cli::ExperimentConfig;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fixture_records() -> Vec<(PathBuf, RunRecord)> {
    let files = report::expand_inputs(&[fixtures().join("records")]).unwrap();
    report::load_records(&files).unwrap()
}

#[test]
fn csv_matches_the_golden_file() {
    let golden = std::fs::read_to_string(fixtures().join("summary.csv")).unwrap();
    assert_eq!(report::summary_csv(&fixture_records()).unwrap(), golden);
    assert_eq!(golden.lines().next().unwrap(), CSV_COLUMNS.join(","));
}

#[test]
fn csv_cells_trace_back_to_record_fields() {
    let records = fixture_records();
    let knn: Vec<f64> = records
        .iter()
        .filter(|(_, r)| r.method == "vi+mi")
        .map(|(_, r)| r.metrics.sessions.last().unwrap().knn_accuracy)
        .collect();
    assert_eq!(knn.len(), 3);
    let mean = knn.iter().sum::<f64>() / 3.0;
    let std = (knn.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let csv = report::summary_csv(&records).unwrap();
    let row: Vec<&str> = csv.lines().find(|l| l.starts_with("vi+mi,")).unwrap().split(',').collect();
    assert_eq!(row[2], "3");
    assert_eq!(row[3], format!("{mean:.6}"));
    assert_eq!(row[4], format!("{std:.6}"));
}

#[test]
fn single_record_gives_one_row_with_empty_std() {
    let records: Vec<_> = fixture_records().into_iter().filter(|(_, r)| r.method == "vi").collect();
    assert_eq!(records.len(), 1);
    let csv = report::summary_csv(&records).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells.len(), CSV_COLUMNS.len());
    assert_eq!(cells[2], "1");
    assert!(cells[4].is_empty() && cells[6].is_empty());
    assert!(!cells[3].is_empty() && !cells[5].is_empty());
}

#[test]
fn svg_has_one_series_per_mi_weight() {
    let mut records: Vec<_> = fixture_records().into_iter().filter(|(_, r)| r.method == "vi+mi").collect();
    for ((_, r), l) in records.iter_mut().zip([0.0, 0.5, 1.0]) {
        r.lambda_mi = l;
    }
    records.push(records[0].clone());
    let svg = report::tradeoff_svg(&records);
    assert_eq!(svg.matches(r#"<g class="series""#).count(), 3);
    for l in ["0", "0.5", "1"] {
        assert!(svg.contains(&format!(r#"data-name="λ_MI = {l}""#)), "{l}");
    }
    // Two tasks per series: task 0 over both sessions, task 1 from session 1.
    assert_eq!(svg.matches("<polyline").count(), 6);
}

#[test]
fn cdnv_svg_shades_the_seed_range_per_method() {
    let records = fixture_records();
    let svg = report::cdnv_svg(&records);
    assert_eq!(svg.matches(r#"<g class="series""#).count(), 2);
    assert_eq!(svg.matches("<polygon").count(), 2);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn inconsistent_records_are_listed_by_file() {
    let tmp = tempfile::tempdir().unwrap();
    let src = fixture_records();
    let mut files = Vec::new();
    for (i, (p, _)) in src.iter().enumerate() {
        let dst = tmp.path().join(format!("r{i}.json"));
        std::fs::copy(p, &dst).unwrap();
        files.push(dst);
    }
    let text = std::fs::read_to_string(&files[0]).unwrap().replacen("\"schema\": 1", "\"schema\": 2", 1);
    std::fs::write(&files[0], text).unwrap();
    let text = std::fs::read_to_string(&files[1]).unwrap().replacen("\"config_hash\": \"", "\"config_hash\": \"00", 1);
    std::fs::write(&files[1], text).unwrap();
    let text = std::fs::read_to_string(&files[2]).unwrap().replacen("\"method\"", "\"renamed\"", 1);
    std::fs::write(&files[2], text).unwrap();

    let err = report::load_records(&files).unwrap_err().to_string();
    for (i, f) in files.iter().enumerate().take(3) {
        assert!(err.contains(&f.display().to_string()), "file {i} missing from: {err}");
    }
    assert!(!err.contains(&files[3].display().to_string()));
    assert!(report::load_records(&[]).is_err());
}

#[test]
fn glob_patterns_expand() {
    let pattern = fixtures().join("records/vi_mi_*/metrics.json");
    assert_eq!(report::expand_inputs(&[pattern]).unwrap().len(), 3);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let text = std::fs::read_to_string(fixtures().join("tiny.toml")).unwrap();
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(again.to_toml(), cfg.to_toml());
    let default = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&default.to_toml()).unwrap(), default);

    let bad = text.replace("[model]", "[model]\nwidth = 3");
    let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
    assert!(err.contains("width") && err.contains("line"), "{err}");
    let bad = text.replace("[eval]", "[evaluation]");
    assert!(ExperimentConfig::from_toml(&bad).is_err());
}

#[test]
fn method_labels_name_objectives_ablations_and_weight() {
    let mut cfg = ExperimentConfig::default();
    assert_eq!(cfg.method(), "vi+mi");
    cfg.train.ablations.untrained_modulations = true;
    cfg.train.lambda_mi = 0.5;
    assert_eq!(cfg.method(), "vi+mi[untrained]@lmi=0.5");
    cfg.name = "custom".into();
    assert_eq!(cfg.method(), "custom");
}

#[test]
fn spearman_spot_values() {
    assert_eq!(spearman(&[0.0, 0.5, 1.0], &[0.1, 0.2, 0.9]), Some(1.0));
    assert_eq!(spearman(&[0.0, 0.5, 1.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(spearman(&[0.0, 0.5, 1.0], &[2.0, 2.0, 2.0]), None);
    // Ranks [1, 2.5, 2.5] against [1, 2, 3].
    let r = spearman(&[1.0, 2.0, 3.0], &[0.0, 5.0, 5.0]).unwrap();
    assert!((r - 0.75f64.sqrt()).abs() < 1e-12, "{r}");
}

proptest! {
    #[test]
    fn summary_matches_two_pass(xs in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let s: Summary = xs.iter().copied().collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        prop_assert!((s.mean().unwrap() - mean).abs() < 1e-9);
        if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            prop_assert!((s.std().unwrap() - var.sqrt()).abs() < 1e-9);
        } else {
            prop_assert!(s.std().is_none());
        }
        prop_assert_eq!(s.min().unwrap(), xs.iter().copied().fold(f64::INFINITY, f64::min));
        prop_assert_eq!(s.max().unwrap(), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn spearman_is_rank_invariant(xs in prop::collection::vec(-10.0f64..10.0, 3..12), seed in any::<u64>()) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.5 + ((i as u64 ^ seed) % 5) as f64).collect();
        let r = spearman(&xs, &ys);
        // Strictly increasing maps of either side leave the rank correlation alone.
        let xt: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let yt: Vec<f64> = ys.iter().map(|y| 3.0 * y - 1.0).collect();
        match (r, spearman(&xt, &yt)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12 && (-1.0..=1.0).contains(&a)),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}
