//! Evaluation metrics against brute-force reimplementations.

mod common;

use common::{cos, gaussian, rng, rows_of};
use proptest::prelude::*;
use tmcl_core::eval::{
    cdnv, knn_classify, linear_probe, transfer_metrics, AccuracyMatrix, EmbeddingBank, KNN_K, KNN_TEMPERATURE,
};
use tmcl_core::tensor::Tensor;

fn bank(t: Tensor, labels: Vec<u32>) -> EmbeddingBank {
    EmbeddingBank::new(t, labels).unwrap()
}

/// Full sort of the training bank, top `k`, weighted vote.
fn knn_oracle(train: &[Vec<f64>], labels: &[u32], query: &[f64], k: usize, tau: f64) -> u32 {
    let mut ranked: Vec<(f64, u32, usize)> =
        train.iter().enumerate().map(|(j, row)| (cos(query, row), labels[j], j)).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let mut best = (f64::NEG_INFINITY, 0);
    for c in classes {
        let w: f64 = ranked.iter().take(k).filter(|r| r.1 == c).map(|r| (r.0 / tau).exp()).sum();
        if w > best.0 {
            best = (w, c);
        }
    }
    best.1
}

fn cdnv_oracle(rows: &[Vec<f64>], labels: &[u32]) -> f64 {
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let members = |c: u32| -> Vec<&Vec<f64>> { rows.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect() };
    let mean = |m: &[&Vec<f64>]| -> Vec<f64> {
        (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / m.len() as f64).collect()
    };
    let var = |m: &[&Vec<f64>], mu: &[f64]| -> f64 {
        m.iter().map(|r| r.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>() / m.len() as f64
    };
    let mut total = 0.0;
    for &a in &classes {
        for &b in &classes {
            if a == b {
                continue;
            }
            let (ma, mb) = (members(a), members(b));
            let (mua, mub) = (mean(&ma), mean(&mb));
            let dist = mua.iter().zip(&mub).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            total += (var(&ma, &mua) + var(&mb, &mub)) / (2.0 * dist);
        }
    }
    let c = classes.len() as f64;
    total / (c * c - c)
}

/// One-based transcription of the averaged transfer sums.
fn transfer_oracle(a: &[Vec<f64>], reference: &[f64]) -> (f64, f64) {
    let t = a.len();
    let at = |s: usize, i: usize| a[s - 1][i - 1];
    let mut bt = 0.0;
    for i in 1..t {
        let mut inner = 0.0;
        for s in i + 1..=t {
            inner += at(s, i) - reference[i - 1];
        }
        bt += inner / (t - i) as f64;
    }
    let mut ft = 0.0;
    for i in 2..=t {
        let mut inner = 0.0;
        for s in 1..i {
            inner += at(s, i) - reference[i - 1];
        }
        ft += inner / (i - 1) as f64;
    }
    (bt / (t - 1) as f64, ft / (t - 1) as f64)
}

fn labels_for(n: usize, classes: u32, seed: u64) -> Vec<u32> {
    (0..n).map(|i| ((i as u64 + seed) % classes as u64) as u32).collect()
}

fn rotate(rows: &[Vec<f64>], angle: f64) -> Vec<Vec<f64>> {
    let (s, c) = angle.sin_cos();
    rows.iter()
        .map(|r| {
            let mut out = r.clone();
            out[0] = c * r[0] - s * r[1];
            out[1] = s * r[0] + c * r[1];
            out
        })
        .collect()
}

#[test]
fn transfer_three_session_example() {
    let a = vec![vec![0.6, 0.2, 0.1], vec![0.5, 0.7, 0.3], vec![0.4, 0.6, 0.8]];
    let reference = vec![0.6, 0.7, 0.8];
    let tr = transfer_metrics(&AccuracyMatrix { a: a.clone(), reference: reference.clone() }).unwrap();
    // Task 1: (−0.1 − 0.2)/2, task 2: −0.1; halved.
    assert!((tr.backward - (-0.15 - 0.1) / 2.0).abs() < 1e-12);
    // Task 2: −0.5, task 3: (−0.7 − 0.5)/2; halved.
    assert!((tr.forward - (-0.5 - 0.6) / 2.0).abs() < 1e-12);
    let (bt, ft) = transfer_oracle(&a, &reference);
    assert!((tr.backward - bt).abs() < 1e-12 && (tr.forward - ft).abs() < 1e-12);
}

#[test]
fn transfer_rejects_ragged_matrices() {
    let m = AccuracyMatrix { a: vec![vec![1.0, 0.0], vec![1.0]], reference: vec![1.0, 1.0] };
    assert!(transfer_metrics(&m).is_err());
    let m = AccuracyMatrix { a: vec![vec![1.0]], reference: vec![1.0] };
    assert!(transfer_metrics(&m).is_err());
}

#[test]
fn linear_probe_separates_separable_clusters() {
    let mut r = rng(4);
    let noise = gaussian(&mut r, 60, 3, 0.1);
    let centers = [[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]];
    let labels = labels_for(60, 3, 0);
    let rows: Vec<Vec<f64>> =
        rows_of(&noise).iter().zip(&labels).map(|(n, &l)| n.iter().zip(centers[l as usize]).map(|(a, b)| a + b).collect()).collect();
    let b = bank(Tensor::from_rows(&rows).unwrap(), labels);
    let train = b.select(&(0..40).collect::<Vec<_>>()).unwrap();
    let test = b.select(&(40..60).collect::<Vec<_>>()).unwrap();
    assert_eq!(linear_probe(&train, &test, 100).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_predictions_match_full_sort(seed in any::<u64>(), n in 1usize..40, m in 1usize..10, k in 1usize..25) {
        let mut r = rng(seed);
        let train = gaussian(&mut r, n, 4, 1.0);
        let test = gaussian(&mut r, m, 4, 1.0);
        let labels = labels_for(n, 5, seed);
        let test_labels = labels_for(m, 5, seed / 3);
        let got = knn_classify(&bank(train.clone(), labels.clone()), &bank(test.clone(), test_labels.clone()), k, KNN_TEMPERATURE).unwrap();
        let train_rows = rows_of(&train);
        let expected: Vec<u32> = rows_of(&test).iter().map(|q| knn_oracle(&train_rows, &labels, q, k.min(n), KNN_TEMPERATURE)).collect();
        prop_assert_eq!(&got.predictions, &expected);
        let acc = expected.iter().zip(&test_labels).filter(|(a, b)| a == b).count() as f64 / m as f64;
        prop_assert!((got.accuracy - acc).abs() < 1e-12);
    }

    #[test]
    fn knn_ignores_training_order(seed in any::<u64>(), n in 2usize..30) {
        let mut r = rng(seed);
        let train = gaussian(&mut r, n, 3, 1.0);
        let test = gaussian(&mut r, 6, 3, 1.0);
        let labels = labels_for(n, 3, seed);
        let rev: Vec<usize> = (0..n).rev().collect();
        let tb = bank(train, labels);
        let a = knn_classify(&tb, &bank(test.clone(), vec![0; 6]), KNN_K, KNN_TEMPERATURE).unwrap();
        let b = knn_classify(&tb.select(&rev).unwrap(), &bank(test, vec![0; 6]), KNN_K, KNN_TEMPERATURE).unwrap();
        prop_assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn cdnv_matches_pair_loop(seed in any::<u64>(), classes in 2u32..6, per in 2usize..8, d in 2usize..5) {
        let mut r = rng(seed);
        let n = classes as usize * per;
        let z = gaussian(&mut r, n, d, 1.0);
        let labels = labels_for(n, classes, 0);
        let got = cdnv(&bank(z.clone(), labels.clone())).unwrap();
        let rows = rows_of(&z);
        let expected = cdnv_oracle(&rows, &labels);
        prop_assert!((got - expected).abs() < 1e-9, "{} vs {}", got, expected);
        prop_assert!(got >= 0.0);

        let rotated = rotate(&rows, seed as f64 * 1e-3);
        let rot = cdnv(&bank(Tensor::from_rows(&rotated).unwrap(), labels.clone())).unwrap();
        prop_assert!((rot - got).abs() < 1e-9 * got.max(1.0));

        let s = 0.5 + (seed % 7) as f64;
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| s * v).collect()).collect();
        let sc = cdnv(&bank(Tensor::from_rows(&scaled).unwrap(), labels)).unwrap();
        prop_assert!((sc - s * got).abs() < 1e-9 * sc.max(1.0));
    }

    #[test]
    fn transfer_matches_one_based_sums(seed in any::<u64>(), t in 2usize..7) {
        let mut r = rng(seed);
        let vals = gaussian(&mut r, t + 1, t, 0.3);
        let rows = rows_of(&vals);
        let a = rows[..t].to_vec();
        let reference = rows[t].clone();
        let tr = transfer_metrics(&AccuracyMatrix { a: a.clone(), reference: reference.clone() }).unwrap();
        let (bt, ft) = transfer_oracle(&a, &reference);
        prop_assert!((tr.backward - bt).abs() < 1e-9);
        prop_assert!((tr.forward - ft).abs() < 1e-9);
        // The diagonal never enters either metric.
        let mut shifted = a.clone();
        for (i, row) in shifted.iter_mut().enumerate() {
            row[i] += 5.0;
        }
        let tr2 = transfer_metrics(&AccuracyMatrix { a: shifted, reference }).unwrap();
        prop_assert_eq!(tr, tr2);
    }
}
