//! Measurement on frozen embeddings: weighted kNN, linear probe, CDNV and
//! forward/backward transfer.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::tensor::{kernels, Tensor};

pub const KNN_K: usize = 20;
pub const KNN_TEMPERATURE: f64 = 0.07;
pub const PROBE_EPOCHS: usize = 100;
const PROBE_LR: f64 = 0.5;
const THREADS_ENV: &str = "TMCL_LAB_THREADS";

/// Unaugmented representations with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    /// `[n, d]`
    pub reps: Tensor,
    pub labels: Vec<u32>,
}

impl EmbeddingBank {
    pub fn new(reps: Tensor, labels: Vec<u32>) -> Result<Self> {
        if reps.shape().len() != 2 || reps.dims().0 != labels.len() {
            return Err(Error::shape("embedding bank", reps.shape(), &[labels.len()]));
        }
        Ok(Self { reps, labels })
    }

    /// `f(x | W, ∅)` for every row of `x`.
    pub fn embed(backbone: &Backbone, x: &Tensor, labels: Vec<u32>) -> Result<Self> {
        Self::new(backbone.embed(x, None)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.reps.dims().1
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let d = self.dim();
        let reps = Tensor::matrix(idx.len(), d, kernels::gather_rows(self.reps.values(), d, idx))?;
        Ok(Self {
            reps,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Runs `f` on a pool capped by `TMCL_LAB_THREADS` when it is set.
pub fn with_eval_threads<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    match cap.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub predictions: Vec<u32>,
    pub accuracy: f64,
}

/// Cosine kNN with `exp(cos / temperature)` vote weights. Neighbors are
/// ranked by cosine (descending) then label (ascending), so the result does
/// not depend on the order of the training bank; vote ties go to the
/// smallest class id.
pub fn knn_classify(train: &EmbeddingBank, test: &EmbeddingBank, k: usize, temperature: f64) -> Result<KnnResult> {
    if train.is_empty() {
        return Err(Error::Contract("kNN needs a nonempty training bank".into()));
    }
    if k == 0 {
        return Err(Error::Contract("kNN needs k >= 1".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape("knn_classify", train.reps.shape(), test.reps.shape()));
    }
    let d = train.dim();
    let n = train.len();
    let k = k.min(n);
    let tr = kernels::normalize_rows(train.reps.values(), n, d, 0.0);
    let tr_norms = kernels::row_norms(train.reps.values(), n, d);
    // Zero rows have undefined direction; give them cosine 0 everywhere.
    let tr: Vec<f64> = tr
        .chunks(d)
        .zip(&tr_norms)
        .flat_map(|(row, &nm)| row.iter().map(move |&v| if nm > 0.0 { v } else { 0.0 }))
        .collect();

    let predict = |row: &[f64]| -> u32 {
        let nrm = kernels::dot(row, row).sqrt();
        let q: Vec<f64> = row.iter().map(|v| if nrm > 0.0 { v / nrm } else { 0.0 }).collect();
        let mut cand: Vec<(f64, u32, usize)> =
            (0..n).map(|j| (kernels::dot(&q, &tr[j * d..(j + 1) * d]), train.labels[j], j)).collect();
        let order = |a: &(f64, u32, usize), b: &(f64, u32, usize)| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if k < n {
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
        }
        cand.sort_by(order);
        let mut votes: BTreeMap<u32, f64> = BTreeMap::new();
        for (cos, label, _) in &cand {
            *votes.entry(*label).or_insert(0.0) += (cos / temperature).exp();
        }
        let mut best = (f64::NEG_INFINITY, 0u32);
        for (&label, &w) in &votes {
            if w > best.0 {
                best = (w, label);
            }
        }
        best.1
    };

    let predictions: Vec<u32> = with_eval_threads(|| {
        (0..test.len()).into_par_iter().map(|i| predict(test.reps.row(i))).collect()
    });
    let correct = predictions.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    let accuracy = if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 };
    Ok(KnnResult { predictions, accuracy })
}

/// Multinomial logistic regression on standardized frozen features,
/// trained by full-batch gradient descent from zero with a cosine-decayed
/// step size. Returns test accuracy.
pub fn linear_probe(train: &EmbeddingBank, test: &EmbeddingBank, epochs: usize) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("linear probe needs nonempty banks".into()));
    }
    let classes: Vec<u32> = {
        let mut c = train.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(Error::Contract("linear probe needs at least two classes".into()));
    }
    let index: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let (n, d) = train.reps.dims();
    let nc = classes.len();

    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(train.reps.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; d];
    for i in 0..n {
        std.iter_mut()
            .zip(train.reps.row(i))
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    std.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt().max(1e-8));
    let standardize = |bank: &EmbeddingBank| -> Vec<f64> {
        let rows = bank.len();
        let mut out = Vec::with_capacity(rows * (d + 1));
        for i in 0..rows {
            out.extend(bank.reps.row(i).iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s));
            out.push(1.0);
        }
        out
    };
    let xtr = standardize(train);
    let xte = standardize(test);
    let dp = d + 1;
    let ytr: Vec<usize> = train.labels.iter().map(|l| index[l]).collect();

    // w: [nc, dp]
    let mut w = vec![0.0; nc * dp];
    for epoch in 0..epochs {
        let lr = PROBE_LR * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos());
        let logits = kernels::matmul_bt(&xtr, &w, n, dp, nc);
        let mut delta = vec![0.0; n * nc];
        for i in 0..n {
            let row = &logits[i * nc..(i + 1) * nc];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..nc {
                let p = (row[c] - mx).exp() / z;
                delta[i * nc + c] = (p - if c == ytr[i] { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        let grad = kernels::matmul_at(&delta, &xtr, n, nc, dp);
        w.iter_mut().zip(&grad).for_each(|(wi, gi)| *wi -= lr * gi);
    }
    let logits = kernels::matmul_bt(&xte, &w, test.len(), dp, nc);
    let mut correct = 0;
    for (i, label) in test.labels.iter().enumerate() {
        let row = &logits[i * nc..(i + 1) * nc];
        let mut best = 0;
        for c in 1..nc {
            if row[c] > row[best] {
                best = c;
            }
        }
        if classes[best] == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Class-distance normalized variance:
/// `1/(|C|²−|C|) Σ_{c≠c′} (Var_c + Var_c′) / (2‖μ_c − μ_c′‖)` with `Var`
/// the mean squared distance to the class mean. Pairs with coincident
/// means are excluded with a warning.
pub fn cdnv(bank: &EmbeddingBank) -> Result<f64> {
    let d = bank.dim();
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in bank.labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Contract("CDNV needs at least two classes".into()));
    }
    if let Some((c, _)) = groups.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Contract(format!("CDNV needs two samples per class; class {c} has fewer")));
    }
    let stats: Vec<(u32, Vec<f64>, f64)> = groups
        .iter()
        .map(|(&c, idx)| {
            let mut mu = vec![0.0; d];
            for &i in idx {
                mu.iter_mut().zip(bank.reps.row(i)).for_each(|(m, v)| *m += v);
            }
            mu.iter_mut().for_each(|m| *m /= idx.len() as f64);
            let var = idx
                .iter()
                .map(|&i| bank.reps.row(i).iter().zip(&mu).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
                .sum::<f64>()
                / idx.len() as f64;
            (c, mu, var)
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, (ca, ma, va)) in stats.iter().enumerate() {
        for (b, (cb, mb, vb)) in stats.iter().enumerate() {
            if a == b {
                continue;
            }
            let dist = ma.iter().zip(mb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if dist == 0.0 {
                warn!("cdnv: classes {ca} and {cb} have coincident means; pair excluded");
                continue;
            }
            total += (va + vb) / (2.0 * dist);
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Numeric("cdnv: every class pair has coincident means".into()));
    }
    // Without exclusions `pairs` is |C|² − |C|.
    Ok(total / pairs as f64)
}

/// `A[t][i]`: accuracy on task `i` after session `t`; `reference[i]`:
/// accuracy of a model trained on task `i` alone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub a: Vec<Vec<f64>>,
    pub reference: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub backward: f64,
    pub forward: f64,
}

/// Backward transfer averages `A[t][i] − Â[i]` over sessions after task
/// `i`; forward transfer over sessions before it. Indices are zero-based.
pub fn transfer_metrics(m: &AccuracyMatrix) -> Result<Transfer> {
    let t = m.a.len();
    if t < 2 {
        return Err(Error::Contract(format!("transfer metrics need at least 2 sessions, got {t}")));
    }
    if m.reference.len() != t || m.a.iter().any(|row| row.len() != t) {
        return Err(Error::Contract("accuracy matrix must be T x T with T reference accuracies".into()));
    }
    let mut backward = 0.0;
    for i in 0..t - 1 {
        let s: f64 = (i + 1..t).map(|s| m.a[s][i] - m.reference[i]).sum();
        backward += s / (t - 1 - i) as f64;
    }
    let mut forward = 0.0;
    for i in 1..t {
        let s: f64 = (0..i).map(|s| m.a[s][i] - m.reference[i]).sum();
        forward += s / i as f64;
    }
    Ok(Transfer {
        backward: backward / (t - 1) as f64,
        forward: forward / (t - 1) as f64,
    })
}
