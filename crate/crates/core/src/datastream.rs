//! Synthetic class-incremental data.
//!
//! Samples are `x = μ_c + U s + N u + σ ε` where the anchors `μ_c` and the
//! within-class signal `s` live in a random `k`-dimensional class subspace
//! `U`, the nuisance `u` lives in its orthogonal complement `N` and is
//! independent of the class, and `ε` is isotropic noise. Nuisance variance
//! dominates the class-subspace spread, so a representation that simply
//! preserves input variance is a poor classifier while the class signal
//! stays recoverable.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{write_atomic, Reader};
use crate::rng::{self, LabRng};
use crate::tensor::{kernels, Tensor};

const MAX_ANCHOR_TRIES: usize = 10_000;
const PRESERVATION_DRAWS: usize = 20_000;
pub const MIN_LABEL_PRESERVATION: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub noise_std: f64,
    /// Probability of zeroing each coordinate.
    pub mask_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            noise_std: 0.3,
            mask_prob: 0.05,
            scale_min: 0.8,
            scale_max: 1.2,
        }
    }
}

/// Drawn parameters of one augmentation `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub noise: Vec<f64>,
    pub keep: Vec<bool>,
    pub scale: f64,
}

impl Augmentation {
    pub fn identity(dim: usize) -> Self {
        Self {
            noise: vec![0.0; dim],
            keep: vec![true; dim],
            scale: 1.0,
        }
    }
}

/// `scale · (x ⊙ keep) + noise`
pub fn apply_augmentation(x: &[f64], alpha: &Augmentation) -> Vec<f64> {
    x.iter()
        .zip(&alpha.keep)
        .zip(&alpha.noise)
        .map(|((&v, &k), &n)| if k { alpha.scale * v + n } else { n })
        .collect()
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_std >= 0.0
            && (0.0..1.0).contains(&self.mask_prob)
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max;
        if !ok {
            return Err(Error::Config(format!("invalid augmentation family {self:?}")));
        }
        Ok(())
    }

    /// The reduced family used while fitting modulations: noise only.
    pub fn noise_only(&self) -> Self {
        Self {
            noise_std: self.noise_std,
            mask_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }

    pub fn draw(&self, dim: usize, rng: &mut impl Rng) -> Augmentation {
        let noise = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                self.noise_std * z
            })
            .collect();
        let keep = (0..dim).map(|_| self.mask_prob == 0.0 || rng.random::<f64>() >= self.mask_prob).collect();
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..=self.scale_max)
        } else {
            self.scale_min
        };
        Augmentation { noise, keep, scale }
    }

    /// One independent draw per row of `x`.
    pub fn augment_batch(&self, x: &Tensor, rng: &mut impl Rng) -> Tensor {
        let (n, d) = x.dims();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let a = self.draw(d, rng);
            out.extend(apply_augmentation(x.row(i), &a));
        }
        Tensor::matrix(n, d, out).expect("same shape as input")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Dimension of the subspace holding anchors and class signal.
    pub class_subspace_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of anchor coordinates within the class subspace.
    pub anchor_scale: f64,
    pub class_std: f64,
    pub nuisance_std: f64,
    pub noise_std: f64,
    /// Required minimum anchor distance in units of the RMS within-class
    /// standard deviation.
    pub min_separation: f64,
    pub augmentation: AugmentationSpec,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            num_classes: 12,
            dim: 16,
            class_subspace_dim: 8,
            train_per_class: 600,
            test_per_class: 200,
            anchor_scale: 3.0,
            class_std: 0.6,
            nuisance_std: 1.5,
            noise_std: 0.2,
            min_separation: 4.0,
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.dim < 1 || self.train_per_class < 1 || self.test_per_class < 1 {
            return Err(Error::Config("data: class count, dimension and sample counts must be positive".into()));
        }
        if self.class_subspace_dim < 1 || self.class_subspace_dim > self.dim {
            return Err(Error::Config(format!(
                "data.class_subspace_dim must be in 1..={}, got {}",
                self.dim, self.class_subspace_dim
            )));
        }
        let stds = [self.anchor_scale, self.class_std, self.nuisance_std, self.noise_std, self.min_separation];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("data: scales must be finite and non-negative".into()));
        }
        self.augmentation.validate()
    }

    /// RMS per-coordinate within-class standard deviation.
    pub fn within_class_std(&self) -> f64 {
        let k = self.class_subspace_dim as f64;
        let d = self.dim as f64;
        let var = k * self.class_std.powi(2) + (d - k) * self.nuisance_std.powi(2) + d * self.noise_std.powi(2);
        (var / d).sqrt()
    }
}

/// Row-major samples with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub labels: Vec<u32>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dims().1
    }

    pub fn rows(&self, idx: &[usize]) -> Tensor {
        let d = self.dim();
        Tensor::matrix(idx.len(), d, kernels::gather_rows(self.x.values(), d, idx)).expect("nonempty selection")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<u32> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn indices_of_classes(&self, classes: &[u32]) -> Vec<usize> {
        (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DataSpec,
    pub seed: u64,
    /// `[num_classes, dim]`
    pub anchors: Tensor,
    pub train: Split,
    pub test: Split,
}

fn orthonormal_basis(dim: usize, rng: &mut LabRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p = kernels::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = kernels::dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn combine(basis: &[Vec<f64>], coeffs: &[f64], out: &mut [f64]) {
    for (b, &c) in basis.iter().zip(coeffs) {
        out.iter_mut().zip(b).for_each(|(o, v)| *o += c * v);
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_anchor(x: &[f64], anchors: &Tensor) -> u32 {
    let (n, _) = anchors.dims();
    let mut best = (f64::INFINITY, 0u32);
    for c in 0..n {
        let d = sq_dist(x, anchors.row(c));
        if d < best.0 {
            best = (d, c as u32);
        }
    }
    best.1
}

/// Draws a dataset. Fails when no anchor configuration meeting the
/// separation requirement is found, or when the augmentation family does
/// not preserve the nearest anchor for at least 99% of draws.
pub fn generate(seed: u64, spec: &DataSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (c, d, k) = (spec.num_classes, spec.dim, spec.class_subspace_dim);
    let mut r = rng::stream(seed, "data", &[]);
    let basis = orthonormal_basis(d, &mut r);
    let (class_basis, nuisance_basis) = basis.split_at(k);

    let min_dist = spec.min_separation * spec.within_class_std();
    let mut anchors = None;
    for _ in 0..MAX_ANCHOR_TRIES {
        let cand: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                let coeffs: Vec<f64> = (0..k).map(|_| spec.anchor_scale * r.sample::<f64, _>(StandardNormal)).collect();
                let mut v = vec![0.0; d];
                combine(class_basis, &coeffs, &mut v);
                v
            })
            .collect();
        let separated =
            (0..c).all(|i| (i + 1..c).all(|j| sq_dist(&cand[i], &cand[j]).sqrt() >= min_dist));
        if separated {
            anchors = Some(cand);
            break;
        }
    }
    let anchors = anchors.ok_or_else(|| {
        Error::Config(format!(
            "cannot place {c} anchors in a {k}-dimensional subspace at distance >= {min_dist:.3}"
        ))
    })?;
    let anchors = Tensor::from_rows(&anchors)?;

    let sample_split = |per_class: usize, r: &mut LabRng| -> Result<Split> {
        let mut x = Vec::with_capacity(c * per_class * d);
        let mut labels = Vec::with_capacity(c * per_class);
        for class in 0..c {
            for _ in 0..per_class {
                let mut v = anchors.row(class).to_vec();
                let s: Vec<f64> = (0..k).map(|_| spec.class_std * r.sample::<f64, _>(StandardNormal)).collect();
                combine(class_basis, &s, &mut v);
                let u: Vec<f64> = (0..d - k).map(|_| spec.nuisance_std * r.sample::<f64, _>(StandardNormal)).collect();
                combine(nuisance_basis, &u, &mut v);
                for e in v.iter_mut() {
                    *e += spec.noise_std * r.sample::<f64, _>(StandardNormal);
                }
                x.extend(v);
                labels.push(class as u32);
            }
        }
        Ok(Split {
            x: Tensor::matrix(c * per_class, d, x)?,
            labels,
        })
    };
    let train = sample_split(spec.train_per_class, &mut r)?;
    let test = sample_split(spec.test_per_class, &mut r)?;
    let ds = SyntheticDataset {
        spec: spec.clone(),
        seed,
        anchors,
        train,
        test,
    };
    if c > 1 {
        let rate = label_preservation_rate(&ds, &spec.augmentation, PRESERVATION_DRAWS, seed);
        if rate < MIN_LABEL_PRESERVATION {
            return Err(Error::Config(format!(
                "augmentation moves {:.2}% of samples to a foreign anchor (limit {:.0}%)",
                100.0 * (1.0 - rate),
                100.0 * (1.0 - MIN_LABEL_PRESERVATION)
            )));
        }
    }
    Ok(ds)
}

/// Fraction of augmented training samples whose nearest anchor (Euclidean,
/// input space) is their own class anchor.
pub fn label_preservation_rate(ds: &SyntheticDataset, aug: &AugmentationSpec, draws: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "preservation", &[]);
    let n = ds.train.len();
    let d = ds.train.dim();
    let mut kept = 0usize;
    for _ in 0..draws {
        let i = r.random_range(0..n);
        let view = apply_augmentation(ds.train.x.row(i), &aug.draw(d, &mut r));
        if nearest_anchor(&view, &ds.anchors) == ds.train.labels[i] {
            kept += 1;
        }
    }
    kept as f64 / draws as f64
}

/// One session of the stream. Index lists point into the dataset splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub classes: Vec<u32>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Revealed labels, a subset of `train`.
    pub labeled: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub sessions: Vec<Session>,
    pub label_fraction: f64,
}

impl SessionPlan {
    pub fn num_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// Classes of sessions `0..=t`.
    pub fn classes_seen(&self, t: usize) -> Vec<u32> {
        self.sessions[..=t].iter().flat_map(|s| s.classes.iter().copied()).collect()
    }

    pub fn all_classes(&self) -> Vec<u32> {
        self.classes_seen(self.sessions.len() - 1)
    }
}

/// Number of revealed labels for a class of `n` samples.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    if fraction <= 0.0 {
        return 0;
    }
    ((fraction * n as f64).round() as usize).max(2).min(n)
}

/// Partitions classes into `num_sessions` disjoint sets (shuffled under
/// `split_seed`) and reveals a per-class labeled subset drawn under
/// `label_seed`.
pub fn split_sessions(
    ds: &SyntheticDataset,
    num_sessions: usize,
    label_fraction: f64,
    split_seed: u64,
    label_seed: u64,
) -> Result<SessionPlan> {
    let c = ds.spec.num_classes;
    if num_sessions == 0 || c % num_sessions != 0 {
        return Err(Error::Config(format!("{c} classes cannot be split evenly into {num_sessions} sessions")));
    }
    if !(0.0..=1.0).contains(&label_fraction) {
        return Err(Error::Config(format!("label fraction must be in [0, 1], got {label_fraction}")));
    }
    let mut classes: Vec<u32> = (0..c as u32).collect();
    classes.shuffle(&mut rng::stream(split_seed, "class-split", &[]));
    let per = c / num_sessions;
    let sessions = classes
        .chunks(per)
        .map(|chunk| {
            let mut set: Vec<u32> = chunk.to_vec();
            set.sort_unstable();
            let train = ds.train.indices_of_classes(&set);
            let test = ds.test.indices_of_classes(&set);
            let mut labeled = Vec::new();
            for &class in &set {
                let mut idx: Vec<usize> = train.iter().copied().filter(|&i| ds.train.labels[i] == class).collect();
                let n = labeled_count(idx.len(), label_fraction);
                idx.shuffle(&mut rng::stream(label_seed, "labels", &[class as u64]));
                let mut pick = idx[..n].to_vec();
                pick.sort_unstable();
                labeled.extend(pick);
            }
            Session {
                classes: set,
                train,
                test,
                labeled,
            }
        })
        .collect();
    Ok(SessionPlan {
        sessions,
        label_fraction,
    })
}

/// Checks the plan invariants: disjoint, exhaustive class sets and labeled
/// subsets contained in the session pool.
pub fn check_plan(ds: &SyntheticDataset, plan: &SessionPlan) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in &plan.sessions {
        for &c in &s.classes {
            if !seen.insert(c) {
                return Err(Error::Contract(format!("class {c} appears in two sessions")));
            }
        }
        let pool: BTreeSet<usize> = s.train.iter().copied().collect();
        if s.labeled.iter().any(|i| !pool.contains(i)) {
            return Err(Error::Contract("labeled sample outside its session pool".into()));
        }
    }
    if seen.len() != ds.spec.num_classes {
        return Err(Error::Contract("sessions do not cover every class".into()));
    }
    Ok(())
}

const DATA_MAGIC: &[u8; 8] = b"TMCLDATA";
const DATA_VERSION: u32 = 1;

impl SyntheticDataset {
    /// Columnar file: magic, version, seed, spec (length-prefixed JSON),
    /// `dim`, `num_classes`, `n_train`, `n_test`, then anchors, train rows,
    /// train labels (u32), test rows, test labels. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec).expect("spec serializes");
        out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
        out.extend_from_slice(&spec);
        for n in [self.spec.dim, self.spec.num_classes, self.train.len(), self.test.len()] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        let floats = |out: &mut Vec<u8>, t: &Tensor| t.values().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        floats(&mut out, &self.anchors);
        for split in [&self.train, &self.test] {
            floats(&mut out, &split.x);
            split.labels.iter().for_each(|l| out.extend_from_slice(&l.to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != DATA_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != DATA_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let seed = r.u64()?;
        let spec_len = r.u64()? as usize;
        let spec: DataSpec =
            serde_json::from_slice(r.take(spec_len)?).map_err(|e| Error::Format(format!("dataset spec: {e}")))?;
        let dim = r.u64()? as usize;
        let classes = r.u64()? as usize;
        let n_train = r.u64()? as usize;
        let n_test = r.u64()? as usize;
        if dim != spec.dim || classes != spec.num_classes {
            return Err(Error::Format("dataset header disagrees with its spec".into()));
        }
        let anchors = Tensor::matrix(classes, dim, r.f64s(classes * dim)?)?;
        let train = Split {
            x: Tensor::matrix(n_train, dim, r.f64s(n_train * dim)?)?,
            labels: r.u32s(n_train)?,
        };
        let test = Split {
            x: Tensor::matrix(n_test, dim, r.f64s(n_test * dim)?)?,
            labels: r.u32s(n_test)?,
        };
        if !r.at_end() {
            return Err(Error::Format("trailing bytes in dataset file".into()));
        }
        Ok(Self {
            spec,
            seed,
            anchors,
            train,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataSpec {
        DataSpec {
            num_classes: 4,
            train_per_class: 20,
            test_per_class: 5,
            ..DataSpec::default()
        }
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let x = [1.5, -2.0, 0.25];
        assert_eq!(apply_augmentation(&x, &Augmentation::identity(3)), x.to_vec());
    }

    #[test]
    fn file_round_trip() {
        let ds = generate(5, &small()).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(SyntheticDataset::from_bytes(&bytes).unwrap(), ds);
        assert!(SyntheticDataset::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn labeled_count_rules() {
        assert_eq!(labeled_count(600, 0.01), 6);
        assert_eq!(labeled_count(100, 0.01), 2);
        assert_eq!(labeled_count(600, 0.0), 0);
        assert_eq!(labeled_count(600, 1.0), 600);
    }

    #[test]
    fn impossible_separation_is_a_config_error() {
        let spec = DataSpec {
            num_classes: 12,
            class_subspace_dim: 1,
            anchor_scale: 0.1,
            ..DataSpec::default()
        };
        assert!(matches!(generate(0, &spec), Err(Error::Config(_))));
    }
}
