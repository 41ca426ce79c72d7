//! Training objectives and the construction of contrastive positives.
//!
//! | kind   | positives                                   | gradient-carrying |
//! |--------|---------------------------------------------|-------------------|
//! | VI     | `h(f(α_v x))`, v = 1..V                     | all views         |
//! | SupCon | `h_sc(f(α_v x_v))`, same-class samples      | all views         |
//! | SI     | `p(h(f(α x)))`, `h_past(f_past(α x))`       | first only        |
//! | MI     | `p(h(f(α_1 x)))`, `h(f(α_v x ∣ m_v))`        | first only        |

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundNetwork, BoundPast, Linear, ModulatedNetwork, ModulationPool, ModulationSet, PastNetwork};
use crate::tensor::{kernels, Graph, Var};

pub const COSINE_EPS: f64 = 1e-12;
pub const DEFAULT_LAMBDA_BT: f64 = 0.005;
pub const SUPCON_TEMPERATURE: f64 = 0.1;
const MASKED_LOGIT: f64 = -1e9;

/// `u·v / (‖u‖‖v‖ + 1e-12)`
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    let nu = kernels::dot(u, u).sqrt();
    let nv = kernels::dot(v, v).sqrt();
    kernels::dot(u, v) / (nu * nv + COSINE_EPS)
}

/// Rows of `a` scaled to unit norm: `a / (‖a_i‖ + 1e-12)`.
pub fn normalize_rows(g: &mut Graph, a: Var) -> Result<Var> {
    let n = g.l2_norm_axis(a, 1)?;
    let n = g.add_scalar(n, COSINE_EPS);
    g.div(a, n)
}

/// `[n, m]` matrix of cosines between the rows of `a` and the rows of `b`.
pub fn pairwise_cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let an = normalize_rows(g, a)?;
    let bn = normalize_rows(g, b)?;
    g.matmul_bt(an, bn)
}

fn off_diagonal_mask(n: usize) -> Vec<f64> {
    let mut m = vec![1.0; n * n];
    for i in 0..n {
        m[i * n + i] = 0.0;
    }
    m
}

/// Orthogonal projection loss on modulated representations:
/// mean over distinct positive pairs of `1 − cos(p, p′)` plus mean over
/// all positive/negative pairs of `|cos(p, n)|`.
pub fn opl_loss(g: &mut Graph, pos: Var, neg: Var) -> Result<Var> {
    let (p, d) = g.dims(pos);
    let (n, dn) = g.dims(neg);
    if d != dn {
        return Err(Error::shape("opl_loss", &[p, d], &[n, dn]));
    }
    let pn = pairwise_cosine(g, pos, neg)?;
    let pn = g.abs(pn);
    let separation = g.mean(pn);
    if p < 2 {
        warn!("opl_loss: fewer than two positives, collapse term set to 0");
        return Ok(separation);
    }
    let pp = pairwise_cosine(g, pos, pos)?;
    let gap = g.neg(pp);
    let gap = g.add_scalar(gap, 1.0);
    let mask = g.input(p, p, off_diagonal_mask(p))?;
    let gap = g.mul(gap, mask)?;
    let gap = g.sum(gap);
    let collapse = g.scale(gap, 1.0 / (p * (p - 1)) as f64);
    g.add(collapse, separation)
}

/// Mean binary cross-entropy of `logits` (`[n, 1]` or `[1, n]`) against
/// 0/1 `targets`, as `softplus(z) − y z`.
pub fn bce_with_logits(g: &mut Graph, logits: Var, targets: &[f64]) -> Result<Var> {
    let (r, c) = g.dims(logits);
    if r * c != targets.len() {
        return Err(Error::shape("bce_with_logits", &[r, c], &[targets.len()]));
    }
    let y = g.input(r, c, targets.to_vec())?;
    let sp = g.softplus(logits);
    let yz = g.mul(y, logits)?;
    let l = g.sub(sp, yz)?;
    Ok(g.mean(l))
}

/// One-vs-rest BCE of a scalar readout `(w [1, d], s [1])` applied to
/// positive and negative modulated representations.
pub fn bce_orthogonalization_loss(g: &mut Graph, pos: Var, neg: Var, readout: (Var, Var)) -> Result<Var> {
    let (p, _) = g.dims(pos);
    let (n, _) = g.dims(neg);
    let x = g.concat(&[pos, neg], 0)?;
    let logits = Linear::forward(g, readout.0, readout.1, x)?;
    let mut targets = vec![1.0; p];
    targets.extend(std::iter::repeat_n(0.0, n));
    bce_with_logits(g, logits, &targets)
}

/// Barlow Twins: standardize both embeddings per dimension over the batch,
/// form `C = z1ᵀ z2 / N` and return
/// `Σ_d (1 − C_dd)² + λ Σ_{d≠d′} C_dd′²`.
pub fn bt_loss(g: &mut Graph, z1: Var, z2: Var, lambda_bt: f64) -> Result<Var> {
    let (n, d) = g.dims(z1);
    if g.dims(z2) != (n, d) {
        let (r, c) = g.dims(z2);
        return Err(Error::shape("bt_loss", &[n, d], &[r, c]));
    }
    if n < 2 {
        return Err(Error::Contract(format!("bt_loss needs a batch of at least 2, got {n}")));
    }
    let a = g.standardize(z1);
    let b = g.standardize(z2);
    g.cross_correlation_penalty(a, b, lambda_bt)
}

/// `(1/V) Σ_v bt_loss(z_v, z̄)` with `z̄` the mean of the raw views.
pub fn mv_bt_loss(g: &mut Graph, views: &[Var], lambda_bt: f64) -> Result<Var> {
    if views.len() < 2 {
        return Err(Error::Contract(format!("multi-view loss needs V >= 2, got {}", views.len())));
    }
    let dims = g.dims(views[0]);
    for &v in &views[1..] {
        if g.dims(v) != dims {
            let (r, c) = g.dims(v);
            return Err(Error::shape("mv_bt_loss", &[dims.0, dims.1], &[r, c]));
        }
    }
    let mut total = views[0];
    for &v in &views[1..] {
        total = g.add(total, v)?;
    }
    let mean = g.scale(total, 1.0 / views.len() as f64);
    let mut acc = None;
    for &v in views {
        let l = bt_loss(g, v, mean, lambda_bt)?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    let sum = acc.expect("at least two views");
    Ok(g.scale(sum, 1.0 / views.len() as f64))
}

/// Supervised contrastive loss over L2-normalized rows with temperature
/// `temperature`. Anchors without a same-label partner are excluded from
/// the mean.
pub fn supcon_loss(g: &mut Graph, projections: Var, labels: &[u32], temperature: f64) -> Result<Var> {
    let (n, _) = g.dims(projections);
    if labels.len() != n {
        return Err(Error::shape("supcon_loss", &[n], &[labels.len()]));
    }
    let mut weights = vec![0.0; n * n];
    let mut anchors = 0usize;
    for i in 0..n {
        let count = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        if count == 0 {
            continue;
        }
        anchors += 1;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                weights[i * n + j] = 1.0 / count as f64;
            }
        }
    }
    if anchors == 0 {
        return Err(Error::Contract("supcon_loss: no sample has a same-label partner".into()));
    }
    weights.iter_mut().for_each(|w| *w /= anchors as f64);

    let z = normalize_rows(g, projections)?;
    let sim = g.matmul_bt(z, z)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let mut diag = vec![0.0; n * n];
    for i in 0..n {
        diag[i * n + i] = MASKED_LOGIT;
    }
    let diag = g.input(n, n, diag)?;
    let logits = g.add(logits, diag)?;
    let logp = g.log_softmax(logits, 1)?;
    let w = g.input(n, n, weights)?;
    let picked = g.mul(logp, w)?;
    let total = g.sum(picked);
    Ok(g.neg(total))
}

/// Mean softmax cross-entropy of `logits [n, classes]` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = g.dims(logits);
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", &[n, c], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0 / n as f64;
    }
    let logp = g.log_softmax(logits, 1)?;
    let y = g.input(n, c, onehot)?;
    let picked = g.mul(logp, y)?;
    let total = g.sum(picked);
    Ok(g.neg(total))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvarianceKind {
    Vi,
    SupCon,
    Si,
    Mi,
}

impl InvarianceKind {
    pub fn name(self) -> &'static str {
        match self {
            InvarianceKind::Vi => "VI",
            InvarianceKind::SupCon => "SupCon",
            InvarianceKind::Si => "SI",
            InvarianceKind::Mi => "MI",
        }
    }
}

/// Representations a contrastive loss pulls together. `gradient_mask[v]`
/// is false for views computed behind a stop-gradient.
#[derive(Clone, Debug)]
pub struct PositiveSet {
    pub views: Vec<Var>,
    pub gradient_mask: Vec<bool>,
}

/// Where MI draws the modulation of each sample of views 2..V from.
#[derive(Clone, Copy, Debug)]
pub enum ModulationSource<'a> {
    /// Uniformly with replacement from a fixed pool.
    Pool(&'a ModulationPool),
    /// A fresh Gaussian initialization for every request.
    Fresh,
}

/// The augmented inputs of one step plus lazily computed unmodulated
/// backbone features and view projections, shared between objectives.
#[derive(Debug)]
pub struct StepViews {
    pub inputs: Vec<Var>,
    features: Vec<Option<Var>>,
    vi_projections: Vec<Option<Var>>,
}

impl StepViews {
    pub fn new(inputs: Vec<Var>) -> Self {
        let n = inputs.len();
        Self {
            inputs,
            features: vec![None; n],
            vi_projections: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn feature(&mut self, g: &mut Graph, net: &ModulatedNetwork, bound: &BoundNetwork, v: usize) -> Result<Var> {
        if let Some(f) = self.features[v] {
            return Ok(f);
        }
        let f = net.backbone.forward(g, &bound.backbone, self.inputs[v], None)?;
        self.features[v] = Some(f);
        Ok(f)
    }

    pub fn vi_projection(&mut self, g: &mut Graph, net: &ModulatedNetwork, bound: &BoundNetwork, v: usize) -> Result<Var> {
        if let Some(p) = self.vi_projections[v] {
            return Ok(p);
        }
        let f = self.feature(g, net, bound, v)?;
        let p = net.heads.vi_projector.forward(g, &bound.heads.vi_projector, f)?;
        self.vi_projections[v] = Some(p);
        Ok(p)
    }
}

/// Everything positive construction may read.
pub struct PositiveContext<'a> {
    pub net: &'a ModulatedNetwork,
    pub bound: &'a BoundNetwork,
    pub past: Option<(&'a PastNetwork, &'a BoundPast)>,
    pub modulations: Option<ModulationSource<'a>>,
    /// Detach the SI/MI target branches (the default). Turning this off is
    /// an ablation.
    pub stop_gradient: bool,
    pub use_predictor: bool,
}

fn maybe_detach(g: &mut Graph, v: Var, stop_gradient: bool) -> Var {
    if stop_gradient {
        g.detach(v)
    } else {
        v
    }
}

/// Builds the positives of one invariance objective for the batch in
/// `views`. For SupCon, row `i` of every view must come from a distinct
/// sample of the same class.
pub fn build_positives(
    kind: InvarianceKind,
    g: &mut Graph,
    ctx: &PositiveContext<'_>,
    views: &mut StepViews,
    rng: &mut impl Rng,
) -> Result<PositiveSet> {
    let (net, bound) = (ctx.net, ctx.bound);
    let need_views = |k: usize| -> Result<()> {
        if views.len() < k {
            return Err(Error::Config(format!("{} needs at least {k} views, got {}", kind.name(), views.len())));
        }
        Ok(())
    };
    match kind {
        InvarianceKind::Vi => {
            need_views(2)?;
            let z = (0..views.len())
                .map(|v| views.vi_projection(g, net, bound, v))
                .collect::<Result<Vec<_>>>()?;
            let n = z.len();
            Ok(PositiveSet {
                views: z,
                gradient_mask: vec![true; n],
            })
        }
        InvarianceKind::SupCon => {
            need_views(2)?;
            let mut z = Vec::with_capacity(views.len());
            for v in 0..views.len() {
                let f = views.feature(g, net, bound, v)?;
                z.push(net.heads.supcon_projector.forward(g, &bound.heads.supcon_projector, f)?);
            }
            let n = z.len();
            Ok(PositiveSet {
                views: z,
                gradient_mask: vec![true; n],
            })
        }
        InvarianceKind::Si => {
            need_views(1)?;
            let (past, past_vars) = ctx
                .past
                .ok_or_else(|| Error::Config("SI requires a frozen previous-session network".into()))?;
            let proj = views.vi_projection(g, net, bound, 0)?;
            let z1 = if ctx.use_predictor {
                net.heads.si_predictor.forward(g, &bound.heads.si_predictor, proj)?
            } else {
                proj
            };
            let fp = past.backbone.forward(g, &past_vars.backbone, views.inputs[0], None)?;
            let hp = past.vi_projector.forward(g, &past_vars.vi_projector, fp)?;
            let z2 = maybe_detach(g, hp, ctx.stop_gradient);
            Ok(PositiveSet {
                views: vec![z1, z2],
                gradient_mask: vec![true, !ctx.stop_gradient],
            })
        }
        InvarianceKind::Mi => {
            need_views(2)?;
            let source = ctx
                .modulations
                .ok_or_else(|| Error::Config("MI requires a nonempty modulation pool".into()))?;
            if let ModulationSource::Pool(p) = source {
                if p.is_empty() {
                    return Err(Error::Config("MI requires a nonempty modulation pool".into()));
                }
            }
            let f1 = views.feature(g, net, bound, 0)?;
            let h1 = net.heads.mi_projector.forward(g, &bound.heads.mi_projector, f1)?;
            let z1 = if ctx.use_predictor {
                net.heads.mi_predictor.forward(g, &bound.heads.mi_predictor, h1)?
            } else {
                h1
            };
            let mut out = vec![z1];
            let widths = net.backbone.widths();
            for v in 1..views.len() {
                let (batch, _) = g.dims(views.inputs[v]);
                let mods = match source {
                    ModulationSource::Pool(pool) => {
                        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..pool.len())).collect();
                        pool.gather(g, &idx)?
                    }
                    ModulationSource::Fresh => {
                        let sets: Vec<ModulationSet> =
                            (0..batch).map(|_| ModulationSet::sample_with(0, &widths, rng)).collect();
                        let pool = ModulationPool::new(&sets).expect("batch is nonempty");
                        let idx: Vec<usize> = (0..batch).collect();
                        pool.gather(g, &idx)?
                    }
                };
                let f = net.backbone.forward(g, &bound.backbone, views.inputs[v], Some(&mods))?;
                let h = net.heads.mi_projector.forward(g, &bound.heads.mi_projector, f)?;
                out.push(maybe_detach(g, h, ctx.stop_gradient));
            }
            let n = out.len();
            let mut mask = vec![!ctx.stop_gradient; n];
            mask[0] = true;
            Ok(PositiveSet {
                views: out,
                gradient_mask: mask,
            })
        }
    }
}

/// The loss of a positive set: multi-view Barlow Twins for VI and MI,
/// Barlow Twins between prediction and target for SI, and SupCon over the
/// stacked views (labels repeat per view) for SupCon.
pub fn positive_loss(
    kind: InvarianceKind,
    g: &mut Graph,
    set: &PositiveSet,
    lambda_bt: f64,
    labels: Option<&[u32]>,
) -> Result<Var> {
    match kind {
        InvarianceKind::Vi | InvarianceKind::Mi => mv_bt_loss(g, &set.views, lambda_bt),
        InvarianceKind::Si => bt_loss(g, set.views[0], set.views[1], lambda_bt),
        InvarianceKind::SupCon => {
            let labels = labels.ok_or_else(|| Error::Config("SupCon requires labels".into()))?;
            let stacked = g.concat(&set.views, 0)?;
            let all: Vec<u32> = std::iter::repeat_n(labels, set.views.len()).flatten().copied().collect();
            supcon_loss(g, stacked, &all, SUPCON_TEMPERATURE)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_similarity(&[2.0, 2.0], &[1.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn opl_colinear_positives_against_colinear_negative() {
        let mut g = Graph::new();
        let pos = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let neg = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let l = opl_loss(&mut g, pos, neg).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::vector(vec![0.0; 4]).unwrap());
        let l = bce_with_logits(&mut g, z, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn supcon_without_partners_is_rejected() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        assert!(supcon_loss(&mut g, z, &[0, 1], 0.1).is_err());
    }

    #[test]
    fn mv_bt_rejects_single_view() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        assert!(mv_bt_loss(&mut g, &[z], 0.005).is_err());
    }
}
