//! The fast invariant suite behind `tmcl-lab verify`: gradient checks, loss
//! identities, the stop-gradient contract, stage isolation, metric oracles
//! and formula spot values. Everything here runs in seconds and needs no
//! files.

use std::collections::BTreeMap;
use std::fmt::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use tmcl_core::datastream::{generate, split_sessions, AugmentationSpec, DataSpec};
use tmcl_core::eval::{cdnv, knn_classify, transfer_metrics, AccuracyMatrix, EmbeddingBank};
use tmcl_core::losses::{
    bce_orthogonalization_loss, bt_loss, build_positives, mv_bt_loss, opl_loss, positive_loss, supcon_loss,
    InvarianceKind, ModulationSource, PositiveContext, StepViews,
};
use tmcl_core::model::{
    modulation_weight_decay, BoundNetwork, ModelConfig, ModulatedNetwork, ModulationPool, ModulationSet, Module,
    PastNetwork,
};
use tmcl_core::rng::{self, LabRng};
use tmcl_core::tensor::{fault, finite_difference_check, finite_difference_check_many, Graph, Tensor, Var};
use tmcl_core::trainer::{EvalConfig, Objective, TrainConfig, Trainer};

use crate::stats::Summary;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_INSTANCES: usize = 20;
const FD_STEP: f64 = 1e-5;
const BATCH: usize = 8;
const DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Category {
    Gradient,
    Identity,
    GradientContract,
    StageIsolation,
    Oracle,
    SpotValue,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Gradient => "gradient",
            Category::Identity => "identity",
            Category::GradientContract => "stop-gradient",
            Category::StageIsolation => "stage isolation",
            Category::Oracle => "oracle",
            Category::SpotValue => "spot value",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub category: Category,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(category: Category, name: &str, passed: bool, detail: String) -> Self {
        Self { category, name: name.to_string(), passed, detail }
    }
}

/// Runs every check. With `mutate`, the deliberate sign flip in the
/// Barlow Twins off-diagonal term is active for the whole suite.
pub fn run_checks(mutate: bool) -> Vec<Check> {
    fault::set_offdiag_sign_flip(mutate);
    let mut out = Vec::new();
    out.extend(gradient_checks());
    out.extend(identity_checks());
    out.extend(contract_checks());
    out.extend(stage_isolation_checks());
    out.extend(oracle_checks());
    out.extend(spot_value_checks());
    fault::set_offdiag_sign_flip(false);
    out
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

pub fn render_table(checks: &[Check]) -> String {
    let cat_w = checks.iter().map(|c| c.category.name().len()).max().unwrap_or(0).max(8);
    let name_w = checks.iter().map(|c| c.name.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<cat_w$}  {:<name_w$}  result  detail", "category", "check");
    for c in checks {
        let _ = writeln!(
            s,
            "{:<cat_w$}  {:<name_w$}  {:<6}  {}",
            c.category.name(),
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    let _ = writeln!(s, "{} checks, {} failed", checks.len(), failed);
    s
}

fn lab_rng(label: &str, i: u64) -> LabRng {
    rng::stream(0x5eed, label, &[i])
}

fn gaussian(r: &mut LabRng, rows: usize, cols: usize, std: f64) -> Tensor {
    let v = (0..rows * cols).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, v).expect("shape")
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_dim: DIM,
        hidden_dim: 8,
        num_layers: 3,
        d_model: 6,
        d_proj: 6,
        supcon_dim: 4,
    }
}

fn tiny_data() -> DataSpec {
    DataSpec {
        num_classes: 4,
        dim: DIM,
        class_subspace_dim: 3,
        train_per_class: 40,
        test_per_class: 10,
        anchor_scale: 4.0,
        class_std: 0.3,
        nuisance_std: 0.5,
        noise_std: 0.1,
        min_separation: 4.0,
        augmentation: AugmentationSpec {
            noise_std: 0.1,
            mask_prob: 0.0,
            scale_min: 0.9,
            scale_max: 1.1,
        },
    }
}

/// Worst relative error over the instances, or the first error message.
fn worst_over<F>(mut one: F) -> Result<f64, String>
where
    F: FnMut(u64) -> tmcl_core::Result<f64>,
{
    let mut worst: f64 = 0.0;
    for i in 0..GRADIENT_INSTANCES as u64 {
        worst = worst.max(one(i).map_err(|e| e.to_string())?);
    }
    Ok(worst)
}

fn gradient_check(name: &str, result: Result<f64, String>) -> Check {
    match result {
        Ok(err) => Check::new(
            Category::Gradient,
            name,
            err < GRADIENT_TOLERANCE,
            format!("max rel err {err:.2e} over {GRADIENT_INSTANCES} instances"),
        ),
        Err(e) => Check::new(Category::Gradient, name, false, e),
    }
}

fn gradient_checks() -> Vec<Check> {
    let mut out = Vec::new();
    out.push(gradient_check(
        "opl_loss",
        worst_over(|i| {
            let mut r = lab_rng("grad-opl", i);
            let xs = [gaussian(&mut r, BATCH, DIM, 1.0), gaussian(&mut r, BATCH, DIM, 1.0)];
            finite_difference_check_many(|g, v| opl_loss(g, v[0], v[1]), &xs, FD_STEP)
        }),
    ));
    out.push(gradient_check(
        "bce variant",
        worst_over(|i| {
            let mut r = lab_rng("grad-bce", i);
            let xs = [
                gaussian(&mut r, BATCH, DIM, 1.0),
                gaussian(&mut r, BATCH, DIM, 1.0),
                gaussian(&mut r, 1, DIM, 0.5),
                gaussian(&mut r, 1, 1, 0.5),
            ];
            finite_difference_check_many(|g, v| bce_orthogonalization_loss(g, v[0], v[1], (v[2], v[3])), &xs, FD_STEP)
        }),
    ));
    out.push(gradient_check(
        "bt_loss",
        worst_over(|i| {
            let mut r = lab_rng("grad-bt", i);
            let xs = [gaussian(&mut r, BATCH, DIM, 1.0), gaussian(&mut r, BATCH, DIM, 1.0)];
            finite_difference_check_many(|g, v| bt_loss(g, v[0], v[1], 0.005), &xs, FD_STEP)
        }),
    ));
    out.push(gradient_check(
        "mv_bt_loss (V=4)",
        worst_over(|i| {
            let mut r = lab_rng("grad-mvbt", i);
            let xs: Vec<Tensor> = (0..4).map(|_| gaussian(&mut r, BATCH, DIM, 1.0)).collect();
            finite_difference_check_many(|g, v| mv_bt_loss(g, v, 0.005), &xs, FD_STEP)
        }),
    ));
    out.push(gradient_check(
        "supcon_loss",
        worst_over(|i| {
            let mut r = lab_rng("grad-supcon", i);
            let z = gaussian(&mut r, BATCH, DIM, 1.0);
            let labels: Vec<u32> = (0..BATCH as u32).map(|j| (j + i as u32) % 3).collect();
            finite_difference_check(|g, v| supcon_loss(g, v, &labels, 0.1), &z, FD_STEP)
        }),
    ));
    out.push(gradient_check("MI consolidation step", worst_over(mi_step_gradient_error)));
    out
}

/// VI + MI loss of one consolidation step as a function of the first
/// backbone weight. With `targets`, the detached modulated views enter as
/// the given constants.
fn mi_step_loss(
    g: &mut Graph,
    net: &ModulatedNetwork,
    pool: &ModulationPool,
    inputs: &[Tensor],
    w0: Var,
    targets: Option<&[Tensor]>,
) -> tmcl_core::Result<(Var, Vec<Var>)> {
    let mut bound = BoundNetwork::bind(net, g, false, false);
    bound.backbone[0] = w0;
    let xs: Vec<Var> = inputs.iter().map(|x| g.constant(x)).collect();
    let mut views = StepViews::new(xs);
    let ctx = PositiveContext {
        net,
        bound: &bound,
        past: None,
        modulations: Some(ModulationSource::Pool(pool)),
        stop_gradient: true,
        use_predictor: true,
    };
    let mut pick = lab_rng("mi-step-pick", 0);
    let vi = build_positives(InvarianceKind::Vi, g, &ctx, &mut views, &mut pick)?;
    let vi_loss = positive_loss(InvarianceKind::Vi, g, &vi, 0.005, None)?;
    let mut mi = build_positives(InvarianceKind::Mi, g, &ctx, &mut views, &mut pick)?;
    let computed = mi.views.clone();
    if let Some(t) = targets {
        for (v, t) in mi.views.iter_mut().skip(1).zip(t) {
            *v = g.constant(t);
        }
    }
    let mi_loss = positive_loss(InvarianceKind::Mi, g, &mi, 0.005, None)?;
    let total = g.add(vi_loss, mi_loss)?;
    Ok((g.scale(total, 0.1), computed))
}

fn mi_step_gradient_error(i: u64) -> tmcl_core::Result<f64> {
    let mut r = lab_rng("grad-mi-step", i);
    let mut net = ModulatedNetwork::new(tiny_model(), 4, i)?;
    // Nonzero biases keep rows off the all-inactive ReLU kink.
    for layer in &mut net.backbone.layers {
        let n = layer.linear.bias.len();
        layer.linear.bias = Tensor::vector(gaussian(&mut r, 1, n, 0.1).into_values())?.with_grad();
    }
    let widths = net.backbone.widths();
    let sets: Vec<ModulationSet> = (0..3).map(|c| ModulationSet::sample(c, &widths, i ^ 7)).collect();
    let pool = ModulationPool::new(&sets).expect("nonempty pool");
    let inputs: Vec<Tensor> = (0..4).map(|_| gaussian(&mut r, BATCH, DIM, 1.0)).collect();
    let w0 = net.backbone.layers[0].linear.weight.clone();

    let mut g = Graph::new();
    let wv = g.leaf(&w0);
    let (loss, views) = mi_step_loss(&mut g, &net, &pool, &inputs, wv, None)?;
    let targets: Vec<Tensor> = views[1..].iter().map(|&v| g.to_tensor(v)).collect();
    let grads = g.backward(loss)?;
    let analytic = grads.get(wv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; w0.len()]);

    let eval = |w: &Tensor| -> tmcl_core::Result<f64> {
        let mut g = Graph::new();
        let wv = g.constant(w);
        let (l, _) = mi_step_loss(&mut g, &net, &pool, &inputs, wv, Some(&targets))?;
        Ok(g.scalar(l))
    };
    // ReLU kinks: a smaller stencil than for the smooth losses.
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = w0.clone();
    for k in 0..w0.len() {
        let orig = w0.values()[k];
        probe.values_mut()[k] = orig + step;
        let up = eval(&probe)?;
        probe.values_mut()[k] = orig - step;
        let down = eval(&probe)?;
        probe.values_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn scalar(f: impl FnOnce(&mut Graph) -> tmcl_core::Result<Var>) -> Result<f64, String> {
    let mut g = Graph::new();
    let v = f(&mut g).map_err(|e| e.to_string())?;
    Ok(g.scalar(v))
}

fn value_check(category: Category, name: &str, value: Result<f64, String>, check: impl Fn(f64) -> bool, want: &str) -> Check {
    match value {
        Ok(v) => Check::new(category, name, check(v), format!("{v:.3e} (want {want})")),
        Err(e) => Check::new(category, name, false, e),
    }
}

/// Rows of a two-level orthogonal design: centered, unit variance and
/// exactly uncorrelated columns.
fn orthogonal_design() -> Tensor {
    let s = [1.0, -1.0];
    let mut rows = Vec::new();
    for a in s {
        for b in s {
            for c in s {
                rows.push(vec![a, b, c, a * b, a * c, b * c]);
            }
        }
    }
    Tensor::from_rows(&rows).expect("rectangular")
}

fn identity_checks() -> Vec<Check> {
    let z = orthogonal_design();
    let bt_same = scalar(|g| {
        let v = g.constant(&z);
        bt_loss(g, v, v, 0.005)
    });
    let pos = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.5, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).expect("rows");
    let neg = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, -3.0, 2.0]]).expect("rows");
    let opl_min = scalar(|g| {
        let (p, n) = (g.constant(&pos), g.constant(&neg));
        opl_loss(g, p, n)
    });
    let mut r = lab_rng("identity-mvbt", 0);
    let y = gaussian(&mut r, BATCH, DIM, 1.0);
    let mv = scalar(|g| {
        let v = g.constant(&y);
        mv_bt_loss(g, &[v, v, v, v], 0.005)
    });
    let bt = scalar(|g| {
        let v = g.constant(&y);
        bt_loss(g, v, v, 0.005)
    });
    let mv_gap = match (mv, bt) {
        (Ok(a), Ok(b)) => Ok((a - b).abs()),
        (Err(e), _) | (_, Err(e)) => Err(e),
    };
    vec![
        value_check(Category::Identity, "bt(z, z) on decorrelated batch", bt_same, |v| v.abs() < 1e-10, "< 1e-10"),
        value_check(Category::Identity, "opl at its global minimum", opl_min, |v| v.abs() < 1e-10, "< 1e-10"),
        value_check(Category::Identity, "mv_bt of identical views − bt(z, z)", mv_gap, |v| v < 1e-12, "< 1e-12"),
    ]
}

struct ContractFixture {
    net: ModulatedNetwork,
    past: PastNetwork,
    pool: ModulationPool,
    inputs: Vec<Tensor>,
}

fn contract_fixture() -> tmcl_core::Result<ContractFixture> {
    let mut r = lab_rng("contract", 0);
    let mut net = ModulatedNetwork::new(tiny_model(), 4, 11)?;
    let past = PastNetwork::snapshot(&net);
    for layer in &mut net.backbone.layers {
        for w in layer.linear.weight.values_mut() {
            *w += 0.03;
        }
    }
    let widths = net.backbone.widths();
    let sets: Vec<ModulationSet> = (0..3).map(|c| ModulationSet::sample(c, &widths, 4)).collect();
    let pool = ModulationPool::new(&sets).expect("nonempty pool");
    let inputs = (0..4).map(|_| gaussian(&mut r, BATCH, DIM, 1.0)).collect();
    Ok(ContractFixture { net, past, pool, inputs })
}

/// Which parameter groups receive a gradient from one `kind` step when
/// everything (current, past, heads) is bound as trainable, plus the
/// current backbone gradient.
fn gradient_owners(
    fx: &ContractFixture,
    kind: InvarianceKind,
    stop_gradient: bool,
) -> tmcl_core::Result<(Vec<&'static str>, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = BoundNetwork::bind(&fx.net, &mut g, true, true);
    let past = fx.past.bind(&mut g, true);
    let xs = fx.inputs.iter().map(|x| g.constant(x)).collect();
    let mut views = StepViews::new(xs);
    let ctx = PositiveContext {
        net: &fx.net,
        bound: &bound,
        past: Some((&fx.past, &past)),
        modulations: Some(ModulationSource::Pool(&fx.pool)),
        stop_gradient,
        use_predictor: true,
    };
    let set = build_positives(kind, &mut g, &ctx, &mut views, &mut lab_rng("contract-pick", 0))?;
    let loss = positive_loss(kind, &mut g, &set, 0.005, None)?;
    let grads = g.backward(loss)?;
    let mut owners = Vec::new();
    if bound.backbone.iter().any(|&v| grads.get(v).is_some()) {
        owners.push("backbone");
    }
    if past.backbone.iter().chain(&past.vi_projector).any(|&v| grads.get(v).is_some()) {
        owners.push("past");
    }
    // Modulations enter only through the pool, whose nodes must not be
    // able to carry a gradient.
    let mods = fx.pool.gather(&mut g, &[0, 1, 2])?;
    if mods.iter().any(|&(a, b)| g.requires_grad(a) || g.requires_grad(b)) {
        owners.push("modulations");
    }
    let w: Vec<f64> = bound.backbone.iter().flat_map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
    Ok((owners, w))
}

fn contract_checks() -> Vec<Check> {
    let fx = match contract_fixture() {
        Ok(fx) => fx,
        Err(e) => return vec![Check::new(Category::GradientContract, "fixture", false, e.to_string())],
    };
    let mut out = Vec::new();
    for kind in [InvarianceKind::Si, InvarianceKind::Mi] {
        let name = format!("{} step: only current weights get gradients", kind.name());
        out.push(match gradient_owners(&fx, kind, true) {
            Ok((owners, _)) => {
                Check::new(Category::GradientContract, &name, owners == ["backbone"], format!("owners {owners:?}"))
            }
            Err(e) => Check::new(Category::GradientContract, &name, false, e.to_string()),
        });
        if kind == InvarianceKind::Si {
            // The SI target comes from the frozen past network, so a live
            // target shows up as gradients on the past weights.
            let name = "SI step: removing detach reaches the past weights";
            out.push(match gradient_owners(&fx, kind, false) {
                Ok((owners, _)) => Check::new(
                    Category::GradientContract,
                    name,
                    owners.contains(&"past"),
                    format!("owners {owners:?}"),
                ),
                Err(e) => Check::new(Category::GradientContract, name, false, e.to_string()),
            });
        } else {
            let name = "MI step: removing detach changes W-gradients";
            out.push(match (gradient_owners(&fx, kind, true), gradient_owners(&fx, kind, false)) {
                (Ok((_, a)), Ok((_, b))) => {
                    let change = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    Check::new(Category::GradientContract, name, change > 1e-6, format!("max change {change:.3e}"))
                }
                (Err(e), _) | (_, Err(e)) => Check::new(Category::GradientContract, name, false, e.to_string()),
            });
        }
    }
    out
}

fn feedforward_bytes(net: &ModulatedNetwork) -> Vec<u8> {
    let mut out = net.backbone_bytes();
    for (_, t) in net.heads.named_params("") {
        out.extend(t.to_le_bytes());
    }
    out
}

fn stage_isolation_checks() -> Vec<Check> {
    let run = || -> tmcl_core::Result<(bool, bool, bool)> {
        let ds = generate(0, &tiny_data())?;
        let plan = split_sessions(&ds, 2, 0.25, 0, 0)?;
        let cfg = TrainConfig {
            objectives: vec![Objective::Vi, Objective::Mi],
            pretrain_epochs: 1,
            orthogonalization_epochs: 2,
            consolidation_epochs: 1,
            warmup_epochs: 0,
            batch_size: 16,
            seed: 3,
            ..TrainConfig::default()
        };
        let eval = EvalConfig { linear_probe: false, ..EvalConfig::default() };
        let mut tr = Trainer::new(&ds, &plan, tiny_model(), cfg, eval)?;
        let ff = feedforward_bytes(tr.network());
        tr.orthogonalize(0)?;
        let ff_kept = feedforward_bytes(tr.network()) == ff;
        let mods = tr.network().modulation_bytes();
        let backbone = tr.network().backbone_bytes();
        tr.consolidate(0)?;
        let mods_kept = tr.network().modulation_bytes() == mods;
        let trained = tr.network().backbone_bytes() != backbone;
        Ok((ff_kept, mods_kept, trained))
    };
    match run() {
        Ok((ff, mods, trained)) => vec![
            Check::new(Category::StageIsolation, "orthogonalization keeps feedforward bytes", ff, String::new()),
            Check::new(Category::StageIsolation, "consolidation keeps modulation bytes", mods, String::new()),
            Check::new(Category::StageIsolation, "consolidation moves the backbone", trained, String::new()),
        ],
        Err(e) => vec![Check::new(Category::StageIsolation, "tiny run", false, e.to_string())],
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let n = dot(a, a).sqrt() * dot(b, b).sqrt();
    if n > 0.0 { dot(a, b) / n } else { 0.0 }
}

/// Sort every training row by (cosine desc, label asc, index asc), keep
/// the first `k`, and let the heaviest class win, the smaller id on ties.
fn knn_oracle(train: &[Vec<f64>], labels: &[u32], query: &[f64], k: usize, tau: f64) -> u32 {
    let mut ranked: Vec<(f64, u32, usize)> =
        train.iter().enumerate().map(|(j, row)| (cos(query, row), labels[j], j)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut votes: BTreeMap<u32, f64> = BTreeMap::new();
    for (c, l, _) in ranked.iter().take(k) {
        *votes.entry(*l).or_default() += (c / tau).exp();
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (&l, &w) in &votes {
        if w > best.0 {
            best = (w, l);
        }
    }
    best.1
}

fn cdnv_oracle(rows: &[Vec<f64>], labels: &[u32]) -> f64 {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let stats: Vec<(Vec<f64>, f64)> = classes
        .iter()
        .map(|&c| {
            let m: Vec<&Vec<f64>> = rows.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            let mu: Vec<f64> = (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / m.len() as f64).collect();
            let var = m.iter().map(|r| r.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>()
                / m.len() as f64;
            (mu, var)
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for (a, (mua, va)) in stats.iter().enumerate() {
        for (b, (mub, vb)) in stats.iter().enumerate() {
            if a != b {
                let dist = mua.iter().zip(mub).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                total += (va + vb) / (2.0 * dist);
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

/// Averaged transfer sums with one-based session and task indices.
fn transfer_oracle(a: &[Vec<f64>], reference: &[f64]) -> (f64, f64) {
    let t = a.len();
    let at = |s: usize, i: usize| a[s - 1][i - 1] - reference[i - 1];
    let mut bt = 0.0;
    for i in 1..t {
        bt += (i + 1..=t).map(|s| at(s, i)).sum::<f64>() / (t - i) as f64;
    }
    let mut ft = 0.0;
    for i in 2..=t {
        ft += (1..i).map(|s| at(s, i)).sum::<f64>() / (i - 1) as f64;
    }
    (bt / (t - 1) as f64, ft / (t - 1) as f64)
}

fn oracle_checks() -> Vec<Check> {
    const INSTANCES: u64 = 25;
    let mut knn_mismatch = 0usize;
    let mut knn_total = 0usize;
    let mut cdnv_err: f64 = 0.0;
    let mut transfer_err: f64 = 0.0;
    let mut stats_err: f64 = 0.0;
    let mut failures = Vec::new();
    for i in 0..INSTANCES {
        let mut r = lab_rng("oracle", i);
        let n = 10 + (i as usize * 7) % 40;
        let classes = 2 + (i as u32 % 4);
        // Few distinct values produce exact cosine ties.
        let rounded = |t: Tensor| {
            let (rows, cols) = t.dims();
            Tensor::matrix(rows, cols, t.values().iter().map(|v| (v * 2.0).round() / 2.0).collect()).expect("shape")
        };
        let train = if i % 2 == 0 { rounded(gaussian(&mut r, n, 4, 1.0)) } else { gaussian(&mut r, n, 4, 1.0) };
        let test = gaussian(&mut r, 12, 4, 1.0);
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let k = 1 + (i as usize % 25);
        let rows: Vec<Vec<f64>> = (0..n).map(|j| train.row(j).to_vec()).collect();
        let tr_bank = EmbeddingBank::new(train.clone(), labels.clone());
        let te_bank = EmbeddingBank::new(test.clone(), vec![0; 12]);
        match (tr_bank, te_bank) {
            (Ok(tb), Ok(qb)) => match knn_classify(&tb, &qb, k, 0.07) {
                Ok(res) => {
                    for (q, &p) in res.predictions.iter().enumerate() {
                        knn_total += 1;
                        if knn_oracle(&rows, &labels, test.row(q), k.min(n), 0.07) != p {
                            knn_mismatch += 1;
                        }
                    }
                }
                Err(e) => failures.push(format!("knn: {e}")),
            },
            _ => failures.push("bank construction failed".into()),
        }

        // Every class gets at least two members for CDNV.
        let cdnv_labels: Vec<u32> = (0..n).map(|j| (j as u32) % classes).collect();
        let z = gaussian(&mut r, n, 5, 1.0);
        let z_rows: Vec<Vec<f64>> = (0..n).map(|j| z.row(j).to_vec()).collect();
        match EmbeddingBank::new(z, cdnv_labels.clone()).and_then(|b| cdnv(&b)) {
            Ok(v) => cdnv_err = cdnv_err.max((v - cdnv_oracle(&z_rows, &cdnv_labels)).abs()),
            Err(e) => failures.push(format!("cdnv: {e}")),
        }

        let t = 2 + (i as usize % 4);
        let a: Vec<Vec<f64>> = (0..t).map(|_| (0..t).map(|_| r.random::<f64>()).collect()).collect();
        let reference: Vec<f64> = (0..t).map(|_| r.random::<f64>()).collect();
        match transfer_metrics(&AccuracyMatrix { a: a.clone(), reference: reference.clone() }) {
            Ok(tr) => {
                let (bt, ft) = transfer_oracle(&a, &reference);
                transfer_err = transfer_err.max((tr.backward - bt).abs()).max((tr.forward - ft).abs());
            }
            Err(e) => failures.push(format!("transfer: {e}")),
        }

        let xs: Vec<f64> = (0..2 + i as usize % 6).map(|_| 0.5 + 0.1 * r.sample::<f64, _>(StandardNormal)).collect();
        let s: Summary = xs.iter().copied().collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        stats_err = stats_err
            .max((s.mean().unwrap_or(f64::NAN) - mean).abs())
            .max((s.std().unwrap_or(f64::NAN) - var.sqrt()).abs());
    }
    let detail = |e: f64| format!("max abs diff {e:.2e} over {INSTANCES} instances");
    let mut out = vec![
        Check::new(
            Category::Oracle,
            "knn_classify vs full sort",
            knn_mismatch == 0 && knn_total > 0,
            format!("{knn_mismatch} of {knn_total} predictions differ"),
        ),
        Check::new(Category::Oracle, "cdnv vs double loop", cdnv_err < 1e-9, detail(cdnv_err)),
        Check::new(Category::Oracle, "transfer_metrics vs nested loops", transfer_err < 1e-9, detail(transfer_err)),
        Check::new(Category::Oracle, "report mean/std vs two-pass", stats_err < 1e-9, detail(stats_err)),
    ];
    if !failures.is_empty() {
        out.push(Check::new(Category::Oracle, "oracle instances ran", false, failures.join("; ")));
    }
    out
}

fn spot_value_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let first = modulation_weight_decay(0, 4);
    let last = modulation_weight_decay(4, 4);
    out.push(Check::new(
        Category::SpotValue,
        "modulation decay endpoints",
        first == 0.04 && last == 0.4,
        format!("{first} and {last} (want 0.04 and 0.4)"),
    ));

    let hand = Tensor::from_rows(&[vec![-1.0], vec![1.0], vec![1.0], vec![3.0]])
        .and_then(|t| EmbeddingBank::new(t, vec![0, 0, 1, 1]))
        .and_then(|b| cdnv(&b));
    out.push(value_check(
        Category::SpotValue,
        "cdnv hand example",
        hand.map_err(|e| e.to_string()),
        |v| v == 0.5,
        "0.5",
    ));

    let ref_acc = vec![0.8, 0.7];
    let m = AccuracyMatrix {
        a: vec![vec![0.8, ref_acc[1] - 0.2], vec![ref_acc[0] + 0.1, 0.7]],
        reference: ref_acc.clone(),
    };
    out.push(match transfer_metrics(&m) {
        Ok(t) => {
            let (want_bt, want_ft) = ((ref_acc[0] + 0.1) - ref_acc[0], (ref_acc[1] - 0.2) - ref_acc[1]);
            Check::new(
                Category::SpotValue,
                "transfer T=2 hand example",
                t.backward == want_bt && t.forward == want_ft,
                format!("BT {:.6}, FT {:.6} (want 0.1, -0.2)", t.backward, t.forward),
            )
        }
        Err(e) => Check::new(Category::SpotValue, "transfer T=2 hand example", false, e.to_string()),
    });
    let zero = AccuracyMatrix { a: vec![ref_acc.clone(), ref_acc.clone()], reference: ref_acc };
    out.push(match transfer_metrics(&zero) {
        Ok(t) => Check::new(
            Category::SpotValue,
            "transfer with A equal to the references",
            t.backward == 0.0 && t.forward == 0.0,
            format!("BT {}, FT {}", t.backward, t.forward),
        ),
        Err(e) => Check::new(Category::SpotValue, "transfer with A equal to the references", false, e.to_string()),
    });
    out
}
