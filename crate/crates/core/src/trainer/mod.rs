//! Session loop: VI pretraining on the first session, then per session an
//! orthogonalization stage (new class modulations against a frozen
//! backbone) followed by a consolidation stage (backbone and heads against
//! frozen modulations).

mod config;
mod optim;

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{Ablations, Objective, TrainConfig};
pub use optim::{cosine_schedule, warmup_steps, AdamW, Decay};

use crate::datastream::{Session, SessionPlan, SyntheticDataset};
use crate::error::{Error, Result};
use crate::eval::{self, AccuracyMatrix, EmbeddingBank, Transfer};
use crate::losses::{
    bce_orthogonalization_loss, build_positives, cross_entropy, opl_loss, positive_loss, InvarianceKind,
    ModulationSource, PositiveContext, StepViews,
};
use crate::model::{
    modulation_weight_decay, BoundNetwork, Linear, ModelConfig, ModulatedNetwork, ModulationPool, ModulationSet,
    Module, PastNetwork,
};
use crate::rng::{self, LabRng};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Orthogonalization,
    Consolidation,
}

/// Which measurements a run takes besides per-session kNN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub linear_probe: bool,
    /// CDNV of the test split before and after every consolidation epoch.
    pub cdnv_trace: bool,
    /// Train per-task reference models and report transfer.
    pub transfer: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            linear_probe: true,
            cdnv_trace: true,
            transfer: false,
        }
    }
}

/// Mean of each loss term over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub session: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: usize,
    pub classes: Vec<u32>,
    /// kNN accuracy over every class seen so far.
    pub knn_accuracy: f64,
    pub probe_accuracy: Option<f64>,
    /// Task-agnostic kNN accuracy on each task's test split.
    pub task_accuracy: Vec<f64>,
    /// Test-split CDNV at the start of consolidation and after each epoch.
    pub cdnv_trace: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub sessions: Vec<SessionMetrics>,
    pub losses: Vec<EpochLoss>,
    pub accuracy: Option<AccuracyMatrix>,
    pub transfer: Option<Transfer>,
}

impl MetricsRecord {
    pub fn final_knn(&self) -> Option<f64> {
        self.sessions.last().map(|s| s.knn_accuracy)
    }

    pub fn final_probe(&self) -> Option<f64> {
        self.sessions.last().and_then(|s| s.probe_accuracy)
    }

    pub fn final_cdnv(&self) -> Option<f64> {
        self.sessions.last().and_then(|s| s.cdnv_trace.last().copied())
    }
}

#[derive(Default)]
struct TermMeans {
    sums: BTreeMap<String, (f64, usize)>,
}

impl TermMeans {
    fn add(&mut self, name: &str, v: f64) {
        let e = self.sums.entry(name.to_string()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }

    fn finish(self) -> BTreeMap<String, f64> {
        self.sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

/// Labeled training indices of a session, grouped by class.
fn labeled_by_class(ds: &SyntheticDataset, session: &Session) -> BTreeMap<u32, Vec<usize>> {
    let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in &session.labeled {
        out.entry(ds.train.labels[i]).or_default().push(i);
    }
    out
}

fn pick(rng: &mut LabRng, from: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|_| from[rng.random_range(0..from.len())]).collect()
}

/// `groups` groups of `views` same-class labeled samples; returns the
/// indices of each view (row `i` of every view is group `i`) and the group
/// labels. Members are distinct when the class has enough labels.
fn supcon_groups(
    labeled: &BTreeMap<u32, Vec<usize>>,
    groups: usize,
    views: usize,
    rng: &mut LabRng,
) -> Option<(Vec<Vec<usize>>, Vec<u32>)> {
    let eligible: Vec<(&u32, &Vec<usize>)> = labeled.iter().filter(|(_, v)| v.len() >= 2).collect();
    if eligible.is_empty() {
        return None;
    }
    let mut per_view = vec![Vec::with_capacity(groups); views];
    let mut labels = Vec::with_capacity(groups);
    for _ in 0..groups {
        let (&c, members) = eligible[rng.random_range(0..eligible.len())];
        let chosen: Vec<usize> = if members.len() >= views {
            sample(rng, members.len(), views).into_iter().map(|j| members[j]).collect()
        } else {
            pick(rng, members, views)
        };
        for (v, i) in chosen.into_iter().enumerate() {
            per_view[v].push(i);
        }
        labels.push(c);
    }
    Some((per_view, labels))
}

fn augmented_input(g: &mut Graph, ds: &SyntheticDataset, idx: &[usize], noise_only: bool, rng: &mut LabRng) -> Result<Var> {
    let aug = if noise_only {
        ds.spec.augmentation.noise_only()
    } else {
        ds.spec.augmentation.clone()
    };
    let x = aug.augment_batch(&ds.train.rows(idx), rng);
    let (r, c) = x.dims();
    g.input(r, c, x.into_values())
}

fn feedforward_params(net: &mut ModulatedNetwork) -> Vec<(String, &mut Tensor)> {
    let mut p = net.backbone.named_params_mut("backbone");
    p.extend(net.heads.named_params_mut("heads"));
    p
}

/// Decay for a modulation parameter path `layer{l}/gain|bias`: pulled
/// toward the identity modulation with a per-layer coefficient.
fn modulation_decay(path: &str, num_layers: usize) -> Decay {
    let mut parts = path.rsplit('/');
    let kind = parts.next().unwrap_or("");
    let layer = parts
        .next()
        .and_then(|s| s.strip_prefix("layer"))
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(0);
    Decay {
        coef: modulation_weight_decay(layer + 1, num_layers),
        center: if kind == "gain" { 1.0 } else { 0.0 },
    }
}

/// Runs a session plan on one network, recording metrics as it goes.
pub struct Trainer<'a> {
    ds: &'a SyntheticDataset,
    plan: &'a SessionPlan,
    cfg: TrainConfig,
    eval: EvalConfig,
    net: ModulatedNetwork,
    past: Option<PastNetwork>,
    metrics: MetricsRecord,
    reference: Option<Vec<f64>>,
    sessions_done: usize,
    optimizer: AdamW,
    pending_trace: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        ds: &'a SyntheticDataset,
        plan: &'a SessionPlan,
        model: ModelConfig,
        cfg: TrainConfig,
        eval: EvalConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.input_dim != ds.spec.dim {
            return Err(Error::Config(format!(
                "model.input_dim {} does not match data dimension {}",
                model.input_dim, ds.spec.dim
            )));
        }
        if plan.sessions.is_empty() {
            return Err(Error::Config("session plan is empty".into()));
        }
        let net = ModulatedNetwork::new(model, ds.spec.num_classes, cfg.seed)?;
        Ok(Self {
            ds,
            plan,
            cfg,
            eval,
            net,
            past: None,
            metrics: MetricsRecord::default(),
            reference: None,
            sessions_done: 0,
            optimizer: AdamW::new(0.9, 0.999, 1e-8),
            pending_trace: Vec::new(),
        })
    }

    /// Uses precomputed reference accuracies instead of training them.
    pub fn with_reference(mut self, reference: Vec<f64>) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn network(&self) -> &ModulatedNetwork {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut ModulatedNetwork {
        &mut self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &MetricsRecord {
        &self.metrics
    }

    pub fn into_parts(self) -> (ModulatedNetwork, MetricsRecord) {
        (self.net, self.metrics)
    }

    /// All remaining sessions; `on_session` sees the network and the
    /// metrics so far after each.
    pub fn run(
        &mut self,
        mut on_session: impl FnMut(usize, &ModulatedNetwork, &MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        while self.sessions_done < self.plan.num_sessions() {
            let t = self.sessions_done;
            self.run_session(t)?;
            on_session(t, &self.net, &self.metrics)?;
        }
        self.finish()
    }

    fn run_session(&mut self, t: usize) -> Result<()> {
        if t > 0 {
            self.net.reset_heads();
        }
        if t == 0 {
            self.pretrain()?;
        }
        if self.cfg.has(Objective::Mi) && !self.cfg.ablations.random_modulations {
            self.orthogonalize(t)?;
        }
        self.consolidate(t)?;
        self.evaluate_session(t)?;
        self.past = Some(PastNetwork::snapshot(&self.net));
        self.sessions_done = t + 1;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        let t = self.plan.num_sessions();
        let reference = match (&self.reference, self.eval.transfer) {
            (Some(r), _) => Some(r.clone()),
            (None, true) => Some(reference_accuracies(self.ds, self.plan, &self.net.config, &self.cfg)?),
            (None, false) => None,
        };
        if let Some(reference) = reference {
            let m = AccuracyMatrix {
                a: self.metrics.sessions.iter().map(|s| s.task_accuracy.clone()).collect(),
                reference,
            };
            if t >= 2 {
                self.metrics.transfer = Some(eval::transfer_metrics(&m)?);
            } else {
                warn!("transfer metrics need at least two sessions; skipping");
            }
            self.metrics.accuracy = Some(m);
        }
        Ok(())
    }

    fn pretrain(&mut self) -> Result<()> {
        let objectives = if self.cfg.has(Objective::Vi) {
            vec![Objective::Vi]
        } else {
            self.cfg
                .objectives
                .iter()
                .copied()
                .filter(|o| matches!(o, Objective::SupCon | Objective::Ce))
                .collect()
        };
        self.train_feedforward(0, Stage::Pretrain, &objectives, self.cfg.pretrain_epochs)?;
        Ok(())
    }

    /// Learns one modulation per labeled class of session `t` with the
    /// backbone frozen, then stores them (frozen from here on).
    pub fn orthogonalize(&mut self, t: usize) -> Result<()> {
        let session = &self.plan.sessions[t];
        let labeled = labeled_by_class(self.ds, session);
        let eligible: Vec<u32> = labeled.iter().filter(|(_, v)| v.len() >= 2).map(|(&c, _)| c).collect();
        if eligible.is_empty() {
            if self.plan.label_fraction > 0.0 {
                warn!("session {t}: no class has two labeled samples; no modulations learned");
            }
            return Ok(());
        }
        let init_seed = rng::derive_seed(self.cfg.seed, &[rng::tag("modulation-init")]);
        let mut mods: BTreeMap<u32, ModulationSet> =
            eligible.iter().map(|&c| (c, self.net.init_modulation(c, init_seed))).collect();

        if !self.cfg.ablations.untrained_modulations {
            self.train_modulations(t, &labeled, &eligible, &mut mods)?;
        }
        for (c, m) in mods {
            self.net.modulations.insert(c, m);
        }
        Ok(())
    }

    fn train_modulations(
        &mut self,
        t: usize,
        labeled: &BTreeMap<u32, Vec<usize>>,
        eligible: &[u32],
        mods: &mut BTreeMap<u32, ModulationSet>,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let mut r = rng::stream(cfg.seed, "orthogonalization", &[t as u64]);
        let half = cfg.batch_size / 2;
        let num_labeled: usize = labeled.values().map(Vec::len).sum();
        let steps_per_epoch = (num_labeled / cfg.batch_size).max(1);
        let epochs = cfg.orthogonalization_epochs;
        let total = epochs * steps_per_epoch;
        let warmup = warmup_steps(cfg.warmup_epochs, epochs, steps_per_epoch);
        let num_layers = self.net.config.num_layers;
        let use_bce = cfg.ablations.bce_instead_of_opl;
        let term = if use_bce { "bce" } else { "opl" };

        let d_model = self.net.config.d_model;
        let mut readouts: BTreeMap<u32, Linear> = BTreeMap::new();
        if use_bce {
            let mut rr = rng::stream(cfg.seed, "bce-readout", &[t as u64]);
            for &c in eligible {
                readouts.insert(c, Linear::new(d_model, 1, &mut rr));
            }
        }
        let mut optims: BTreeMap<u32, AdamW> = eligible
            .iter()
            .map(|&c| (c, AdamW::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)))
            .collect();
        let mut readout_optims = optims.clone();

        let mut step = 0;
        for epoch in 0..epochs {
            let mut means = TermMeans::default();
            for _ in 0..steps_per_epoch {
                let c = eligible[r.random_range(0..eligible.len())];
                let negatives: Vec<usize> = labeled
                    .iter()
                    .filter(|(&k, _)| k != c)
                    .flat_map(|(_, v)| v.iter().copied())
                    .collect();
                if negatives.is_empty() {
                    warn!("session {t}: class {c} has no labeled negatives; skipping step");
                    step += 1;
                    continue;
                }
                let pos_idx = pick(&mut r, &labeled[&c], half);
                let neg_idx = pick(&mut r, &negatives, half);

                let mut g = Graph::new();
                let xp = augmented_input(&mut g, self.ds, &pos_idx, true, &mut r)?;
                let xn = augmented_input(&mut g, self.ds, &neg_idx, true, &mut r)?;
                let bb = self.net.backbone.bind(&mut g, false);
                let mvars = mods[&c].bind_pairs(&mut g, true);
                let fp = self.net.backbone.forward(&mut g, &bb, xp, Some(&mvars))?;
                let fn_ = self.net.backbone.forward(&mut g, &bb, xn, Some(&mvars))?;
                let (loss, rvars) = if use_bce {
                    let rv = readouts[&c].bind(&mut g, true);
                    (bce_orthogonalization_loss(&mut g, fp, fn_, (rv[0], rv[1]))?, rv)
                } else {
                    (opl_loss(&mut g, fp, fn_)?, Vec::new())
                };
                let value = g.scalar(loss);
                let grads = g.backward(loss)?;
                let lr = cosine_schedule(cfg.lr_modulation, step, total, warmup);
                let mgrads: Vec<Option<&[f64]>> = mvars.iter().flat_map(|&(a, b)| [grads.get(a), grads.get(b)]).collect();
                let m = mods.get_mut(&c).expect("eligible class has a modulation");
                optims.get_mut(&c).expect("optimizer per class").step(
                    m.named_params_mut(""),
                    &mgrads,
                    lr,
                    |p| modulation_decay(p, num_layers),
                )?;
                if use_bce {
                    let rg: Vec<Option<&[f64]>> = rvars.iter().map(|&v| grads.get(v)).collect();
                    let ro = readouts.get_mut(&c).expect("readout per class");
                    readout_optims.get_mut(&c).expect("optimizer per class").step(
                        ro.named_params_mut("readout"),
                        &rg,
                        lr,
                        |_| Decay::NONE,
                    )?;
                }
                means.add(term, value);
                step += 1;
            }
            let terms = means.finish();
            debug!("session {t} orthogonalization epoch {epoch}: {terms:?}");
            self.metrics.losses.push(EpochLoss {
                session: t,
                stage: Stage::Orthogonalization,
                epoch,
                terms,
            });
        }
        Ok(())
    }

    /// Trains backbone and heads on session `t` with the configured
    /// objectives; modulations enter only as constants.
    pub fn consolidate(&mut self, t: usize) -> Result<Vec<f64>> {
        let objectives = self.cfg.objectives.clone();
        let trace = self.train_feedforward(t, Stage::Consolidation, &objectives, self.cfg.consolidation_epochs)?;
        Ok(trace)
    }

    fn test_cdnv(&self) -> Result<f64> {
        let bank = EmbeddingBank::embed(&self.net.backbone, &self.ds.test.x, self.ds.test.labels.clone())?;
        eval::cdnv(&bank)
    }

    fn train_feedforward(&mut self, t: usize, stage: Stage, objectives: &[Objective], epochs: usize) -> Result<Vec<f64>> {
        let session = &self.plan.sessions[t];
        let labeled = labeled_by_class(self.ds, session);
        let b = self.cfg.batch_size;
        let steps_per_epoch = (session.train.len() / b).max(1);
        let total = epochs * steps_per_epoch;
        let warmup = warmup_steps(self.cfg.warmup_epochs, epochs, steps_per_epoch);
        let stage_tag = match stage {
            Stage::Pretrain => "pretrain",
            Stage::Orthogonalization => "orthogonalization",
            Stage::Consolidation => "consolidation",
        };
        let mut r = rng::stream(self.cfg.seed, stage_tag, &[t as u64]);
        // Modulation draws get their own stream so that enabling MI leaves
        // every other draw of the stage unchanged.
        let mut mod_rng = rng::stream(self.cfg.seed, "mi-modulations", &[stage as u64, t as u64]);
        self.optimizer = AdamW::new(self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps);
        let pool = ModulationPool::new(self.net.modulations.values());
        let has_pair = labeled.values().any(|v| v.len() >= 2);

        let mut active: Vec<Objective> = Vec::new();
        for &o in objectives {
            let ok = match o {
                Objective::Si if self.past.is_none() => {
                    warn!("session {t}: SI needs a previous session; skipped");
                    false
                }
                Objective::Mi if pool.is_none() && !self.cfg.ablations.random_modulations => {
                    warn!("session {t}: no modulations available; MI skipped");
                    false
                }
                Objective::SupCon if !has_pair => {
                    warn!("session {t}: no class with two labels; SupCon skipped");
                    false
                }
                Objective::Ce if labeled.is_empty() => {
                    warn!("session {t}: no labels; CE skipped");
                    false
                }
                _ => true,
            };
            if ok {
                active.push(o);
            }
        }
        if active.is_empty() {
            warn!("session {t}: no active objective in {stage:?}; stage skipped");
            return Ok(Vec::new());
        }

        let trace_cdnv = stage == Stage::Consolidation && self.eval.cdnv_trace;
        let mut trace = Vec::new();
        if trace_cdnv {
            trace.push(self.test_cdnv()?);
        }

        let mut order = session.train.clone();
        let mut step = 0;
        for epoch in 0..epochs {
            order.shuffle(&mut r);
            let mut means = TermMeans::default();
            for s in 0..steps_per_epoch {
                let batch: Vec<usize> = order.iter().cycle().skip(s * b).take(b).copied().collect();
                let lr = cosine_schedule(self.cfg.lr_feedforward, step, total, warmup);
                self.feedforward_step(&active, &batch, &labeled, pool.as_ref(), lr, (&mut r, &mut mod_rng), &mut means)?;
                step += 1;
            }
            let terms = means.finish();
            debug!("session {t} {stage_tag} epoch {epoch}: {terms:?}");
            self.metrics.losses.push(EpochLoss {
                session: t,
                stage,
                epoch,
                terms,
            });
            if trace_cdnv {
                trace.push(self.test_cdnv()?);
            }
        }
        if stage == Stage::Consolidation {
            self.pending_trace = trace.clone();
        }
        Ok(trace)
    }

    #[allow(clippy::too_many_arguments)]
    fn feedforward_step(
        &mut self,
        active: &[Objective],
        batch: &[usize],
        labeled: &BTreeMap<u32, Vec<usize>>,
        pool: Option<&ModulationPool>,
        lr: f64,
        (r, mod_rng): (&mut LabRng, &mut LabRng),
        means: &mut TermMeans,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let bound = BoundNetwork::bind(&self.net, &mut g, true, true);
        let past_bound = self.past.as_ref().map(|p| (p, p.bind(&mut g, false)));
        let needs_views = active.iter().any(|o| matches!(o, Objective::Vi | Objective::Si | Objective::Mi));
        let mut inputs = Vec::new();
        if needs_views {
            for _ in 0..cfg.views {
                inputs.push(augmented_input(&mut g, self.ds, batch, false, r)?);
            }
        }
        let mut views = StepViews::new(inputs);
        let source = if cfg.ablations.random_modulations {
            Some(ModulationSource::Fresh)
        } else {
            pool.map(ModulationSource::Pool)
        };
        let ctx = PositiveContext {
            net: &self.net,
            bound: &bound,
            past: past_bound.as_ref().map(|(p, b)| (*p, b)),
            modulations: source,
            stop_gradient: !cfg.ablations.no_stop_gradient,
            use_predictor: !cfg.ablations.no_predictor,
        };

        let mut terms: Vec<(&'static str, Var)> = Vec::new();
        for &o in active {
            let term = match o {
                Objective::Vi | Objective::Si | Objective::Mi => {
                    let kind = o.invariance().expect("invariance objective");
                    let draws = if kind == InvarianceKind::Mi { &mut *mod_rng } else { &mut *r };
                    let set = build_positives(kind, &mut g, &ctx, &mut views, draws)?;
                    let l = positive_loss(kind, &mut g, &set, cfg.lambda_bt, None)?;
                    let weight = if kind == InvarianceKind::Mi {
                        cfg.loss_scale * cfg.lambda_mi
                    } else {
                        cfg.loss_scale
                    };
                    g.scale(l, weight)
                }
                Objective::SupCon => {
                    let groups = cfg.batch_size / cfg.views;
                    let Some((per_view, labels)) = supcon_groups(labeled, groups, cfg.views, r) else {
                        continue;
                    };
                    let mut sv = Vec::with_capacity(cfg.views);
                    for idx in &per_view {
                        sv.push(augmented_input(&mut g, self.ds, idx, false, r)?);
                    }
                    let mut sviews = StepViews::new(sv);
                    let set = build_positives(InvarianceKind::SupCon, &mut g, &ctx, &mut sviews, r)?;
                    positive_loss(InvarianceKind::SupCon, &mut g, &set, cfg.lambda_bt, Some(&labels))?
                }
                Objective::Ce => {
                    let all: Vec<usize> = labeled.values().flatten().copied().collect();
                    let idx = pick(r, &all, cfg.batch_size);
                    let labels: Vec<usize> = idx.iter().map(|&i| self.ds.train.labels[i] as usize).collect();
                    let x = augmented_input(&mut g, self.ds, &idx, false, r)?;
                    let f = self.net.backbone.forward(&mut g, &bound.backbone, x, None)?;
                    let p = self.net.heads.ce_projector.forward(&mut g, &bound.heads.ce_projector, f)?;
                    let cls = &bound.heads.ce_classifier;
                    let logits = Linear::forward(&mut g, cls[0], cls[1], p)?;
                    cross_entropy(&mut g, logits, &labels)?
                }
            };
            terms.push((o.name(), term));
        }
        if terms.is_empty() {
            return Ok(());
        }
        let mut total = terms[0].1;
        for &(_, v) in &terms[1..] {
            total = g.add(total, v)?;
        }
        for &(name, v) in &terms {
            means.add(name, g.scalar(v));
        }
        means.add("total", g.scalar(total));

        let grads = g.backward(total)?;
        let vars: Vec<Var> = bound.backbone.iter().copied().chain(bound.heads.all()).collect();
        let gs: Vec<Option<&[f64]>> = vars.iter().map(|&v| grads.get(v)).collect();
        let wd = self.cfg.weight_decay;
        self.optimizer.step(feedforward_params(&mut self.net), &gs, lr, |_| Decay::toward_zero(wd))
    }

    fn evaluate_session(&mut self, t: usize) -> Result<()> {
        let ds = self.ds;
        let seen = self.plan.classes_seen(t);
        let backbone = &self.net.backbone;
        let (knn, probe, tasks) = eval::with_eval_threads(|| -> Result<_> {
            let train_all = EmbeddingBank::embed(backbone, &ds.train.x, ds.train.labels.clone())?;
            let test_all = EmbeddingBank::embed(backbone, &ds.test.x, ds.test.labels.clone())?;
            let train_seen = train_all.select(&ds.train.indices_of_classes(&seen))?;
            let test_seen = test_all.select(&ds.test.indices_of_classes(&seen))?;
            let knn = eval::knn_classify(&train_seen, &test_seen, eval::KNN_K, eval::KNN_TEMPERATURE)?.accuracy;
            let probe = if self.eval.linear_probe {
                Some(eval::linear_probe(&train_seen, &test_seen, eval::PROBE_EPOCHS)?)
            } else {
                None
            };
            let mut tasks = Vec::with_capacity(self.plan.num_sessions());
            for s in &self.plan.sessions {
                let test = test_all.select(&s.test)?;
                tasks.push(eval::knn_classify(&train_all, &test, eval::KNN_K, eval::KNN_TEMPERATURE)?.accuracy);
            }
            Ok((knn, probe, tasks))
        })?;
        info!("session {t}: knn {knn:.4} probe {probe:?}");
        self.metrics.sessions.push(SessionMetrics {
            session: t,
            classes: self.plan.sessions[t].classes.clone(),
            knn_accuracy: knn,
            probe_accuracy: probe,
            task_accuracy: tasks,
            cdnv_trace: std::mem::take(&mut self.pending_trace),
        });
        Ok(())
    }
}

/// Accuracy of a fresh VI-only model trained on each task alone with the
/// budget of a first session, measured like `A[t][i]`.
pub fn reference_accuracies(
    ds: &SyntheticDataset,
    plan: &SessionPlan,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(plan.num_sessions());
    for (i, session) in plan.sessions.iter().enumerate() {
        let single = SessionPlan {
            sessions: vec![session.clone()],
            label_fraction: plan.label_fraction,
        };
        let rcfg = TrainConfig {
            objectives: vec![Objective::Vi],
            seed: rng::derive_seed(cfg.seed, &[rng::tag("reference"), i as u64]),
            ablations: Ablations::default(),
            ..cfg.clone()
        };
        let eval = EvalConfig {
            linear_probe: false,
            cdnv_trace: false,
            transfer: false,
        };
        let mut tr = Trainer::new(ds, &single, model.clone(), rcfg, eval)?;
        tr.run(|_, _, _| Ok(()))?;
        let backbone = &tr.network().backbone;
        let acc = eval::with_eval_threads(|| -> Result<f64> {
            let train_all = EmbeddingBank::embed(backbone, &ds.train.x, ds.train.labels.clone())?;
            let test = EmbeddingBank::embed(backbone, &ds.test.rows(&session.test), ds.test.labels_of(&session.test))?;
            Ok(eval::knn_classify(&train_all, &test, eval::KNN_K, eval::KNN_TEMPERATURE)?.accuracy)
        })?;
        info!("reference task {i}: knn {acc:.4}");
        out.push(acc);
    }
    Ok(out)
}
