//! The modulated backbone, the objective-specific heads and checkpoints.
//!
//! Every backbone layer computes `σ(g ⊙ (W x + s) + b)` where `(g, b)` is
//! the modulation of one class. Without a modulation the gain/bias ops are
//! skipped entirely, so the unmodulated pass is exactly `σ(W x + s)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

pub const MODULATION_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of modulated layers in the backbone.
    pub num_layers: usize,
    pub d_model: usize,
    pub d_proj: usize,
    pub supcon_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 64,
            num_layers: 4,
            d_model: 32,
            d_proj: 64,
            supcon_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("d_proj", self.d_proj),
            ("supcon_dim", self.supcon_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Output width of every backbone layer.
    pub fn layer_widths(&self) -> Vec<usize> {
        (0..self.num_layers)
            .map(|l| if l + 1 == self.num_layers { self.d_model } else { self.hidden_dim })
            .collect()
    }
}

/// Decay coefficient for the modulation of layer `l` out of `num_layers`:
/// `0.4 − 0.36 · (cos(π l / L) + 1) / 2`, weakest at the input.
pub fn modulation_weight_decay(l: usize, num_layers: usize) -> f64 {
    let l_total = num_layers.max(1) as f64;
    let w = ((PI * l as f64 / l_total).cos() + 1.0) / 2.0;
    // Same value written as an interpolation, exact at both ends.
    0.04 * w + 0.4 * (1.0 - w)
}

fn kaiming(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("valid std");
    let v = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, v).expect("positive dims").with_grad()
}

/// Visits parameters in a fixed canonical order.
pub trait Module {
    fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)>;

    fn named_params<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(prefix, &mut |p, t| out.push((p, t)));
        out
    }

    /// Inserts every parameter into `g`, in canonical order. Frozen
    /// binding uses constants so no gradient is ever recorded.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        let mut vars = Vec::new();
        self.for_each_param("", &mut |_, t| {
            vars.push(if trainable { g.leaf(t) } else { g.constant(t) });
        });
        vars
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param("", &mut |_, t| n += t.len());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[out_dim, in_dim]`
    pub weight: Tensor,
    /// `[out_dim]`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: kaiming(out_dim, in_dim, rng),
            bias: Tensor::zeros(vec![out_dim]).expect("positive dims").with_grad(),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.dims();
        if weight.shape().len() != 2 || bias.dims() != (1, out) {
            return Err(Error::shape("linear", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims().1
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims().0
    }

    /// `x W^T + s` for a batch `x` of shape `[batch, in_dim]`.
    pub fn forward(g: &mut Graph, w: Var, s: Var, x: Var) -> Result<Var> {
        let h = g.matmul_bt(x, w)?;
        g.add(h, s)
    }
}

impl Module for Linear {
    fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![(join(prefix, "weight"), &mut self.weight), (join(prefix, "bias"), &mut self.bias)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulatedLinearLayer {
    pub linear: Linear,
    pub activation: Activation,
}

impl ModulatedLinearLayer {
    /// `σ(g ⊙ (W x + s) + b)`; `modulation` rows broadcast over the batch
    /// when they have a single row, or apply per sample otherwise.
    pub fn forward(&self, g: &mut Graph, w: Var, s: Var, x: Var, modulation: Option<(Var, Var)>) -> Result<Var> {
        let mut h = Linear::forward(g, w, s, x)?;
        if let Some((gain, bias)) = modulation {
            h = g.mul(h, gain)?;
            h = g.add(h, bias)?;
        }
        Ok(match self.activation {
            Activation::Relu => g.relu(h),
            Activation::Identity => h,
        })
    }
}

/// Per-class gain and bias for every backbone layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationSet {
    pub class_id: u32,
    pub gains: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl ModulationSet {
    pub fn identity(class_id: u32, widths: &[usize]) -> Self {
        let ones = |w: usize| Tensor::vector(vec![1.0; w]).expect("positive width").with_grad();
        let zeros = |w: usize| Tensor::vector(vec![0.0; w]).expect("positive width").with_grad();
        Self {
            class_id,
            gains: widths.iter().map(|&w| ones(w)).collect(),
            biases: widths.iter().map(|&w| zeros(w)).collect(),
        }
    }

    /// Gains from N(1, 0.02²) and biases from N(0, 0.02²), seeded by
    /// `(seed, class_id)`.
    pub fn sample(class_id: u32, widths: &[usize], seed: u64) -> Self {
        let mut r = rng::stream(seed, "modulation", &[class_id as u64]);
        Self::sample_with(class_id, widths, &mut r)
    }

    pub fn sample_with(class_id: u32, widths: &[usize], r: &mut impl Rng) -> Self {
        let gain = Normal::new(1.0, MODULATION_INIT_STD).expect("valid std");
        let bias = Normal::new(0.0, MODULATION_INIT_STD).expect("valid std");
        let mut gains = Vec::with_capacity(widths.len());
        let mut biases = Vec::with_capacity(widths.len());
        for &w in widths {
            let gv = (0..w).map(|_| gain.sample(r)).collect();
            let bv = (0..w).map(|_| bias.sample(r)).collect();
            gains.push(Tensor::vector(gv).expect("positive width").with_grad());
            biases.push(Tensor::vector(bv).expect("positive width").with_grad());
        }
        Self { class_id, gains, biases }
    }

    pub fn num_layers(&self) -> usize {
        self.gains.len()
    }

    /// `(gain, bias)` leaves per layer.
    pub fn bind_pairs(&self, g: &mut Graph, trainable: bool) -> Vec<(Var, Var)> {
        let vars = self.bind(g, trainable);
        vars.chunks(2).map(|c| (c[0], c[1])).collect()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = (self.class_id as u64).to_le_bytes().to_vec();
        for (gn, b) in self.gains.iter().zip(&self.biases) {
            out.extend(gn.to_le_bytes());
            out.extend(b.to_le_bytes());
        }
        out
    }
}

impl Module for ModulationSet {
    fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (l, (gn, b)) in self.gains.iter().zip(&self.biases).enumerate() {
            f(join(prefix, &format!("layer{l}/gain")), gn);
            f(join(prefix, &format!("layer{l}/bias")), b);
        }
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, (gn, b)) in self.gains.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((join(prefix, &format!("layer{l}/gain")), gn));
            out.push((join(prefix, &format!("layer{l}/bias")), b));
        }
        out
    }
}

/// Several modulations stacked row-wise per layer so that a per-sample
/// choice becomes a row gather.
#[derive(Clone, Debug)]
pub struct ModulationPool {
    pub class_ids: Vec<u32>,
    /// Per layer, `[pool_size, width]`.
    pub gains: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl ModulationPool {
    pub fn new<'a>(sets: impl IntoIterator<Item = &'a ModulationSet>) -> Option<Self> {
        let sets: Vec<&ModulationSet> = sets.into_iter().collect();
        let first = sets.first()?;
        let layers = first.num_layers();
        let stack = |pick: &dyn Fn(&ModulationSet) -> &Vec<Tensor>, l: usize| {
            let width = pick(first)[l].len();
            let mut v = Vec::with_capacity(sets.len() * width);
            for s in &sets {
                v.extend_from_slice(pick(s)[l].values());
            }
            Tensor::matrix(sets.len(), width, v).expect("consistent widths")
        };
        Some(Self {
            class_ids: sets.iter().map(|s| s.class_id).collect(),
            gains: (0..layers).map(|l| stack(&|s| &s.gains, l)).collect(),
            biases: (0..layers).map(|l| stack(&|s| &s.biases, l)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Per-layer `(gain, bias)` constants of shape `[idx.len(), width]`,
    /// row `i` taken from pool entry `idx[i]`.
    pub fn gather(&self, g: &mut Graph, idx: &[usize]) -> Result<Vec<(Var, Var)>> {
        let mut out = Vec::with_capacity(self.gains.len());
        for (gn, b) in self.gains.iter().zip(&self.biases) {
            let gv = g.constant(gn);
            let bv = g.constant(b);
            out.push((g.gather_rows(gv, idx)?, g.gather_rows(bv, idx)?));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<ModulatedLinearLayer>,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "backbone", &[]);
        let mut in_dim = cfg.input_dim;
        let widths = cfg.layer_widths();
        let layers = widths
            .iter()
            .enumerate()
            .map(|(l, &out)| {
                let layer = ModulatedLinearLayer {
                    linear: Linear::new(in_dim, out, &mut r),
                    activation: if l + 1 == widths.len() { Activation::Identity } else { Activation::Relu },
                };
                in_dim = out;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].linear.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").linear.out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.linear.out_dim()).collect()
    }

    /// `f(x | W, m)` for bound parameters `vars` (from [`Module::bind`]).
    /// `None` is the unmodulated pass.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, modulation: Option<&[(Var, Var)]>) -> Result<Var> {
        let (_, cols) = g.dims(x);
        if cols != self.input_dim() {
            return Err(Error::shape("backbone input", &[self.input_dim()], &[cols]));
        }
        if let Some(m) = modulation {
            if m.len() != self.layers.len() {
                return Err(Error::shape("modulation layers", &[self.layers.len()], &[m.len()]));
            }
        }
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let m = modulation.map(|m| m[l]);
            h = layer.forward(g, vars[2 * l], vars[2 * l + 1], h, m)?;
        }
        Ok(h)
    }

    /// Representations of a batch `[n, input_dim]` without recording gradients.
    pub fn embed(&self, x: &Tensor, modulation: Option<&ModulationSet>) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x);
        let m = modulation.map(|m| m.bind_pairs(&mut g, false));
        let out = self.forward(&mut g, &vars, xv, m.as_deref())?;
        Ok(g.to_tensor(out))
    }
}

impl Module for Backbone {
    fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.linear.for_each_param(&join(prefix, &format!("layer{l}")), f);
        }
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(l, layer)| layer.linear.named_params_mut(&join(prefix, &format!("layer{l}"))))
            .collect()
    }
}

/// A stack of linear layers; hidden layers are followed by optional
/// batch standardization and ReLU, the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_norm: bool,
}

impl Mlp {
    pub fn new(dims: &[usize], hidden_norm: bool, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        Self {
            layers: dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
            hidden_norm,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for l in 0..n {
            h = Linear::forward(g, vars[2 * l], vars[2 * l + 1], h)?;
            if l + 1 < n {
                if self.hidden_norm {
                    h = g.standardize(h);
                }
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.for_each_param(&join(prefix, &format!("layer{l}")), f);
        }
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(l, layer)| layer.named_params_mut(&join(prefix, &format!("layer{l}"))))
            .collect()
    }
}

/// Objective-specific heads. All of them are reinitialized at the end of
/// every session.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub vi_projector: Mlp,
    pub si_predictor: Mlp,
    pub mi_projector: Mlp,
    pub mi_predictor: Mlp,
    pub supcon_projector: Mlp,
    pub ce_projector: Mlp,
    pub ce_classifier: Linear,
}

impl Heads {
    pub fn new(cfg: &ModelConfig, num_classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "heads", &[]);
        let (d, p) = (cfg.d_model, cfg.d_proj);
        let projector = |r: &mut rng::LabRng| Mlp::new(&[d, p, p, p], true, r);
        let predictor = |r: &mut rng::LabRng| Mlp::new(&[p, p, p], true, r);
        Self {
            vi_projector: projector(&mut r),
            si_predictor: predictor(&mut r),
            mi_projector: projector(&mut r),
            mi_predictor: predictor(&mut r),
            supcon_projector: Mlp::new(&[d, d, cfg.supcon_dim], false, &mut r),
            ce_projector: projector(&mut r),
            ce_classifier: Linear::new(p, num_classes.max(1), &mut r),
        }
    }
}

impl Module for Heads {
    fn for_each_param<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.vi_projector.for_each_param(&join(prefix, "vi_projector"), f);
        self.si_predictor.for_each_param(&join(prefix, "si_predictor"), f);
        self.mi_projector.for_each_param(&join(prefix, "mi_projector"), f);
        self.mi_predictor.for_each_param(&join(prefix, "mi_predictor"), f);
        self.supcon_projector.for_each_param(&join(prefix, "supcon_projector"), f);
        self.ce_projector.for_each_param(&join(prefix, "ce_projector"), f);
        self.ce_classifier.for_each_param(&join(prefix, "ce_classifier"), f);
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = self.vi_projector.named_params_mut(&join(prefix, "vi_projector"));
        out.extend(self.si_predictor.named_params_mut(&join(prefix, "si_predictor")));
        out.extend(self.mi_projector.named_params_mut(&join(prefix, "mi_projector")));
        out.extend(self.mi_predictor.named_params_mut(&join(prefix, "mi_predictor")));
        out.extend(self.supcon_projector.named_params_mut(&join(prefix, "supcon_projector")));
        out.extend(self.ce_projector.named_params_mut(&join(prefix, "ce_projector")));
        out.extend(self.ce_classifier.named_params_mut(&join(prefix, "ce_classifier")));
        out
    }
}

/// Backbone, heads and the per-class modulation store.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulatedNetwork {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub seed: u64,
    pub backbone: Backbone,
    pub heads: Heads,
    pub modulations: BTreeMap<u32, ModulationSet>,
    head_generation: u64,
}

impl ModulatedNetwork {
    pub fn new(config: ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(&config, seed);
        let heads = Heads::new(&config, num_classes, rng::derive_seed(seed, &[0]));
        Ok(Self {
            config,
            num_classes,
            seed,
            backbone,
            heads,
            modulations: BTreeMap::new(),
            head_generation: 0,
        })
    }

    /// Number of head resets performed so far.
    pub fn head_generation(&self) -> u64 {
        self.head_generation
    }

    /// Reinitializes all heads from the next seed in the head stream; the
    /// backbone and modulations are untouched.
    pub fn reset_heads(&mut self) {
        self.head_generation += 1;
        self.heads = Heads::new(
            &self.config,
            self.num_classes,
            rng::derive_seed(self.seed, &[self.head_generation]),
        );
    }

    pub fn init_modulation(&self, class_id: u32, seed: u64) -> ModulationSet {
        ModulationSet::sample(class_id, &self.backbone.widths(), seed)
    }

    pub fn modulation_bytes(&self) -> Vec<u8> {
        self.modulations.values().flat_map(|m| m.to_le_bytes()).collect()
    }

    pub fn backbone_bytes(&self) -> Vec<u8> {
        self.backbone
            .named_params("")
            .into_iter()
            .flat_map(|(_, t)| t.to_le_bytes())
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut entries = BTreeMap::new();
        for (p, t) in self.backbone.named_params("backbone") {
            entries.insert(p, t.clone());
        }
        for (p, t) in self.heads.named_params("heads") {
            entries.insert(p, t.clone());
        }
        for (c, m) in &self.modulations {
            for (p, t) in m.named_params(&format!("modulation/{c}")) {
                entries.insert(p, t.clone());
            }
        }
        Checkpoint { entries }
    }

    /// Overwrites parameters and modulations from `ckpt`. Every backbone and
    /// head parameter must be present with a matching shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let assign = |path: String, t: &mut Tensor| -> Result<()> {
            let src = ckpt
                .entries
                .get(&path)
                .ok_or_else(|| Error::Format(format!("missing parameter `{path}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{path}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.values_mut().copy_from_slice(src.values());
            Ok(())
        };
        for (p, t) in self.backbone.named_params_mut("backbone") {
            assign(p, t)?;
        }
        for (p, t) in self.heads.named_params_mut("heads") {
            assign(p, t)?;
        }
        let widths = self.backbone.widths();
        let mut mods = BTreeMap::new();
        for key in ckpt.entries.keys() {
            let Some(rest) = key.strip_prefix("modulation/") else { continue };
            let class_id: u32 = rest
                .split('/')
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad modulation key `{key}`")))?;
            mods.entry(class_id).or_insert_with(|| ModulationSet::identity(class_id, &widths));
        }
        for (c, m) in mods.iter_mut() {
            for (p, t) in m.named_params_mut(&format!("modulation/{c}")) {
                assign(p, t)?;
            }
        }
        self.modulations = mods;
        Ok(())
    }
}

/// Graph handles for every head, each in its own canonical order.
#[derive(Clone, Debug)]
pub struct BoundHeads {
    pub vi_projector: Vec<Var>,
    pub si_predictor: Vec<Var>,
    pub mi_projector: Vec<Var>,
    pub mi_predictor: Vec<Var>,
    pub supcon_projector: Vec<Var>,
    pub ce_projector: Vec<Var>,
    pub ce_classifier: Vec<Var>,
}

impl BoundHeads {
    pub fn bind(heads: &Heads, g: &mut Graph, trainable: bool) -> Self {
        Self {
            vi_projector: heads.vi_projector.bind(g, trainable),
            si_predictor: heads.si_predictor.bind(g, trainable),
            mi_projector: heads.mi_projector.bind(g, trainable),
            mi_predictor: heads.mi_predictor.bind(g, trainable),
            supcon_projector: heads.supcon_projector.bind(g, trainable),
            ce_projector: heads.ce_projector.bind(g, trainable),
            ce_classifier: heads.ce_classifier.bind(g, trainable),
        }
    }

    /// All handles in the same order as `Heads::named_params_mut`.
    pub fn all(&self) -> Vec<Var> {
        [
            &self.vi_projector,
            &self.si_predictor,
            &self.mi_projector,
            &self.mi_predictor,
            &self.supcon_projector,
            &self.ce_projector,
            &self.ce_classifier,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect()
    }
}

/// Backbone and head handles for one training step.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub backbone: Vec<Var>,
    pub heads: BoundHeads,
}

impl BoundNetwork {
    pub fn bind(net: &ModulatedNetwork, g: &mut Graph, backbone_trainable: bool, heads_trainable: bool) -> Self {
        Self {
            backbone: net.backbone.bind(g, backbone_trainable),
            heads: BoundHeads::bind(&net.heads, g, heads_trainable),
        }
    }
}

/// Frozen copy of the previous session's backbone and view projector.
#[derive(Clone, Debug, PartialEq)]
pub struct PastNetwork {
    pub backbone: Backbone,
    pub vi_projector: Mlp,
}

impl PastNetwork {
    pub fn snapshot(net: &ModulatedNetwork) -> Self {
        Self {
            backbone: net.backbone.clone(),
            vi_projector: net.heads.vi_projector.clone(),
        }
    }

    /// Binds as constants unless `trainable` (only useful to prove that no
    /// gradient reaches the snapshot).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundPast {
        BoundPast {
            backbone: self.backbone.bind(g, trainable),
            vi_projector: self.vi_projector.bind(g, trainable),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundPast {
    pub backbone: Vec<Var>,
    pub vi_projector: Vec<Var>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TMCLCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Flat map of parameter path to tensor, serialized as
/// `magic, version, count, {path_len, path, rank, dims.., values..}` with
/// little-endian integers and `f64` values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (path, t) in &self.entries {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let path = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter path is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let values = r.f64s(n)?;
            let t = Tensor::new(shape, values).map_err(|e| Error::Format(format!("`{path}`: {e}")))?;
            entries.insert(path, t);
        }
        if !r.at_end() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(Self { entries })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Little-endian cursor over a byte buffer.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub(crate) fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_decay_schedule_endpoints() {
        assert_eq!(modulation_weight_decay(0, 4), 0.04);
        assert!((modulation_weight_decay(4, 4) - 0.4).abs() < 1e-15);
        assert!((modulation_weight_decay(2, 4) - 0.22).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_modulated_layer() {
        let layer = ModulatedLinearLayer {
            linear: Linear::from_parts(
                Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                Tensor::vector(vec![0.0, 0.0]).unwrap(),
            )
            .unwrap(),
            activation: Activation::Identity,
        };
        let mut g = Graph::new();
        let vars = layer.linear.bind(&mut g, false);
        let x = g.constant(&Tensor::vector(vec![1.0, -1.0]).unwrap());
        let gain = g.constant(&Tensor::vector(vec![2.0, 2.0]).unwrap());
        let bias = g.constant(&Tensor::vector(vec![1.0, 1.0]).unwrap());
        let y = layer.forward(&mut g, vars[0], vars[1], x, Some((gain, bias))).unwrap();
        assert_eq!(g.value(y), &[3.0, -1.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = ModulatedNetwork::new(ModelConfig::default(), 6, 3).unwrap();
        let m = net.init_modulation(4, 9);
        net.modulations.insert(4, m);
        let bytes = net.checkpoint().to_bytes();
        let mut other = ModulatedNetwork::new(ModelConfig::default(), 6, 99).unwrap();
        other.load_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(other.checkpoint().to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
