use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{InvarianceKind, DEFAULT_LAMBDA_BT};

/// A consolidation objective. The four invariances plus a plain
/// cross-entropy classifier baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Vi,
    SupCon,
    Si,
    Mi,
    Ce,
}

impl Objective {
    pub fn invariance(self) -> Option<InvarianceKind> {
        match self {
            Objective::Vi => Some(InvarianceKind::Vi),
            Objective::SupCon => Some(InvarianceKind::SupCon),
            Objective::Si => Some(InvarianceKind::Si),
            Objective::Mi => Some(InvarianceKind::Mi),
            Objective::Ce => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Vi => "vi",
            Objective::SupCon => "supcon",
            Objective::Si => "si",
            Objective::Mi => "mi",
            Objective::Ce => "ce",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Modulations keep their random initialization (no orthogonalization).
    pub untrained_modulations: bool,
    /// MI draws a fresh random modulation for every sample and step.
    pub random_modulations: bool,
    /// Orthogonalization minimizes one-vs-rest BCE of a jointly trained
    /// readout instead of OPL.
    pub bce_instead_of_opl: bool,
    pub no_predictor: bool,
    pub no_stop_gradient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objectives: Vec<Objective>,
    pub lambda_mi: f64,
    pub lambda_bt: f64,
    /// Multiplier on every Barlow Twins term (VI, SI, MI).
    pub loss_scale: f64,
    pub views: usize,
    pub pretrain_epochs: usize,
    pub orthogonalization_epochs: usize,
    pub consolidation_epochs: usize,
    pub batch_size: usize,
    pub lr_feedforward: f64,
    pub lr_modulation: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objectives: vec![Objective::Vi, Objective::Mi],
            lambda_mi: 1.0,
            lambda_bt: DEFAULT_LAMBDA_BT,
            loss_scale: 0.1,
            views: 4,
            pretrain_epochs: 30,
            orthogonalization_epochs: 20,
            consolidation_epochs: 40,
            batch_size: 64,
            lr_feedforward: 1e-3,
            lr_modulation: 1e-2,
            weight_decay: 1e-4,
            warmup_epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn has(&self, o: Objective) -> bool {
        self.objectives.contains(&o)
    }

    /// Whether session 0 pretrains with the supervised terms only.
    pub fn supervised_only(&self) -> bool {
        !self.has(Objective::Vi) && (self.has(Objective::SupCon) || self.has(Objective::Ce))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.objectives.is_empty() {
            return fail("train.objectives must not be empty".into());
        }
        let mut sorted = self.objectives.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.objectives.len() {
            return fail("train.objectives lists an objective twice".into());
        }
        if !self.has(Objective::Vi) && !self.has(Objective::SupCon) && !self.has(Objective::Ce) {
            return fail("train.objectives needs vi, supcon or ce to pretrain on".into());
        }
        if self.views < 2 {
            return fail(format!("train.views must be >= 2, got {}", self.views));
        }
        if !(0.0..=1.0).contains(&self.lambda_mi) {
            return fail(format!("train.lambda_mi must be in [0, 1], got {}", self.lambda_mi));
        }
        for (name, e) in [
            ("pretrain_epochs", self.pretrain_epochs),
            ("orthogonalization_epochs", self.orthogonalization_epochs),
            ("consolidation_epochs", self.consolidation_epochs),
        ] {
            if e < 1 {
                return fail(format!("train.{name} must be >= 1"));
            }
        }
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return fail(format!("train.batch_size must be even and >= 4, got {}", self.batch_size));
        }
        if self.has(Objective::SupCon) && self.batch_size < 2 * self.views {
            return fail("train.batch_size must hold at least two SupCon groups of `views` samples".into());
        }
        let positive = [
            ("lr_feedforward", self.lr_feedforward),
            ("lr_modulation", self.lr_modulation),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("train.{name} must be positive"));
            }
        }
        let non_negative = [
            ("lambda_bt", self.lambda_bt),
            ("loss_scale", self.loss_scale),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("train.{name} must be non-negative"));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("train.{name} must be in [0, 1)"));
            }
        }
        if self.ablations.untrained_modulations && self.ablations.random_modulations {
            return fail("ablations untrained_modulations and random_modulations are exclusive".into());
        }
        Ok(())
    }
}
