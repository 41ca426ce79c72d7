use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmcl_core::datastream::{generate, split_sessions, DataSpec, SessionPlan, SyntheticDataset};
use tmcl_core::model::ModelConfig;
use tmcl_core::rng;
use tmcl_core::trainer::{EvalConfig, Objective, TrainConfig};

use crate::error::CliError;

/// How classes are split into sessions and which labels are revealed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub sessions: usize,
    pub label_fraction: f64,
    pub split_seed: u64,
    pub label_seed: u64,
    /// Derive the class split from the run seed instead of `split_seed`.
    pub per_seed_split: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            sessions: 4,
            label_fraction: 1.0,
            split_seed: 0,
            label_seed: 0,
            per_seed_split: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambda_mi: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_mi: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: vec![0, 1, 2, 3],
        }
    }
}

/// Everything one experiment needs. Stored as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in reports; derived from the objectives when empty.
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data_seed: u64,
    /// Load the dataset from a `make-data` file instead of generating it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_file: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            out_dir: default_out_dir(),
            data_seed: 0,
            data_file: None,
            data: DataSpec::default(),
            plan: PlanConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates. Parse errors carry the line and key.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        if self.model.input_dim != self.data.dim {
            return Err(CliError::Config(format!(
                "model.input_dim ({}) must equal data.dim ({})",
                self.model.input_dim, self.data.dim
            )));
        }
        if self.plan.sessions == 0 || self.data.num_classes % self.plan.sessions != 0 {
            return Err(CliError::Config(format!(
                "plan.sessions ({}) must divide data.num_classes ({})",
                self.plan.sessions, self.data.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.plan.label_fraction) {
            return Err(CliError::Config("plan.label_fraction must be in [0, 1]".into()));
        }
        if self.sweep.lambda_mi.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(CliError::Config("sweep.lambda_mi values must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Report label: `name` if set, else the objectives joined by `+`, with
    /// ablations in brackets and a non-unit MI weight appended.
    pub fn method(&self) -> String {
        if !self.name.is_empty() {
            return self.name.clone();
        }
        let mut s: String = self.train.objectives.iter().map(|o| o.name()).collect::<Vec<_>>().join("+");
        let a = &self.train.ablations;
        let flags: Vec<&str> = [
            (a.untrained_modulations, "untrained"),
            (a.random_modulations, "random"),
            (a.bce_instead_of_opl, "bce"),
            (a.no_predictor, "no-predictor"),
            (a.no_stop_gradient, "no-stop-grad"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if !flags.is_empty() {
            s.push_str(&format!("[{}]", flags.join(",")));
        }
        if self.train.has(Objective::Mi) && self.train.lambda_mi != 1.0 {
            s.push_str(&format!("@lmi={}", self.train.lambda_mi));
        }
        s
    }

    pub fn dataset(&self) -> Result<SyntheticDataset, CliError> {
        match &self.data_file {
            Some(p) => {
                let ds = SyntheticDataset::load(p)?;
                if ds.spec.dim != self.model.input_dim {
                    return Err(CliError::Config(format!(
                        "{} holds {}-dimensional data, model.input_dim is {}",
                        p.display(),
                        ds.spec.dim,
                        self.model.input_dim
                    )));
                }
                Ok(ds)
            }
            None => Ok(generate(self.data_seed, &self.data)?),
        }
    }

    pub fn session_plan(&self, ds: &SyntheticDataset, seed: u64) -> Result<SessionPlan, CliError> {
        let p = &self.plan;
        let split_seed = if p.per_seed_split {
            rng::derive_seed(p.split_seed, &[rng::tag("per-seed-split"), seed])
        } else {
            p.split_seed
        };
        Ok(split_sessions(ds, p.sessions, p.label_fraction, split_seed, p.label_seed)?)
    }
}
