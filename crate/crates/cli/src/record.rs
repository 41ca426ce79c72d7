use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tmcl_core::model::write_atomic;
use tmcl_core::trainer::{reference_accuracies, MetricsRecord, Trainer};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.json";

/// Fields that differ between otherwise identical runs.
pub const TIMESTAMP_FIELDS: [&str; 2] = ["started_at", "wall_clock_secs"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// One run's results, rewritten after every session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema: u32,
    /// SHA-256 of `config`, hex.
    pub config_hash: String,
    /// The configuration text exactly as run.
    pub config: String,
    pub method: String,
    pub seed: u64,
    pub label_fraction: f64,
    pub lambda_mi: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub metrics: MetricsRecord,
    /// Unix seconds at start.
    pub started_at: u64,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<PathBuf>,
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl RunRecord {
    pub fn hash_matches(&self) -> bool {
        config_hash(&self.config) == self.config_hash
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

/// The record as JSON with the timestamp fields removed, for comparing runs.
pub fn without_timestamps(record: &RunRecord) -> serde_json::Value {
    let mut v = serde_json::to_value(record).expect("record serializes");
    if let Some(obj) = v.as_object_mut() {
        for f in TIMESTAMP_FIELDS {
            obj.remove(f);
        }
    }
    v
}

/// Directory name of a run inside the output directory.
pub fn run_dir_name(cfg: &ExperimentConfig, seed: u64) -> String {
    let method: String = cfg
        .method()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{method}_lf{}_s{seed}", cfg.plan.label_fraction)
}

/// Where a run writes and whether it keeps per-session checkpoints.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub checkpoints: bool,
}

/// Trains `cfg` under `seed` and returns its record. With `out`, the record
/// is flushed after every session and on failure, so a crashed run leaves
/// the sessions it finished. `reference` skips training the per-task
/// reference models when transfer metrics are enabled.
pub fn execute(
    cfg: &ExperimentConfig,
    config_text: &str,
    seed: u64,
    out: Option<&RunOutput>,
    reference: Option<Vec<f64>>,
) -> Result<RunRecord, CliError> {
    let started = Instant::now();
    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let ds = cfg.dataset()?;
    let plan = cfg.session_plan(&ds, seed)?;
    let train = tmcl_core::trainer::TrainConfig { seed, ..cfg.train.clone() };
    let mut record = RunRecord {
        schema: SCHEMA_VERSION,
        config_hash: config_hash(config_text),
        config: config_text.to_string(),
        method: cfg.method(),
        seed,
        label_fraction: cfg.plan.label_fraction,
        lambda_mi: train.lambda_mi,
        status: RunStatus::Running,
        error: None,
        metrics: MetricsRecord::default(),
        started_at,
        wall_clock_secs: 0.0,
        artifacts: Vec::new(),
    };
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir)?;
    }

    let mut trainer = Trainer::new(&ds, &plan, cfg.model.clone(), train, cfg.eval.clone())?;
    if let Some(r) = reference {
        trainer = trainer.with_reference(r);
    }
    let save = |record: &RunRecord| -> Result<(), CliError> {
        match out {
            Some(o) => record.save(&o.dir.join(METRICS_FILE)),
            None => Ok(()),
        }
    };

    let result = trainer.run(|t, net, metrics| {
        if let Some(o) = out.filter(|o| o.checkpoints) {
            let name = format!("session{t}.ckpt");
            net.checkpoint().save(&o.dir.join(&name))?;
            record.artifacts.push(PathBuf::from(name));
        }
        record.metrics = metrics.clone();
        record.wall_clock_secs = started.elapsed().as_secs_f64();
        save(&record).map_err(|e| tmcl_core::Error::Io(std::io::Error::other(e.to_string())))?;
        info!("seed {seed}: session {t} done after {:.1}s", record.wall_clock_secs);
        Ok(())
    });
    record.metrics = trainer.metrics().clone();
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    match result {
        Ok(()) => {
            record.status = RunStatus::Complete;
            save(&record)?;
            Ok(record)
        }
        Err(e) => {
            record.status = RunStatus::Failed;
            record.error = Some(e.to_string());
            save(&record)?;
            Err(e.into())
        }
    }
}

/// Reference accuracies for `seed`, shared by every grid point of a sweep.
pub fn references(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>, CliError> {
    let ds = cfg.dataset()?;
    let plan = cfg.session_plan(&ds, seed)?;
    let train = tmcl_core::trainer::TrainConfig { seed, ..cfg.train.clone() };
    Ok(reference_accuracies(&ds, &plan, &cfg.model, &train)?)
}
