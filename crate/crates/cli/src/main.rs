use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};
use tmcl_cli::config::ExperimentConfig;
use tmcl_cli::error::CliError;
use tmcl_cli::record::{self, RunOutput};
use tmcl_cli::{report, verify};
use tmcl_core::trainer::Objective;

#[derive(Parser)]
#[command(name = "tmcl-lab", version, about = "Task-modulated contrastive learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration for one or more seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable; defaults to the config's `train.seed`.
        #[arg(long)]
        seed: Vec<u64>,
        /// Output directory; defaults to the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker processes, one seed each.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Skip the per-session checkpoints.
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Train the MI-weight grid of the config's `[sweep]` table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable; defaults to `sweep.seeds`.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker processes, one seed (with all its grid points) each.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Summarize run records as CSV or SVG.
    Report {
        /// Record files, directories holding them, or glob patterns.
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// CSV file (stdout if omitted) or SVG directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast invariant suite.
    Verify {
        /// Inject a sign flip into the Barlow Twins off-diagonal term.
        #[arg(long)]
        mutate: bool,
    },
    /// Generate the configured dataset and write it to a file.
    MakeData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Run { config, seed, out, jobs, no_checkpoints } => run(&config, seed, out, jobs, !no_checkpoints),
        Cmd::Sweep { config, seed, out, jobs, no_checkpoints } => sweep(&config, seed, out, jobs, !no_checkpoints),
        Cmd::Report { records, format, out } => report_cmd(&records, format, out),
        Cmd::Verify { mutate } => verify_cmd(mutate),
        Cmd::MakeData { config, out, seed } => make_data(&config, &out, seed),
    }
}

fn run(path: &Path, seeds: Vec<u64>, out: Option<PathBuf>, jobs: usize, checkpoints: bool) -> Result<(), CliError> {
    let (cfg, text) = ExperimentConfig::load(path)?;
    let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds };
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    if jobs > 1 && seeds.len() > 1 {
        let children = seeds
            .iter()
            .map(|s| child_args("run", path, *s, &out, checkpoints))
            .collect();
        return fan_out(children, jobs);
    }
    for seed in seeds {
        let dir = out.join(record::run_dir_name(&cfg, seed));
        info!("run {} seed {seed} -> {}", cfg.method(), dir.display());
        let rec = record::execute(&cfg, &text, seed, Some(&RunOutput { dir, checkpoints }), None)?;
        info!("seed {seed}: final kNN {:.4}", rec.metrics.final_knn().unwrap_or(f64::NAN));
    }
    Ok(())
}

fn sweep(path: &Path, seeds: Vec<u64>, out: Option<PathBuf>, jobs: usize, checkpoints: bool) -> Result<(), CliError> {
    let (cfg, _) = ExperimentConfig::load(path)?;
    if !cfg.train.has(Objective::Mi) {
        return Err(CliError::Config("sweep varies lambda_mi, so train.objectives must include mi".into()));
    }
    if cfg.sweep.lambda_mi.is_empty() {
        return Err(CliError::Config("sweep.lambda_mi is empty".into()));
    }
    let seeds = if seeds.is_empty() { cfg.sweep.seeds.clone() } else { seeds };
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    if jobs > 1 && seeds.len() > 1 {
        let children = seeds
            .iter()
            .map(|s| child_args("sweep", path, *s, &out, checkpoints))
            .collect();
        return fan_out(children, jobs);
    }
    for seed in seeds {
        // The reference models do not depend on the MI weight.
        let reference = if cfg.eval.transfer { Some(record::references(&cfg, seed)?) } else { None };
        for &lambda in &cfg.sweep.lambda_mi {
            let mut point = cfg.clone();
            point.train.lambda_mi = lambda;
            let text = point.to_toml();
            let dir = out.join(record::run_dir_name(&point, seed));
            info!("sweep lambda_mi={lambda} seed {seed} -> {}", dir.display());
            record::execute(&point, &text, seed, Some(&RunOutput { dir, checkpoints }), reference.clone())?;
        }
    }
    Ok(())
}

fn child_args(verb: &str, config: &Path, seed: u64, out: &Path, checkpoints: bool) -> Vec<String> {
    let mut args = vec![
        verb.to_string(),
        "--config".into(),
        config.display().to_string(),
        "--seed".into(),
        seed.to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    if !checkpoints {
        args.push("--no-checkpoints".into());
    }
    args
}

/// Runs each argument list as a child process of this binary, at most
/// `jobs` at a time, and reports the most severe failure.
fn fan_out(children: Vec<Vec<String>>, jobs: usize) -> Result<(), CliError> {
    let exe = std::env::current_exe()?;
    let mut pending = children.into_iter();
    let mut running: Vec<(Vec<String>, Child)> = Vec::new();
    let mut worst: Option<(u8, String)> = None;
    loop {
        while running.len() < jobs {
            let Some(args) = pending.next() else { break };
            let child = Command::new(&exe).args(&args).spawn()?;
            running.push((args, child));
        }
        if running.is_empty() {
            break;
        }
        let (args, mut child) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            let code = status.code().map_or(2, |c| c.clamp(1, 3) as u8);
            let msg = format!("worker `{}` exited with {status}", args.join(" "));
            error!("{msg}");
            if worst.as_ref().is_none_or(|(c, _)| code > *c) {
                worst = Some((code, msg));
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((1, m)) => Err(CliError::Config(m)),
        Some((3, m)) => Err(CliError::Verification(m)),
        Some((_, m)) => Err(CliError::Runtime(m)),
    }
}

fn report_cmd(inputs: &[PathBuf], format: Format, out: Option<PathBuf>) -> Result<(), CliError> {
    let files = report::expand_inputs(inputs)?;
    let records = report::load_records(&files)?;
    match format {
        Format::Csv => {
            let csv = report::summary_csv(&records)?;
            match out {
                Some(p) => std::fs::write(&p, csv)?,
                None => print!("{csv}"),
            }
        }
        Format::Svg => {
            let dir = out.unwrap_or_else(|| PathBuf::from("."));
            for p in report::write_svgs(&records, &dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn verify_cmd(mutate: bool) -> Result<(), CliError> {
    if mutate {
        info!("mutation mode: Barlow Twins off-diagonal sign flipped");
    }
    let checks = verify::run_checks(mutate);
    print!("{}", verify::render_table(&checks));
    if verify::all_passed(&checks) {
        Ok(())
    } else {
        let n = checks.iter().filter(|c| !c.passed).count();
        Err(CliError::Verification(format!("{n} check(s) failed")))
    }
}

fn make_data(path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let (mut cfg, _) = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.data_seed = s;
    }
    cfg.data_file = None;
    let ds = cfg.dataset()?;
    ds.save(out)?;
    info!("wrote {} train and {} test samples to {}", ds.train.len(), ds.test.len(), out.display());
    Ok(())
}
