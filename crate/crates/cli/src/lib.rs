//! Config-driven experiment runner and verifier.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod verify;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{ExperimentConfig, ExperimentKind, OUTPUT_ROOT_ENV};
pub use error::{CliError, CliResult};
pub use output::{Manifest, MANIFEST};
pub use verify::{VerifyReport, VerifyStatus, VERIFY_REPORT};

#[derive(Debug, Parser)]
#[command(name = "varcurv", version, about = "Variance-curvature experiments: run, verify, list")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Check recorded outputs against re-derived oracles.
    Verify(RunArgs),
    /// List experiment kinds.
    ListExperiments,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config; an empty file runs the default smoke experiment.
    pub config: PathBuf,
    /// Override any config key by dotted path, e.g. `--set es.population=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (0 uses every core). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Root for relative output directories.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub fail_by_design: bool,
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("invalid value for `--threads`: {e}")))?;
    Ok(pool.install(f))
}

/// Runs `cfg` and writes its artifacts and manifest.
pub fn run_experiment(cfg: &ExperimentConfig, output_root: Option<&Path>, threads: usize) -> CliResult<RunResult> {
    let out = with_threads(threads, || experiments::produce(cfg))??;
    let dir = cfg.output_path(output_root);
    let manifest = Manifest::build(cfg.experiment.name(), cfg.seed, &out.artifacts);
    output::write_outputs(&dir, &manifest, &out.artifacts)?;
    Ok(RunResult {
        output_dir: dir,
        manifest,
        fail_by_design: out.fail_by_design,
    })
}

pub fn verify_experiment(cfg: &ExperimentConfig, output_root: Option<&Path>, threads: usize) -> CliResult<VerifyReport> {
    with_threads(threads, || verify::verify(cfg, output_root))?
}

/// Process exit code for an error.
pub fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Config(_) => 2,
        CliError::Numeric { .. } => 3,
        CliError::Io { .. } => 4,
        CliError::Verify(_) => 5,
    }
}

/// Executes a parsed command line, printing to stdout. Returns the exit code.
pub fn execute(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::ListExperiments => {
            for kind in ExperimentKind::ALL {
                println!("{:<14} {}", kind.name(), kind.description());
            }
            Ok(0)
        }
        Command::Run(args) => {
            let cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
            let res = run_experiment(&cfg, args.output_root.as_deref(), args.threads)?;
            for f in &res.manifest.files {
                println!("{}  {}", f.hash, res.output_dir.join(&f.file).display());
            }
            if res.fail_by_design {
                println!("analysis status: FAIL (reported as a value)");
            }
            Ok(0)
        }
        Command::Verify(args) => {
            let cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
            let report = verify_experiment(&cfg, args.output_root.as_deref(), args.threads)?;
            for c in &report.checks {
                println!("[{}] {} ({}): {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.tolerance, c.detail);
            }
            println!("status: {}", serde_json::to_value(report.status).expect("status serializes").as_str().unwrap_or(""));
            Ok(if report.status == VerifyStatus::Fail { 1 } else { 0 })
        }
    }
}
