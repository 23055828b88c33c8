//! `liqsim`: simulation, tables and figures for markets with forced
//! liquidation.

mod commands;
mod error;
mod manifest;
mod svg;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use liqsim::{ExperimentConfig, Scheme};

use crate::commands::Figure;
use crate::error::CliError;
use crate::manifest::{sha256_hex, Output, RunManifest};

const THREADS_ENV: &str = "LIQSIM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "liqsim", version, about = "Portfolio choice under forced liquidation with price impact")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat JSON configuration; missing keys take the reference defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of simulated paths.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Number of time steps on [0, T].
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Price discretization: euler or exact-log.
    #[arg(long, global = true)]
    scheme: Option<Scheme>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    bridge_correction: Option<OnOff>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dump simulated paths as CSV.
    Simulate,
    /// Emit figure series as CSV and SVG.
    Figures {
        #[arg(long, value_enum, default_value = "all")]
        which: Figure,
    },
    /// Expected utilities of the three investors under log and power utility.
    Tables,
    /// Analytic and semi-analytic values.
    ClosedForm,
    /// Filter runs on scenario paths with error summaries.
    FilterDemo,
    /// BSDE solves with per-step regression diagnostics.
    BsdeDemo,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Figures { .. } => "figures",
            Command::Tables => "tables",
            Command::ClosedForm => "closed-form",
            Command::FilterDemo => "filter-demo",
            Command::BsdeDemo => "bsde-demo",
        }
    }
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.paths {
        cfg.n_paths = v;
    }
    if let Some(v) = cli.steps {
        cfg.steps = v;
    }
    if let Some(v) = cli.scheme {
        cfg.scheme = v;
    }
    if let Some(v) = &cli.out {
        cfg.output_dir = v.display().to_string();
    }
    if let Some(v) = cli.bridge_correction {
        cfg.bridge_correction = v == OnOff::On;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))
}

fn run(cli: Cli) -> Result<RunManifest, CliError> {
    init_threads()?;
    let cfg = effective_config(&cli)?;
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let config_json = cfg.to_json();
    let config_hash = sha256_hex(config_json.as_bytes());

    let mut out = Output::open(std::path::Path::new(&cfg.output_dir))?;
    out.write("config.json", format!("{config_json}\n").as_bytes())?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, &mut out)?,
        Command::Figures { which } => commands::figures(&cfg, which, &mut out)?,
        Command::Tables => commands::tables(&cfg, &mut out)?,
        Command::ClosedForm => commands::closed_form(&cfg, &mut out)?,
        Command::FilterDemo => commands::filter_demo(&cfg, &mut out)?,
        Command::BsdeDemo => commands::bsde_demo(&cfg, &mut out)?,
    }
    let manifest = RunManifest {
        command: cli.command.name().into(),
        version: format!("{}+{}", env!("CARGO_PKG_VERSION"), &config_hash[..12]),
        config_hash,
        seed: cfg.seed,
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        files: Vec::new(),
    };
    out.finish(manifest)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(m) => {
            for f in &m.files {
                println!("{}", f.name);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("liqsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
