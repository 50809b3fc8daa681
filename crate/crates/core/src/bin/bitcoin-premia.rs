#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bitcoin_premia::pipeline::{configure_workers, run_stage_with, Paths, PipelineConfig, Stage};
use bitcoin_premia::synth::{synth_market, SynthConfig};
use bitcoin_premia::{Error, Result};

#[derive(Parser)]
#[command(name = "bitcoin-premia", version, about = "Option-implied and physical return densities, risk premia and volatility regimes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Settings mirroring the TOML configuration; flags win over the file.
#[derive(Args)]
struct Global {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (overrides BITCOIN_PREMIA_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    n_bins: Option<usize>,
    #[arg(long, global = true)]
    target_tenor: Option<u32>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    grid_min: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    grid_max: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    grid_step: Option<f64>,
    /// trapezoid or uniform
    #[arg(long, global = true)]
    tenor_weighting: Option<String>,
    /// ward, complete, single or average
    #[arg(long, global = true)]
    linkage: Option<String>,
    #[arg(long, global = true)]
    carry_nearest: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and filter transactions; compute returns and realized variance.
    Ingest {
        #[arg(long)]
        quotes: Option<PathBuf>,
        #[arg(long)]
        spots: Option<PathBuf>,
        #[arg(long)]
        rates: Option<PathBuf>,
    },
    /// Fit one smile per expiry and date.
    FitSurface {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract risk-neutral densities and their CLR transforms.
    Rnd {
        #[arg(long)]
        surface: Option<PathBuf>,
        /// Comma-separated tenors in days.
        #[arg(long)]
        tenors: Option<String>,
    },
    /// Estimate the physical density from overlapping returns.
    Pdensity {
        #[arg(long)]
        returns: Option<PathBuf>,
    },
    /// Compute the model-free volatility index.
    Bvix {
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Unconditional premia and decomposition curves.
    Premia {
        #[arg(long)]
        densities: Option<PathBuf>,
        #[arg(long)]
        returns: Option<PathBuf>,
        #[arg(long)]
        rates: Option<PathBuf>,
        /// Return intervals such as "-0.6:-0.2,0.2:0.6".
        #[arg(long)]
        intervals: Option<String>,
    },
    /// Cluster dates by their multi-tenor CLR densities.
    Cluster {
        #[arg(long)]
        clr: Option<PathBuf>,
        #[arg(long)]
        tenors: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Conditional premia per cluster, ANOVA and summary.
    Report {
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Every stage in order.
    Run,
    /// Write a synthetic two-regime market to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Quote dates per regime.
        #[arg(long, default_value_t = 30)]
        days: usize,
        /// Multiplicative volatility noise.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| Error::Validation(format!("unknown {what} '{s}'")))
}

fn parse_tenors(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|_| Error::Validation(format!("bad tenor '{t}'"))))
        .collect()
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = &g.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    if let Some(v) = g.n_bins {
        cfg.n_bins = v;
    }
    if let Some(v) = g.target_tenor {
        cfg.target_tenor = v;
    }
    if let Some(v) = g.grid_min {
        cfg.grid_min = v;
    }
    if let Some(v) = g.grid_max {
        cfg.grid_max = v;
    }
    if let Some(v) = g.grid_step {
        cfg.grid_step = v;
    }
    if let Some(v) = &g.tenor_weighting {
        cfg.tenor_weighting = parse_enum("tenor weighting", v)?;
    }
    if let Some(v) = &g.linkage {
        cfg.linkage = parse_enum("linkage", v)?;
    }
    cfg.carry_nearest |= g.carry_nearest;
    Ok(cfg)
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn execute(cli: Cli) -> Result<()> {
    configure_workers(cli.global.workers)?;
    let mut cfg = load_config(&cli.global)?;

    // Stage-specific settings go into the config before paths are derived.
    let stage = match &cli.command {
        Command::Ingest { quotes, spots, rates } => {
            set(&mut cfg.quotes, quotes);
            set(&mut cfg.spots, spots);
            set(&mut cfg.rates, rates);
            Some(Stage::Ingest)
        }
        Command::FitSurface { .. } => Some(Stage::FitSurface),
        Command::Rnd { tenors, .. } | Command::Cluster { tenors, .. } => {
            if let Some(t) = tenors {
                cfg.tenors = parse_tenors(t)?;
            }
            if let Command::Cluster { k: Some(k), .. } = &cli.command {
                cfg.k = *k;
            }
            Some(if matches!(cli.command, Command::Rnd { .. }) { Stage::Rnd } else { Stage::Cluster })
        }
        Command::Pdensity { .. } => Some(Stage::Pdensity),
        Command::Bvix { .. } => Some(Stage::Bvix),
        Command::Premia { rates, intervals, .. } => {
            set(&mut cfg.rates, rates);
            set(&mut cfg.intervals, intervals);
            Some(Stage::Premia)
        }
        Command::Report { .. } => Some(Stage::Report),
        Command::Run => None,
        Command::Synth { out, days, noise } => {
            let sc = SynthConfig {
                seed: cfg.seed,
                ..SynthConfig::two_regimes(*days, *noise)
            };
            synth_market(&sc)?.write_to(out)?;
            println!("wrote synthetic market to {}", out.display());
            return Ok(());
        }
    };

    let mut paths = Paths::from_config(&cfg);
    match &cli.command {
        Command::FitSurface { input, out } => {
            set(&mut paths.quotes_clean, input);
            set(&mut paths.surface, out);
        }
        Command::Rnd { surface, .. } => set(&mut paths.surface, surface),
        Command::Pdensity { returns } => set(&mut paths.returns, returns),
        Command::Bvix { input } => set(&mut paths.quotes_clean, input),
        Command::Premia { densities, returns, .. } => {
            set(&mut paths.densities, densities);
            set(&mut paths.returns, returns);
        }
        Command::Cluster { clr, .. } => set(&mut paths.clr, clr),
        Command::Report { labels } => set(&mut paths.labels, labels),
        _ => {}
    }

    let stages: Vec<Stage> = match stage {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    for s in stages {
        let written = run_stage_with(s, &cfg, &paths)?;
        println!("{s}: {} artifacts", written.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
