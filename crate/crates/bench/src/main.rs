use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spuq_bench::commands::{cmd_analyze_trend, cmd_benchmark, cmd_generate, cmd_propagate, cmd_train, load_benchmark_config};
use spuq_bench::config::RunConfig;
use spuq_bench::training::resolve_cache_dir;
use spuq_core::sliceprop::PropagateOptions;
use spuq_core::volume::Dims;

#[derive(Parser)]
#[command(name = "spuq", version, about = "Slice propagation with uncertainty on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom suite and its manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        n_per_kind: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 24)]
        depth: usize,
    },
    /// Train the networks of one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Propagate an annotation through one volume.
    Propagate {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_verify: bool,
        #[arg(long)]
        no_refine: bool,
    },
    /// Run the propagator × strategy matrix.
    Benchmark {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated `propagator:strategy` cells, `*` wildcards allowed.
        #[arg(long)]
        matrix: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `<out>/cache`; SPUQ_CACHE_DIR takes precedence.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Recompute trend files from a finished benchmark.
    AnalyzeTrend {
        #[arg(long)]
        results_dir: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { out, seed, n_per_kind, height, width, depth } => {
            cmd_generate(&out, seed, n_per_kind, Dims::new(height, width, depth))?;
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let paths = cmd_train(&cfg)?;
            log::info!("wrote {} checkpoint(s) to {}", paths.len(), cfg.output.display());
        }
        Command::Propagate { checkpoints, volume, gt, out, seed, no_verify, no_refine } => {
            let opts = PropagateOptions { verify: !no_verify, refine: !no_refine, ..PropagateOptions::default() };
            cmd_propagate(&checkpoints, &volume, &gt, &out, &opts, seed)?;
        }
        Command::Benchmark { dataset, out, config, matrix, jobs, seed, cache_dir } => {
            let mut cfg = load_benchmark_config(config.as_deref())?;
            if let Some(m) = matrix {
                cfg.apply_matrix_filter(&m)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let flag = cache_dir.unwrap_or_else(|| out.join("cache"));
            let cache = resolve_cache_dir(Some(&flag), std::env::var("SPUQ_CACHE_DIR").ok());
            let run = cmd_benchmark(&cfg, &dataset, &out, cache, jobs)?;
            log::info!("benchmark finished in {:.0}s", run.seconds);
        }
        Command::AnalyzeTrend { results_dir } => {
            cmd_analyze_trend(&results_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
