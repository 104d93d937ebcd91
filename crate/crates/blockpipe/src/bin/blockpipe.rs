//! blockpipe CLI: train, distill, bench, trace, kvsim, sweep, init-config.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime/divergence
//! error. The BLOCKPIPE_THREADS environment variable overrides --threads.

use blockpipe::cli::{
    cmd_bench, cmd_distill, cmd_kvsim, cmd_sweep, cmd_trace, cmd_train, cmd_train_ar, RunConfig,
};
use blockpipe::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "blockpipe", version, about = "Masked discrete-diffusion decoding engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (0 = all cores). BLOCKPIPE_THREADS overrides this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the bidirectional teacher (or a block-diffusion model per the
    /// configured regime).
    Train,
    /// Train the block-size-1 model for the autoregressive bench row.
    TrainAr,
    /// Distill the block-causal student from a teacher checkpoint.
    Distill,
    /// Benchmark the configured decoders over identical episodes.
    Bench,
    /// Aggregate decode-order traces into heatmap data.
    Trace,
    /// Emit block-1 KV similarity matrices for both attention patterns.
    Kvsim,
    /// Grid-sweep decode thresholds and block sizes.
    Sweep,
    /// Write a default configuration file.
    InitConfig,
}

fn effective_threads(flag: usize) -> usize {
    match std::env::var("BLOCKPIPE_THREADS") {
        Ok(v) => v.parse().unwrap_or(flag),
        Err(_) => flag,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let threads = effective_threads(cli.threads);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    let config_path = cli.config.clone().unwrap_or_else(|| PathBuf::from("blockpipe.json"));
    if matches!(cli.command, Command::InitConfig) {
        let mut cfg = RunConfig::default();
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = cli.out {
            cfg.out_dir = out;
        }
        cfg.save(&config_path)?;
        println!("wrote default config to {}", config_path.display());
        return Ok(());
    }

    let mut cfg = RunConfig::load(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }

    match cli.command {
        Command::Train => {
            cmd_train(&cfg)?;
        }
        Command::TrainAr => {
            cmd_train_ar(&cfg)?;
        }
        Command::Distill => {
            cmd_distill(&cfg)?;
        }
        Command::Bench => {
            cmd_bench(&cfg)?;
        }
        Command::Trace => {
            cmd_trace(&cfg)?;
        }
        Command::Kvsim => {
            cmd_kvsim(&cfg)?;
        }
        Command::Sweep => {
            cmd_sweep(&cfg)?;
        }
        Command::InitConfig => unreachable!(),
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
