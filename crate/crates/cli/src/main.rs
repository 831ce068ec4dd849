//! `worldgen` — batch experiments for the adaptive multimodal world
//! generation lab: corpus synthesis, control extraction, branch training,
//! controlled generation, tiled upscaling, evaluation, and scaling
//! benchmarks. All numeric knobs live in JSON configs; flags select files
//! and commands.

mod commands;
mod config;
mod pipeline;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "worldgen", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus of moving-rectangle clips with ground truth.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Produce control videos (vis/edge/depth/seg/hdmap/lidar) for a corpus.
    Extract {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one control branch against a frozen base model.
    TrainBranch {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample videos, optionally fused with trained branches and a weight map.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build spatiotemporal control maps from masks + labels with a preset.
    Weightmap {
        #[arg(long)]
        config: PathBuf,
    },
    /// Patch-based tiled upscaling with per-step overlap averaging.
    Upscale {
        #[arg(long)]
        config: PathBuf,
        /// Tile grid, e.g. 3x3.
        #[arg(long, default_value = "3x3")]
        grid: String,
        /// Overlap in pixels (multiple of 16).
        #[arg(long, default_value_t = 16)]
        overlap: usize,
        /// Upscale factor.
        #[arg(long, default_value_t = 2)]
        scale: usize,
        /// Denoising steps.
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Metric report for generated videos against their corpus.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Parallel-inference scaling benchmark (Diffusion only / End-to-end).
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated worker counts.
        #[arg(long, default_value = "1,2,4,8")]
        workers: String,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow::anyhow!("grid must look like 3x3, got '{s}'"))?;
    Ok((r.trim().parse()?, c.trim().parse()?))
}

fn parse_workers(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(Into::into))
        .collect()
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { config } => {
            let bytes = std::fs::read(config)?;
            let cfg = config::load_config(config)?;
            commands::cmd_synth(&cfg, &bytes)
        }
        Command::Extract { config } => {
            let bytes = std::fs::read(config)?;
            let cfg = config::load_config(config)?;
            commands::cmd_extract(&cfg, &bytes)
        }
        Command::TrainBranch { config } => {
            let bytes = std::fs::read(config)?;
            let cfg = config::load_config(config)?;
            commands::cmd_train_branch(&cfg, &bytes)
        }
        Command::Generate { config } => {
            let bytes = std::fs::read(config)?;
            let cfg = config::load_config(config)?;
            commands::cmd_generate(&cfg, &bytes)
        }
        Command::Weightmap { config } => {
            let bytes = std::fs::read(config)?;
            let cfg = config::load_config(config)?;
            commands::cmd_weightmap(&cfg, &bytes)
        }
        Command::Upscale { config, grid, overlap, scale, steps, seed } => {
            let bytes = std::fs::read(config)?;
            let cfg = config::load_config(config)?;
            let flags = commands::UpscaleFlags {
                grid: parse_grid(grid)?,
                overlap_px: *overlap,
                scale: *scale,
                steps: *steps,
                seed: *seed,
            };
            commands::cmd_upscale(&cfg, &flags, &bytes)
        }
        Command::Eval { config } => {
            let bytes = std::fs::read(config)?;
            let cfg = config::load_config(config)?;
            commands::cmd_eval(&cfg, &bytes)
        }
        Command::Bench { config, workers, steps, seed, out } => {
            let bytes = std::fs::read(config)?;
            let cfg = config::load_config(config)?;
            let flags = commands::BenchFlags {
                workers: parse_workers(workers)?,
                steps: *steps,
                seed: *seed,
                out_csv: out.clone(),
            };
            commands::cmd_bench(&cfg, &flags, &bytes)
        }
    }
}
