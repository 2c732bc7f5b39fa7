use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod context;

use context::Preset;

/// Synthetic co-registered world, joint vision-tabular masked autoencoder
/// training, and linear-probe evaluation.
#[derive(Parser, Debug)]
#[command(name = "geotab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (`key=value`), repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding the dataset and every output.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Base settings the configuration file refines.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic world and its region manifest.
    Generate {
        #[arg(long)]
        seed: Option<u64>,
        /// Also write every train/val/holdout region as a binary file.
        #[arg(long)]
        write_regions: bool,
    },
    /// Pretrain the vision encoder as a masked autoencoder.
    Pretrain {
        #[arg(long)]
        resume: bool,
    },
    /// Joint masked-autoencoding training.
    Train {
        /// Train the tabular-only model used by the late-fusion baseline.
        #[arg(long)]
        tabular_only: bool,
        /// Start from a fresh vision encoder instead of pretrain.ck.
        #[arg(long)]
        no_pretrain: bool,
        #[arg(long)]
        resume: bool,
    },
    /// Write an embedding table.
    Embed {
        /// model, tab, vis_mean, concat or late_fusion.
        #[arg(long, default_value = "model")]
        table: String,
    },
    /// Fit a ridge probe of the planted target on an embedding table.
    Probe {
        #[arg(long, default_value = "model")]
        table: String,
        /// random or region.
        #[arg(long, default_value = "random")]
        split: String,
    },
    /// Principal components of an embedding table.
    Pca {
        #[arg(long, default_value = "model")]
        table: String,
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Masked reconstruction grids for the region around one tract.
    Reconstruct {
        #[arg(long)]
        tract: u64,
        #[arg(long, default_value_t = 0)]
        mask_seed: u64,
    },
    /// Train and probe every value of one ablation axis.
    Ablate {
        /// tab_dim, encodings, fusion_capacity, tab_mask or row_attn.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis default grid when omitted.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Tab-from-vis attention mass near each tract against uniform attention.
    AttnStats {
        #[arg(long, default_value_t = 10.0)]
        radius_km: f64,
        /// Validation regions to pool over.
        #[arg(long, default_value_t = 50)]
        regions: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
