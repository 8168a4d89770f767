//! Argument parsing for the `cadyq` binary.

use std::path::PathBuf;

use cadyq_core::network::Mode;
use clap::{Parser, Subcommand};

use crate::commands::{self, EvalOptions};
use crate::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "cadyq", version, about = "Content-aware dynamic feature quantization for super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the uniform 8-bit teacher.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// History CSV; defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train a dynamic student from a teacher.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a model on a directory of HR PNGs (LR by box downsampling).
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Metrics CSV.
        #[arg(long)]
        out: PathBuf,
        /// Write per-image bit-map heatmaps into this directory.
        #[arg(long)]
        bitmap: Option<PathBuf>,
        /// Write super-resolved PNGs into this directory.
        #[arg(long)]
        sr: Option<PathBuf>,
        /// Dump every ledger entry to this CSV.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Override the stored mode: student, fixed<bits> or float32.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value_t = 96)]
        tile: usize,
        #[arg(long, default_value_t = 6)]
        overlap: usize,
    },
    /// Train or evaluate once per value of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// w_reg_init, patch_size (evaluation tile) or candidate_bits.
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Reuse a saved teacher instead of pretraining one.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Evaluation PNGs; the held-out synthetic set otherwise.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Write procedural training images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Executes a parsed command and returns the line to print on stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Pretrain { config, out, history } => {
            commands::run_pretrain(&commands::load_config(&config)?, &out, history.as_deref())
        }
        Command::Train { config, teacher, out, history } => {
            commands::run_train(&commands::load_config(&config)?, &teacher, &out, history.as_deref())
        }
        Command::Eval { model, images, out, bitmap, sr, ledger, mode, tile, overlap } => {
            let mode = mode.map(|m| Mode::parse(&m)).transpose().map_err(|e| CliError::Config(format!("mode: {e}")))?;
            let opts = EvalOptions { tile, overlap, mode, bitmap_dir: bitmap, sr_dir: sr, ledger };
            commands::run_eval(&model, &images, &out, &opts)
        }
        Command::Sweep { config, param, values, out, teacher, images } => commands::run_sweep(
            &commands::load_config(&config)?,
            &param,
            &values,
            &out,
            teacher.as_deref(),
            images.as_deref(),
        ),
        Command::Synth { out, count, size, seed } => {
            let files = commands::run_synth(&out, count, size, seed)?;
            Ok(format!("manifest command=synth seed={seed} files={}", files.len()))
        }
    }
}
