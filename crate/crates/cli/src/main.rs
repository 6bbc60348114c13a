//! `taxonet` command-line driver.
//!
//! Exit codes: 0 success, 1 I/O or unexpected failure, 2 invalid input,
//! 3 taxonomy checksum mismatch, 4 training failure, 5 evaluation undefined.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "taxonet", version, about = "Hierarchical multi-label chest x-ray classification")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalOpts {
    /// Taxonomy file
    #[arg(long, global = true)]
    pub taxonomy: Option<PathBuf>,

    /// Manifest CSV
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    /// Run configuration (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for splitting, generation, initialization and training
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file or directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads (defaults to all cores)
    #[arg(long, global = true, env = "TAXONET_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Inspect a taxonomy file
    Taxonomy {
        #[command(subcommand)]
        action: TaxonomyAction,
    },
    /// Write ancestor-closed training targets for a manifest
    Propagate,
    /// Generate a synthetic planted-glyph dataset
    Synth {
        /// Number of images
        #[arg(long)]
        images: Option<usize>,
        /// Image side length in pixels
        #[arg(long)]
        size: Option<usize>,
    },
    /// Assign patient-disjoint train/val/test splits to a manifest
    Split {
        #[arg(long)]
        train: Option<f64>,
        #[arg(long)]
        val: Option<f64>,
        #[arg(long)]
        test: Option<f64>,
    },
    /// Train a model and write a checkpoint and history
    Train {
        /// Override the number of epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score images with a trained checkpoint
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only score records of this split
        #[arg(long)]
        split: Option<String>,
    },
    /// Per-node ROC/AUC report with bootstrap intervals and plots
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Bootstrap replicates (0 disables intervals)
        #[arg(long)]
        n_boot: Option<usize>,
        /// Extra subset analysis as FILTER:TARGET node ids
        #[arg(long = "subset", value_name = "FILTER:TARGET")]
        subsets: Vec<String>,
    },
    /// GradCAM heatmaps for selected images and nodes
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Node ids, comma separated
        #[arg(long, value_delimiter = ',', required = true)]
        nodes: Vec<String>,
        /// Image ids, comma separated; defaults to the first --limit records
        #[arg(long, value_delimiter = ',')]
        images: Vec<String>,
        #[arg(long, default_value_t = 8)]
        limit: usize,
        /// Backbone layer name (defaults to the last one)
        #[arg(long)]
        layer: Option<String>,
    },
    /// Hierarchy-consistency report of a prediction matrix
    Consistency {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = taxonet::labels::DEFAULT_CONSISTENCY_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Subcommand, Debug)]
pub enum TaxonomyAction {
    /// Parse and validate
    Validate { file: Option<PathBuf> },
    /// Print the tree
    Show { file: Option<PathBuf> },
    /// Print the canonical node index
    Index { file: Option<PathBuf> },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use taxonet::Error as E;
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<E>()) else {
        return 1;
    };
    match e {
        E::ChecksumMismatch { .. } => 3,
        E::Training(_) => 4,
        E::Undefined(_) => 5,
        E::Io(_) | E::Checkpoint { .. } => 1,
        E::Taxonomy { .. }
        | E::InvalidNodeId(_)
        | E::UnknownNode(_)
        | E::Manifest { .. }
        | E::InvalidInput(_)
        | E::DimensionMismatch(_)
        | E::Image { .. }
        | E::Csv(_)
        | E::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
