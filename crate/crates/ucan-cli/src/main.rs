//! `ucan`: command-line driver for forward-only recommender unlearning.
//!
//! Six subcommands cover the experiment lifecycle. `train` fits the
//! deployed adapter model and writes its checkpoint next to the split
//! manifest it was trained against. `split` materializes the forget/retain
//! manifest without training. `unlearn` applies the one-shot attenuation
//! pass to a checkpoint. `baseline` runs the retraining, gradient, and
//! pruning competitors. `eval` compares two checkpoints over the manifest
//! protocol and emits JSON plus CSV reports. `sweep` repeats unlearn+eval
//! across a parameter grid and emits one CSV row per grid point, ordered
//! by the swept value.
//!
//! Settings resolve as: command-line flag, then TOML config file, then
//! built-in default. The output directory resolves as `--out`, then the
//! `UCAN_OUT_DIR` environment variable, then `out_dir` from the config
//! file, then `ucan-out/<config-hash>`. Every artifact records the
//! resolved config hash; unlearn, baseline, and eval all refuse inputs
//! whose lineage hashes disagree.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or checkpoint
//! error, 4 numeric failure.

mod ops;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ucan",
    version,
    about = "Utility-aware one-shot unlearning for adapter recommenders"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Settings shared by every subcommand.
#[derive(Args, Default)]
pub struct CommonOpts {
    /// TOML config file; command-line flags take precedence over it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed for every random substream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (beats UCAN_OUT_DIR and the config file).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Corpus selection and split fractions.
#[derive(Args, Default)]
pub struct DataOpts {
    /// Dataset kind: synthetic or ml100k.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Ratings file, required for ml100k.
    #[arg(long, value_name = "FILE")]
    pub data_path: Option<PathBuf>,
    /// Item-title metadata file; items missing from it are dropped.
    #[arg(long, value_name = "FILE")]
    pub titles: Option<PathBuf>,
    /// Synthetic corpus: number of users.
    #[arg(long)]
    pub users: Option<u32>,
    /// Synthetic corpus: vocabulary size.
    #[arg(long)]
    pub items: Option<u32>,
    /// Synthetic corpus: cluster share of each user's history.
    #[arg(long)]
    pub cluster_fraction: Option<f64>,
    /// Fraction of each user's events routed to the forget side.
    #[arg(long)]
    pub forget_fraction: Option<f64>,
}

/// Model and optimizer settings for training runs.
#[derive(Args, Default)]
pub struct TrainOpts {
    /// Embedding width.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Hidden layer width.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Adapter rank.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Scale of the frozen backbone initialization.
    #[arg(long)]
    pub w0_scale: Option<f32>,
    /// SGD step size.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Full passes over the training pairs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size, also reused as the evaluation batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Prompt window length in tokens.
    #[arg(long)]
    pub max_len: Option<usize>,
}

/// Attenuation settings; also used by prune-style baselines for scoring.
#[derive(Args, Default)]
pub struct UcanOpts {
    /// Contrast strength applied to the retain reference.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Mixing weight between forgetting signal and utility penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Risk threshold; dimensions scoring strictly above are edited.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Retention ceiling at the threshold boundary.
    #[arg(long)]
    pub alpha_max: Option<f64>,
    /// Decay sharpness exponent.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Ablation tags: F no-utility, C no-contrast, H hard-mask.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Edit target: adapter or full.
    #[arg(long)]
    pub target: Option<String>,
    /// Score utility on the 4-bit dequantized proxy weights.
    #[arg(long)]
    pub quant_proxy: bool,
}

/// Competitor settings for the baseline subcommand.
#[derive(Args, Default)]
pub struct BaselineOpts {
    /// Competitor: retrain, ga, npo, or prune.
    #[arg(long)]
    pub method: Option<String>,
    /// Step size for the gradient baselines.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Full passes over the forget set.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Preference-loss sharpness.
    #[arg(long)]
    pub npo_beta: Option<f64>,
    /// Fraction of input dimensions zeroed per layer by pruning.
    #[arg(long)]
    pub prune_fraction: Option<f64>,
    /// Ascent aborts once mean loss exceeds this multiple of its start.
    #[arg(long)]
    pub divergence_cap: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the corpus, split it, train the deployed model, write artifacts.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Write the forget/retain split manifest without training.
    Split {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
    },
    /// One-shot forward-only unlearning pass over a deployed checkpoint.
    Unlearn {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        ucan: UcanOpts,
        /// Deployed checkpoint to edit.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Split manifest the checkpoint was trained against.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
    },
    /// Retraining, gradient, or pruning competitor on a deployed checkpoint.
    Baseline {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        ucan: UcanOpts,
        #[command(flatten)]
        baseline: BaselineOpts,
        /// Deployed checkpoint to edit.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Split manifest the checkpoint was trained against.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
    },
    /// Compare two checkpoints over the manifest protocol.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Reference checkpoint, usually the deployed model.
        #[arg(long, value_name = "FILE")]
        original: PathBuf,
        /// Edited checkpoint under evaluation.
        #[arg(long, value_name = "FILE")]
        candidate: PathBuf,
        /// Split manifest both checkpoints were trained against.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Method label recorded in the report.
        #[arg(long, default_value = "candidate")]
        label: String,
        /// Run-record JSON from the producing command; its wall clock and
        /// gradient counts are merged into the report.
        #[arg(long, value_name = "FILE")]
        timing: Option<PathBuf>,
    },
    /// Unlearn+eval across a parameter grid; one CSV row per grid point.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        ucan: UcanOpts,
        /// Deployed checkpoint each grid point starts from.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Split manifest the checkpoint was trained against.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Swept parameter: tau or lambda.
        #[arg(long)]
        param: String,
        /// Comma-separated grid values, e.g. 0.1,0.2,0.3,0.4.
        #[arg(long)]
        grid: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { common, data, train } => ops::cmd_train(&common, &data, &train),
        Cmd::Split { common, data } => ops::cmd_split(&common, &data),
        Cmd::Unlearn { common, ucan, checkpoint, manifest } => {
            ops::cmd_unlearn(&common, &ucan, &checkpoint, &manifest)
        }
        Cmd::Baseline { common, ucan, baseline, checkpoint, manifest } => {
            ops::cmd_baseline(&common, &ucan, &baseline, &checkpoint, &manifest)
        }
        Cmd::Eval { common, original, candidate, manifest, label, timing } => {
            ops::cmd_eval(&common, &original, &candidate, &manifest, &label, timing.as_deref())
        }
        Cmd::Sweep { common, ucan, checkpoint, manifest, param, grid } => {
            ops::cmd_sweep(&common, &ucan, &checkpoint, &manifest, &param, &grid)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
