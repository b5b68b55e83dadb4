//! Command-line entry point: data generation, training, decoding, and
//! evaluation, all reproducible from a single seed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Overrides;

#[derive(Parser)]
#[command(
    name = "ggd",
    about = "Sequence-to-sequence training and decoding laboratory with \
             noise-relaxed generator training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// adadelta or rmsprop
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_g: Option<usize>,
    #[arg(long)]
    n_d: Option<usize>,
    #[arg(long)]
    entropy_reg: Option<bool>,
    /// st-gumbel or st
    #[arg(long)]
    estimator: Option<String>,
    /// sampling or greedy
    #[arg(long)]
    gen_mode: Option<String>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_updates: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            data_dir: self.data_dir.clone(),
            tau: self.tau,
            lr: self.lr,
            optimizer: self.optimizer.clone(),
            batch_size: self.batch_size,
            n_g: self.n_g,
            n_d: self.n_d,
            entropy_reg: self.entropy_reg,
            estimator: self.estimator.clone(),
            gen_mode: self.gen_mode.clone(),
            max_epochs: self.max_epochs,
            max_updates: self.max_updates,
            eval_every: self.eval_every,
            patience: self.patience,
        }
    }

    fn resolve(&self) -> ggd_core::Result<config::Resolved> {
        let file = config::load_file(self.config.as_deref())?;
        config::resolve(&file, &self.overrides())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic translation task (corpora + vocabularies).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Teacher-forcing pretraining; writes checkpoint.ckpt and metrics.csv.
    TrainMle {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Policy-gradient fine-tuning of a pretrained checkpoint.
    TrainRl {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generator/discriminator training of a pretrained checkpoint; writes
    /// generator.ckpt, discriminator.ckpt, and metrics.csv.
    TrainGgd {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decode an input file (one sentence per line) with a checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// greedy, sample, or beam:S
        #[arg(long, default_value = "greedy")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Hypotheses file (one sentence per line).
        #[arg(long)]
        out_hyp: PathBuf,
        /// Per-sentence log-probabilities (defaults to out_hyp with .logp).
        #[arg(long)]
        out_logp: Option<PathBuf>,
    },
    /// Corpus BLEU (greedy and beam) plus mean per-token log-likelihood.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Optional per-sentence CSV report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode with paired noise and dump every noise component to CSV.
    InspectNoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: PathBuf,
        /// greedy, sample, or beam:S
        #[arg(long, default_value = "sample")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> ggd_core::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { cfg } => commands::gen_data(&cfg.resolve()?),
        Command::TrainMle { cfg } => commands::train_mle(&cfg.resolve()?),
        Command::TrainRl { cfg, checkpoint } => commands::train_rl(&cfg.resolve()?, &checkpoint),
        Command::TrainGgd { cfg, checkpoint } => commands::train_ggd(&cfg.resolve()?, &checkpoint),
        Command::Decode {
            checkpoint,
            input,
            mode,
            seed,
            tau,
            out_hyp,
            out_logp,
        } => commands::decode(
            &checkpoint,
            &input,
            &mode,
            seed,
            &out_hyp,
            out_logp.as_deref(),
            tau,
        ),
        Command::Eval { checkpoint, src, reference, beam, report } => {
            commands::eval(&checkpoint, &src, &reference, beam, report.as_deref())
        }
        Command::InspectNoise { checkpoint, src, mode, seed, tau, out } => {
            commands::inspect_noise(&checkpoint, &src, &mode, seed, tau, &out)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
