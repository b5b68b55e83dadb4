//! Run configuration: TOML file plus command-line overrides, resolved with
//! precedence flag > file > default. Every run writes its fully-resolved
//! configuration next to its outputs so it can be reproduced bit-for-bit.

use std::path::{Path, PathBuf};

use ggd_core::data::SyntheticTaskSpec;
use ggd_core::gumbel::Estimator;
use ggd_core::model::ModelConfig;
use ggd_core::training::{GenMode, OptimizerKind, TrainConfig};
use ggd_core::{GgdError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub attn_dim: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub vocab_size: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub train: Option<usize>,
    pub valid: Option<usize>,
    pub test: Option<usize>,
    pub reverse: Option<bool>,
    pub cipher: Option<bool>,
    pub swap_prob: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding train/valid/test corpus files and vocabularies.
    pub dir: Option<PathBuf>,
    /// Sentences longer than this many tokens (pre-EOS) are dropped.
    pub load_cap: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: Option<String>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub tau: Option<f64>,
    pub n_g: Option<usize>,
    pub n_d: Option<usize>,
    pub entropy_reg: Option<bool>,
    pub estimator: Option<String>,
    pub gen_mode: Option<String>,
    pub max_epochs: Option<usize>,
    pub max_updates: Option<usize>,
    pub eval_every: Option<usize>,
    pub patience: Option<usize>,
}

/// Fully-resolved configuration, serialized next to every run's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ResolvedModel,
    pub task: ResolvedTask,
    pub data: ResolvedData,
    pub train: ResolvedTrain,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedModel {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedTask {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub reverse: bool,
    pub cipher: bool,
    pub swap_prob: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedData {
    pub dir: PathBuf,
    pub load_cap: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedTrain {
    pub optimizer: String,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub n_g: usize,
    pub n_d: usize,
    pub entropy_reg: bool,
    pub estimator: String,
    pub gen_mode: String,
    pub max_epochs: usize,
    pub max_updates: usize,
    pub eval_every: usize,
    pub patience: usize,
}

/// Command-line overrides applied on top of the file values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub tau: Option<f64>,
    pub lr: Option<f64>,
    pub optimizer: Option<String>,
    pub batch_size: Option<usize>,
    pub n_g: Option<usize>,
    pub n_d: Option<usize>,
    pub entropy_reg: Option<bool>,
    pub estimator: Option<String>,
    pub gen_mode: Option<String>,
    pub max_epochs: Option<usize>,
    pub max_updates: Option<usize>,
    pub eval_every: Option<usize>,
    pub patience: Option<usize>,
}

pub fn load_file(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| GgdError::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| GgdError::Config(format!("bad config: {e}")))
        }
    }
}

pub fn resolve(file: &FileConfig, over: &Overrides) -> Result<Resolved> {
    let defaults = TrainConfig::default();
    let task_defaults = SyntheticTaskSpec::default();
    let model_defaults = ModelConfig::default();
    let resolved = Resolved {
        seed: over.seed.or(file.seed).unwrap_or(1),
        out_dir: over
            .out_dir
            .clone()
            .or_else(|| file.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs/default")),
        model: ResolvedModel {
            embed_dim: file.model.embed_dim.unwrap_or(model_defaults.embed_dim),
            hidden_dim: file.model.hidden_dim.unwrap_or(model_defaults.hidden_dim),
            attn_dim: file.model.attn_dim.unwrap_or(model_defaults.attn_dim),
        },
        task: ResolvedTask {
            vocab_size: file.task.vocab_size.unwrap_or(task_defaults.vocab_size),
            min_len: file.task.min_len.unwrap_or(task_defaults.min_len),
            max_len: file.task.max_len.unwrap_or(task_defaults.max_len),
            train: file.task.train.unwrap_or(task_defaults.train),
            valid: file.task.valid.unwrap_or(task_defaults.valid),
            test: file.task.test.unwrap_or(task_defaults.test),
            reverse: file.task.reverse.unwrap_or(task_defaults.reverse),
            cipher: file.task.cipher.unwrap_or(task_defaults.cipher),
            swap_prob: file.task.swap_prob.unwrap_or(task_defaults.swap_prob),
        },
        data: ResolvedData {
            dir: over
                .data_dir
                .clone()
                .or_else(|| file.data.dir.clone())
                .unwrap_or_else(|| PathBuf::from("data/synthetic")),
            load_cap: file.data.load_cap.unwrap_or(80),
        },
        train: ResolvedTrain {
            optimizer: over
                .optimizer
                .clone()
                .or_else(|| file.train.optimizer.clone())
                .unwrap_or_else(|| "adadelta".to_string()),
            lr: over.lr.or(file.train.lr).unwrap_or(1e-5),
            batch_size: over
                .batch_size
                .or(file.train.batch_size)
                .unwrap_or(defaults.batch_size),
            tau: over.tau.or(file.train.tau).unwrap_or(defaults.tau),
            n_g: over.n_g.or(file.train.n_g).unwrap_or(defaults.n_g),
            n_d: over.n_d.or(file.train.n_d).unwrap_or(defaults.n_d),
            entropy_reg: over
                .entropy_reg
                .or(file.train.entropy_reg)
                .unwrap_or(defaults.entropy_reg),
            estimator: over
                .estimator
                .clone()
                .or_else(|| file.train.estimator.clone())
                .unwrap_or_else(|| defaults.estimator.name().to_string()),
            gen_mode: over
                .gen_mode
                .clone()
                .or_else(|| file.train.gen_mode.clone())
                .unwrap_or_else(|| defaults.gen_mode.name().to_string()),
            max_epochs: over
                .max_epochs
                .or(file.train.max_epochs)
                .unwrap_or(defaults.max_epochs),
            max_updates: over
                .max_updates
                .or(file.train.max_updates)
                .unwrap_or(defaults.max_updates),
            eval_every: over
                .eval_every
                .or(file.train.eval_every)
                .unwrap_or(defaults.eval_every),
            patience: over.patience.or(file.train.patience).unwrap_or(defaults.patience),
        },
    };
    // Fail fast on anything the core would reject later.
    resolved.train_config()?;
    resolved.task_spec().validate()?;
    Ok(resolved)
}

impl Resolved {
    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: self.task.vocab_size,
            min_len: self.task.min_len,
            max_len: self.task.max_len,
            train: self.task.train,
            valid: self.task.valid,
            test: self.task.test,
            reverse: self.task.reverse,
            cipher: self.task.cipher,
            swap_prob: self.task.swap_prob,
        }
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            attn_dim: self.model.attn_dim,
            eos: ggd_core::data::EOS,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.train.optimizer.as_str() {
            "adadelta" => OptimizerKind::adadelta(),
            "rmsprop" => OptimizerKind::rmsprop(self.train.lr),
            other => {
                return Err(GgdError::Config(format!(
                    "unknown optimizer '{other}' (expected adadelta or rmsprop)"
                )))
            }
        };
        let cfg = TrainConfig {
            optimizer,
            tau: self.train.tau,
            batch_size: self.train.batch_size,
            n_g: self.train.n_g,
            n_d: self.train.n_d,
            entropy_reg: self.train.entropy_reg,
            estimator: Estimator::parse(&self.train.estimator)?,
            gen_mode: GenMode::parse(&self.train.gen_mode)?,
            max_epochs: self.train.max_epochs,
            max_updates: self.train.max_updates,
            eval_every: self.train.eval_every,
            patience: self.train.patience,
            seed: self.seed,
            ..TrainConfig::default()
        };
        Ok(cfg)
    }

    /// Serialize the resolved configuration next to the run outputs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| GgdError::Config(format!("cannot serialize config: {e}")))?;
        std::fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }
}
