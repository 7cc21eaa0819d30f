//! Run configuration: one JSON document describing data, model, training
//! and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SyntheticSpec, DATA_DIR_ENV};
use crate::embedder::EmbedderConfig;
use crate::episode::LabelPool;
use crate::error::{Error, Result};
use crate::label::{capacity, LabelScheme};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Omniglot,
    Synthetic,
    LabelTransfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated Gaussian clusters.
    Synthetic { spec: SyntheticSpec, seed: u64 },
    /// A directory written by `synth-gen`.
    Csv { dir: PathBuf },
    /// The Omniglot archive; `root` falls back to `$CONCEPT_DATA_DIR`.
    Omniglot {
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default = "default_true")]
        augment: bool,
    },
    /// Identical all-zero samples, so classes differ only by label.
    Blank {
        n_classes: usize,
        samples_per_class: usize,
        dimension: usize,
    },
}

fn default_true() -> bool {
    true
}

impl DataSource {
    /// The Omniglot root after applying the environment fallback.
    pub fn omniglot_root(root: &Option<PathBuf>) -> Option<PathBuf> {
        root.clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }
}

/// Label settings for the transfer protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub scheme: LabelScheme,
    pub label_len: usize,
    #[serde(default)]
    pub pool: Option<LabelPool>,
}

fn default_episodes() -> usize {
    1000
}
fn default_way() -> usize {
    5
}
fn default_one() -> usize {
    1
}
fn default_mann_length() -> usize {
    50
}
fn default_zs_length() -> usize {
    10
}
fn default_finetune() -> usize {
    16000
}
fn default_interval() -> usize {
    4000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default = "default_way")]
    pub n_way: usize,
    #[serde(default = "default_one")]
    pub k_shot: usize,
    #[serde(default = "default_mann_length")]
    pub mann_length: usize,
    #[serde(default = "default_zs_length")]
    pub zeroshot_length: usize,
    #[serde(default = "default_finetune")]
    pub finetune_episodes: usize,
    #[serde(default = "default_interval")]
    pub finetune_interval: usize,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub data: DataSource,
    /// Classes given to training; the rest are held out for evaluation.
    /// Omniglot uses its fixed split and ignores this.
    #[serde(default)]
    pub train_classes: Option<usize>,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let config = RunConfig::from_json(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every field, reporting all problems at once as
    /// `field: message` lines.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, field: &str, msg: String| {
            if !ok {
                problems.push(format!("{field}: {msg}"));
            }
        };

        match &self.data {
            DataSource::Synthetic { spec, .. } => {
                if let Err(e) = spec.validate() {
                    check(false, "data.spec", e.to_string());
                }
            }
            DataSource::Csv { dir } => check(dir.is_dir(), "data.dir", format!("{} is not a directory", dir.display())),
            DataSource::Omniglot { root, .. } => match DataSource::omniglot_root(root) {
                Some(r) => check(r.is_dir(), "data.root", format!("{} is not a directory", r.display())),
                None => check(false, "data.root", format!("not set and ${DATA_DIR_ENV} is unset")),
            },
            DataSource::Blank {
                n_classes,
                samples_per_class,
                dimension,
            } => check(
                *n_classes > 0 && *samples_per_class > 0 && *dimension > 0,
                "data",
                "blank source needs positive n_classes, samples_per_class and dimension".into(),
            ),
        }
        let omniglot_data = matches!(self.data, DataSource::Omniglot { .. });
        check(
            (self.task == Task::Omniglot) == omniglot_data,
            "task",
            format!("task {:?} does not match the data source", self.task),
        );
        if let Some(n) = self.train_classes {
            check(n > 0, "train_classes", "must be positive".into());
        }
        check(
            omniglot_data || self.train_classes.is_some(),
            "train_classes",
            "required for non-Omniglot data".into(),
        );

        if let Err(e) = self.model.embedder.validate() {
            check(false, "model.embedder", e.to_string());
        }
        check(self.model.att_hidden > 0, "model.att_hidden", "must be positive".into());
        if omniglot_data {
            if let EmbedderConfig::Cnn { side, .. } = self.model.embedder {
                check(side == 28, "model.embedder.side", format!("Omniglot glyphs are 28×28, got {side}"));
            }
        }

        if let Err(e) = self.train.validate() {
            check(false, "train", e.to_string());
        }
        check(self.train.label_len > 0, "train.label_len", "must be positive".into());
        let cap = capacity(self.train.scheme, self.train.label_len);
        if let Some(pool) = self.train.label_pool {
            check(
                pool.start < pool.end && pool.end <= cap,
                "train.label_pool",
                format!("{pool:?} does not fit capacity {cap}"),
            );
        }
        for (i, s) in self.train.curriculum.iter().enumerate() {
            let available = self.train.label_pool.map_or(cap, |p| p.end.saturating_sub(p.start));
            check(
                s.n_classes <= available,
                &format!("train.curriculum[{i}].n_classes"),
                format!("{} classes exceed the {available} available labels", s.n_classes),
            );
        }

        let e = &self.eval;
        check(e.episodes > 0, "eval.episodes", "must be positive".into());
        check(e.n_way > 0 && e.k_shot > 0, "eval.n_way", "n_way and k_shot must be positive".into());
        check(e.finetune_interval > 0, "eval.finetune_interval", "must be positive".into());
        check(e.mann_length > 0 && e.zeroshot_length > 0, "eval", "episode lengths must be positive".into());
        if let Some(t) = &e.transfer {
            let cap = capacity(t.scheme, t.label_len);
            let pool = t.pool.unwrap_or(LabelPool { start: 0, end: cap });
            check(
                pool.start < pool.end && pool.end <= cap && pool.end - pool.start >= e.n_way,
                "eval.transfer.pool",
                format!("{pool:?} must fit capacity {cap} and hold {} labels", e.n_way),
            );
        }
        check(
            self.task != Task::LabelTransfer || e.transfer.is_some(),
            "eval.transfer",
            "required for the label-transfer task".into(),
        );
        check(
            !self.output_dir.as_os_str().is_empty(),
            "output_dir",
            "must be set".into(),
        );

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }
}
