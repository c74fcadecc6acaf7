//! Experiment configuration (TOML). See `configs/desk.toml` for the
//! checked-in suite and `docs/config.md` for every key.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Generator;
use crate::nn::{ModelBuilder, ModelGraph, NnError, TrainConfig};
use crate::optimizer::OptimizeConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("task {task}: layer {index} {spec:?}: {reason}")]
    Layer {
        task: String,
        index: usize,
        spec: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub patience: Option<usize>,
}

fn default_lr() -> f64 {
    0.001
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    /// Synthetic source; exactly one of `generator` and `idx` is set.
    #[serde(default)]
    pub generator: Option<Generator>,
    /// Samples to generate (ignored for IDX data).
    #[serde(default)]
    pub samples: usize,
    /// One entry per layer, e.g. `"conv3x3 16"`, `"conv3x3 32 stride=2"`,
    /// `"conv1x1 32"`, `"fc 64"`, `"bn"`, `"relu"`, `"maxpool 2"`,
    /// `"avgpool 2"`, `"flatten"`, `"softmax"`.
    pub layers: Vec<String>,
    /// Excluded from codebook learning and compressed with the frozen pair.
    #[serde(default)]
    pub held_out: bool,
    /// IDX image/label pair.
    #[serde(default)]
    pub idx: Option<IdxSource>,
    /// Overrides the experiment-wide `max_outer_iters` for this task.
    #[serde(default)]
    pub max_outer_iters: Option<usize>,
}

impl TaskConfig {
    pub fn input_shape(&self) -> Vec<usize> {
        match (&self.idx, self.generator) {
            (Some(i), _) => vec![1, i.rows, i.cols],
            (None, Some(g)) => g.sample_shape(),
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: String,
    pub labels: String,
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub trials: usize,
    /// Codewords per sub-codebook.
    pub k: usize,
    pub epsilon: f64,
    /// Outer iterations of the reassignment loop (omit for one per middle layer).
    #[serde(default)]
    pub max_outer_iters: Option<usize>,
    pub arena_bytes: usize,
    pub flash_bytes: usize,
    pub test_fraction: f64,
    pub holdout_fraction: f64,
    /// Training samples used to calibrate activation ranges.
    pub calibration_samples: usize,
    /// Fresh samples per task for the int8-vs-float agreement check.
    pub agreement_samples: usize,
    /// Random swap/infer sequences per trial, each on a fresh arena.
    pub swap_sequences: usize,
    /// Swap/infer steps per sequence.
    pub swap_steps: usize,
    pub train: TrainSection,
    pub finetune: TrainSection,
    pub tasks: Vec<TaskConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        if !self.k.is_power_of_two() || self.k < 2 || self.k > 65536 {
            return bad(format!(
                "k = {} must be a power of two in [2, 65536]",
                self.k
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon = {} outside (0, 1]", self.epsilon));
        }
        let fr = self.test_fraction + self.holdout_fraction;
        if !(self.test_fraction > 0.0 && self.holdout_fraction >= 0.0 && fr < 1.0) {
            return bad("test/holdout fractions must leave training data".into());
        }
        for t in [&self.train, &self.finetune] {
            if t.epochs == 0 || t.batch_size == 0 || t.learning_rate <= 0.0 {
                return bad("epochs, batch size and learning rate must be positive".into());
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !names.insert(&t.name) {
                return bad(format!("duplicate task {}", t.name));
            }
            if t.name.is_empty() || t.name.len() > 255 {
                return bad(format!("task name {:?} must be 1..=255 bytes", t.name));
            }
            match (&t.idx, t.generator) {
                (Some(_), Some(_)) | (None, None) => {
                    return bad(format!(
                        "task {} needs exactly one of generator and idx",
                        t.name
                    ))
                }
                (None, Some(_)) if t.samples < 10 => {
                    return bad(format!("task {} needs at least 10 samples", t.name))
                }
                _ => {}
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            self.build_model(t, &mut rng)?;
        }
        if !self.tasks.is_empty() && self.suite().next().is_none() {
            return bad("every task is held out; nothing to learn codebooks from".into());
        }
        Ok(())
    }

    /// Tasks whose models train the codebooks.
    pub fn suite(&self) -> impl Iterator<Item = &TaskConfig> {
        self.tasks.iter().filter(|t| !t.held_out)
    }

    pub fn held_out(&self) -> impl Iterator<Item = &TaskConfig> {
        self.tasks.iter().filter(|t| t.held_out)
    }

    pub fn task(&self, name: &str) -> Option<&TaskConfig> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn optimize_config(&self, seed: u64) -> OptimizeConfig {
        OptimizeConfig {
            epsilon: self.epsilon,
            max_outer_iters: self.max_outer_iters,
            finetune: self.finetune.to_train_config(0),
            seed,
            ..OptimizeConfig::default()
        }
    }

    pub fn build_model(
        &self,
        task: &TaskConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelGraph, ConfigError> {
        build_model(&task.name, task.input_shape(), &task.layers, rng)
    }
}

/// Builds a model from layer strings.
pub fn build_model(
    name: &str,
    input_shape: Vec<usize>,
    layers: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<ModelGraph, ConfigError> {
    let mut b = ModelBuilder::new(name, input_shape);
    for (i, spec) in layers.iter().enumerate() {
        let err = |reason: String| ConfigError::Layer {
            task: name.to_string(),
            index: i + 1,
            spec: spec.clone(),
            reason,
        };
        let mut words = spec.split_whitespace();
        let op = words.next().ok_or_else(|| err("empty layer".into()))?;
        let mut count = None;
        let (mut stride, mut padding) = (1, None);
        for w in words {
            let num = |v: &str| v.parse::<usize>().map_err(|e| err(format!("{v:?}: {e}")));
            if let Some(v) = w.strip_prefix("stride=") {
                stride = num(v)?;
            } else if let Some(v) = w.strip_prefix("padding=") {
                padding = Some(num(v)?);
            } else if count.is_none() {
                count = Some(num(w)?);
            } else {
                return Err(err(format!("unexpected {w:?}")));
            }
        }
        let need = |c: Option<usize>| {
            c.filter(|&c| c > 0)
                .ok_or_else(|| err("needs a positive count".into()))
        };
        if stride == 0 {
            return Err(err("stride must be positive".into()));
        }
        b = match op {
            "conv3x3" => b.conv3x3(need(count)?, stride, padding.unwrap_or(1)),
            "conv1x1" => b.conv1x1_strided(need(count)?, stride),
            "fc" => b.fc(need(count)?),
            "bn" => b.batch_norm(),
            "relu" => b.relu(),
            "maxpool" => b.max_pool(need(count)?),
            "avgpool" => b.avg_pool(need(count)?),
            "flatten" => b.flatten(),
            "softmax" => b.softmax(),
            other => return Err(err(format!("unknown layer {other:?}"))),
        };
    }
    b.build(rng).map_err(|e: NnError| ConfigError::Layer {
        task: name.to_string(),
        index: 0,
        spec: String::new(),
        reason: e.to_string(),
    })
}
