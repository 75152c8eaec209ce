//! Declarative experiment configuration (JSON, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::EvalSpec;
use crate::corpus::{synthetic, TokenStream};
use crate::distill::{LossMode, LossWeights, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::surgery::{BlockPartition, FinalNormSource, KeepRule, OrderPreset, PatchOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Generated English-like text with task lines mixed in.
    Synthetic { seed: u64, n_bytes: usize, task_fraction: f64 },
    /// Files joined with EOS separators.
    Files { paths: Vec<PathBuf> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    /// Trailing share of the stream held out for evaluation and calibration.
    pub heldout_fraction: f64,
}

impl CorpusConfig {
    /// `(train, heldout)` streams.
    pub fn load(&self) -> Result<(TokenStream, TokenStream)> {
        if !(0.0..1.0).contains(&self.heldout_fraction) || self.heldout_fraction == 0.0 {
            return Err(Error::Config("heldout_fraction must lie in (0, 1)".into()));
        }
        let stream = match &self.source {
            CorpusSource::Synthetic {
                seed,
                n_bytes,
                task_fraction,
            } => TokenStream::from_bytes(&synthetic::generate(*seed, *n_bytes, *task_fraction)),
            CorpusSource::Files { paths } => TokenStream::from_files(paths)?,
        };
        Ok(stream.split_tail(self.heldout_fraction))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub keep_every: usize,
    pub keep_rule: KeepRule,
    /// Explicit block starts; overrides `keep_every` when present.
    #[serde(default)]
    pub starts: Option<Vec<usize>>,
}

impl PartitionSpec {
    pub fn build(&self, n_teacher_layers: usize) -> Result<BlockPartition> {
        match &self.starts {
            Some(s) => BlockPartition::new(s.clone(), n_teacher_layers),
            None => BlockPartition::every_kth(n_teacher_layers, self.keep_every, self.keep_rule),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Copy teacher layers at the block starts.
    Teacher,
    /// Fresh random weights (control arm).
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub bi_samples: usize,
    pub laco_samples: usize,
    pub cosine_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    /// `None` uses `tau = 2`, `lambda_kl = 0.1`, `lambda_cos = 2/(M+1)`.
    #[serde(default)]
    pub loss_weights: Option<LossWeights>,
    pub partition: PartitionSpec,
    pub student_init: StudentInit,
    pub patch_order: OrderPreset,
    #[serde(default)]
    pub final_norm: FinalNormSource,
    pub eval: EvalSpec,
    pub calibration: CalibrationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// 8-layer, width-128 teacher on ~20M tokens; 5-layer student on ~2M tokens.
    pub fn desk() -> Self {
        let model = ModelConfig::default();
        Self {
            corpus: CorpusConfig {
                source: CorpusSource::Synthetic {
                    seed: 1,
                    n_bytes: 24_000_000,
                    task_fraction: 0.05,
                },
                heldout_fraction: 0.02,
            },
            teacher_train: TrainConfig {
                learning_rate: 1e-3,
                warmup_ratio: 0.02,
                steps: 4_900,
                batch_size: 16,
                seq_len: 256,
                loss_mode: LossMode::Ce,
                ..TrainConfig::default()
            },
            student_train: TrainConfig::default(),
            loss_weights: None,
            partition: PartitionSpec {
                keep_every: 2,
                keep_rule: KeepRule::KeepLast,
                starts: None,
            },
            student_init: StudentInit::Teacher,
            patch_order: OrderPreset::Backward,
            final_norm: FinalNormSource::WithHead,
            eval: EvalSpec::default(),
            calibration: CalibrationConfig {
                bi_samples: 128,
                laco_samples: 16,
                cosine_samples: 128,
                seq_len: 256,
                seed: 11,
            },
            model,
        }
    }

    /// Reduced profile used by the automated acceptance run: width 64,
    /// sequence 128, ~4M teacher tokens and ~0.5M tokens per student.
    pub fn acceptance() -> Self {
        let mut c = Self::desk();
        c.model.d_model = 64;
        c.model.d_ffn = 256;
        c.model.max_seq_len = 128;
        c.corpus.source = CorpusSource::Synthetic {
            seed: 1,
            n_bytes: 16_000_000,
            task_fraction: 0.05,
        };
        c.corpus.heldout_fraction = 0.03;
        c.teacher_train.steps = 8_000;
        c.teacher_train.seq_len = 128;
        c.student_train.batch_size = 16;
        c.student_train.seq_len = 128;
        c.eval = EvalSpec {
            seq_len: 128,
            batch_size: 16,
            max_tokens: Some(65_536),
            task_instances: 100,
            task_seed: 7,
        };
        c.calibration = CalibrationConfig {
            bi_samples: 32,
            laco_samples: 16,
            cosine_samples: 32,
            seq_len: 128,
            seed: 11,
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher_train.validate()?;
        self.student_train.validate()?;
        if self.teacher_train.loss_mode != LossMode::Ce {
            return Err(Error::Config("teacher_train.loss_mode must be ce".into()));
        }
        for (name, t) in [("teacher_train", &self.teacher_train), ("student_train", &self.student_train)] {
            if t.seq_len > self.model.max_seq_len {
                return Err(Error::Config(format!("{name}.seq_len exceeds model.max_seq_len")));
            }
        }
        if let Some(w) = &self.loss_weights {
            w.validate()?;
        }
        self.partition.build(self.model.n_layers)?;
        Ok(())
    }

    pub fn partition(&self) -> Result<BlockPartition> {
        self.partition.build(self.model.n_layers)
    }

    pub fn weights(&self, m: usize) -> LossWeights {
        self.loss_weights.unwrap_or_else(|| LossWeights::for_student(m))
    }

    pub fn patch_options(&self) -> PatchOptions {
        PatchOptions {
            final_norm: self.final_norm,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
