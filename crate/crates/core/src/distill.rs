//! The distillation objective (cross entropy + temperature-scaled KL +
//! per-layer cosine alignment) and the training loops built on it.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenStream, WindowSampler};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{self, BoundParams, ModelConfig, ParameterSet};
use crate::optim::{clip_global_norm, lr_at, AdamW};
use crate::surgery::BlockPartition;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TAU: f64 = 2.0;
pub const DEFAULT_LAMBDA_KL: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda_kl: f64,
    pub lambda_cos: f64,
}

impl LossWeights {
    /// `tau = 2`, `lambda_kl = 0.1`, `lambda_cos = 2/(M+1)`.
    pub fn for_student(m: usize) -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda_kl: DEFAULT_LAMBDA_KL,
            lambda_cos: 2.0 / (m as f64 + 1.0),
        }
    }

    pub fn ce_only() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda_kl: 0.0,
            lambda_cos: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [("lambda_kl", self.lambda_kl), ("lambda_cos", self.lambda_cos)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+kl")]
    CeKl,
    #[serde(rename = "ce+cos")]
    CeCos,
    #[serde(rename = "full")]
    Full,
}

impl LossMode {
    /// Zero the weights of the terms this mode leaves out.
    pub fn apply(self, w: LossWeights) -> LossWeights {
        let (kl, cos) = match self {
            LossMode::Ce => (false, false),
            LossMode::CeKl => (true, false),
            LossMode::CeCos => (false, true),
            LossMode::Full => (true, true),
        };
        LossWeights {
            tau: w.tau,
            lambda_kl: if kl { w.lambda_kl } else { 0.0 },
            lambda_cos: if cos { w.lambda_cos } else { 0.0 },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::CeKl => "ce+kl",
            LossMode::CeCos => "ce+cos",
            LossMode::Full => "full",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::Ce),
            "ce+kl" => Ok(Self::CeKl),
            "ce+cos" => Ok(Self::CeCos),
            "full" => Ok(Self::Full),
            other => Err(Error::Invalid(format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub steps: usize,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(default = "one")]
    pub grad_accum: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    /// Student distillation settings: AdamW (0.9, 0.95), lr 3e-4 with cosine
    /// decay and 1% warmup, weight decay 0.1, clip 1.0, 500 steps.
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            warmup_ratio: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            max_grad_norm: 1.0,
            steps: 500,
            batch_size: 16,
            seq_len: 256,
            grad_accum: 1,
            seed: 0,
            loss_mode: LossMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.grad_accum == 0 {
            return bad("batch_size, seq_len and grad_accum must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning_rate and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len * self.grad_accum
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens_per_step() * self.steps
    }

    /// Same settings with `steps` chosen to consume about `tokens` tokens.
    pub fn with_token_budget(&self, tokens: usize) -> Self {
        Self {
            steps: tokens.div_ceil(self.tokens_per_step()).max(1),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
    pub cos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub loss_cos: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// Times the corpus ran out and was reshuffled.
    pub corpus_epochs: u64,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        Ok(Self {
            records,
            corpus_epochs: 0,
        })
    }

    /// Mean total loss over the first / last `window` steps.
    pub fn head_tail_means(&self, window: usize) -> (f64, f64) {
        let n = self.records.len();
        let w = window.clamp(1, n.max(1));
        let mean = |rs: &[StepRecord]| rs.iter().map(|r| r.loss_total).sum::<f64>() / rs.len() as f64;
        (mean(&self.records[..w]), mean(&self.records[n - w..]))
    }
}

/// Teacher outputs a student step is distilled against.
pub struct TeacherSignal<T: Real> {
    pub logits: Tensor<T>,
    /// Output of every teacher layer.
    pub hidden: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> TeacherSignal<T> {
    pub fn compute(teacher: &ParameterSet<T>, inputs: &[u32], batch: usize, seq: usize) -> Result<Self> {
        let out = model::forward_batch(teacher, inputs, batch, seq)?;
        Ok(Self {
            logits: out.logits,
            hidden: out.hidden.into_iter().map(Arc::new).collect(),
        })
    }
}

/// Loss nodes recorded for one step.
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub kl: Option<Var>,
    pub cos: Option<Var>,
}

impl LossVars {
    pub fn components<T: Real>(&self, g: &Graph<T>) -> LossComponents {
        let get = |v: Option<Var>| v.map(|v| g.value(v).item().to_f64()).unwrap_or(0.0);
        LossComponents {
            total: g.value(self.total).item().to_f64(),
            ce: g.value(self.ce).item().to_f64(),
            kl: get(self.kl),
            cos: get(self.cos),
        }
    }
}

/// Record `CE + λ_KL·KL + λ_cos·Σ_i cos_i` on `g`. Terms with a zero weight are skipped.
#[allow(clippy::too_many_arguments)]
pub fn record_total_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    student: &BoundParams,
    inputs: &[u32],
    targets: &[u32],
    batch: usize,
    seq: usize,
    teacher: Option<(&TeacherSignal<T>, &BlockPartition)>,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let out = model::forward_graph(g, cfg, student, inputs, batch, seq)?;
    let ce = g.cross_entropy(out.logits, targets)?;
    let mut total = ce;
    let needs_teacher = weights.lambda_kl > 0.0 || weights.lambda_cos > 0.0;
    let (mut kl, mut cos) = (None, None);
    if needs_teacher {
        let (signal, partition) = teacher.ok_or_else(|| Error::Invalid("distillation terms need a teacher".into()))?;
        if weights.lambda_kl > 0.0 {
            let k = g.kl_div(out.logits, &signal.logits, T::from_f64(weights.tau))?;
            let scaled = g.scale(k, T::from_f64(weights.lambda_kl))?;
            total = g.add(total, scaled)?;
            kl = Some(k);
        }
        if weights.lambda_cos > 0.0 {
            let c = record_cosine_align(g, &out.hidden, &signal.hidden, partition)?;
            let scaled = g.scale(c, T::from_f64(weights.lambda_cos))?;
            total = g.add(total, scaled)?;
            cos = Some(c);
        }
    }
    Ok(LossVars { total, ce, kl, cos })
}

fn record_cosine_align<T: Real>(
    g: &mut Graph<T>,
    student_hidden: &[Var],
    teacher_hidden: &[Arc<Tensor<T>>],
    partition: &BlockPartition,
) -> Result<Var> {
    if student_hidden.len() != partition.n_blocks() || teacher_hidden.len() != partition.n_teacher_layers() {
        return Err(Error::Partition(format!(
            "{} student / {} teacher hidden states for partition {:?}",
            student_hidden.len(),
            teacher_hidden.len(),
            partition.starts()
        )));
    }
    let mut sum: Option<Var> = None;
    for (i, &h) in student_hidden.iter().enumerate() {
        let target = teacher_hidden[partition.alignment_target(i + 1) - 1].clone();
        let term = g.cosine_distance(h, target)?;
        sum = Some(match sum {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    Ok(sum.expect("at least one block"))
}

/// Mean over positions of `τ² · KL(softmax(z_T/τ) ‖ softmax(z_S/τ))`.
pub fn kl_loss<T: Real>(z_teacher: &Tensor<T>, z_student: &Tensor<T>, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(z_student.clone());
    let v = g.kl_div(s, z_teacher, T::from_f64(tau))?;
    Ok(g.value(v).item().to_f64())
}

/// `Σ_i mean_tokens (1 − cos(student_i, teacher_{target(i)}))`.
pub fn cosine_align_loss<T: Real>(
    student_hidden: &[Tensor<T>],
    teacher_hidden: &[Tensor<T>],
    partition: &BlockPartition,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = student_hidden.iter().map(|h| g.constant(h.clone())).collect();
    let teacher: Vec<Arc<Tensor<T>>> = teacher_hidden.iter().cloned().map(Arc::new).collect();
    let v = record_cosine_align(&mut g, &vars, &teacher, partition)?;
    Ok(g.value(v).item().to_f64())
}

/// Mean next-token cross entropy of `logits` against `targets`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[u32]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = g.cross_entropy(l, targets)?;
    Ok(g.value(v).item().to_f64())
}

/// Evaluate the objective on one batch without tracking gradients.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    inputs: &[u32],
    targets: &[u32],
    batch: usize,
    seq: usize,
    student: &ParameterSet<T>,
    teacher: &ParameterSet<T>,
    weights: &LossWeights,
    partition: &BlockPartition,
) -> Result<LossComponents> {
    let signal = TeacherSignal::compute(teacher, inputs, batch, seq)?;
    let mut g = Graph::new();
    let bound = model::bind(&mut g, student, false);
    let vars = record_total_loss(
        &mut g,
        &student.config,
        &bound,
        inputs,
        targets,
        batch,
        seq,
        Some((&signal, partition)),
        weights,
    )?;
    Ok(vars.components(&g))
}

/// Shared optimizer loop. `teacher = None` trains on cross entropy alone.
fn train_loop(
    mut params: ParameterSet<f32>,
    teacher: Option<(&ParameterSet<f32>, &BlockPartition)>,
    corpus: &TokenStream,
    cfg: &TrainConfig,
    weights: LossWeights,
) -> Result<(ParameterSet<f32>, TrainLog)> {
    cfg.validate()?;
    weights.validate()?;
    if cfg.seq_len > params.config.max_seq_len {
        return Err(Error::Config(format!(
            "seq_len {} exceeds model max_seq_len {}",
            cfg.seq_len, params.config.max_seq_len
        )));
    }
    let needed = cfg.total_tokens();
    if corpus.len() < needed + 1 {
        log::warn!(
            "corpus has {} tokens but the run consumes {needed}; windows will repeat",
            corpus.len()
        );
    }
    let mut sampler = WindowSampler::new(corpus, cfg.seq_len, cfg.seed)?;
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut log = TrainLog::default();
    let tied = params.config.tie_embeddings;
    let (b, t) = (cfg.batch_size, cfg.seq_len);
    let uses_teacher = weights.lambda_kl > 0.0 || weights.lambda_cos > 0.0;

    for step in 0..cfg.steps {
        let mut grads: Option<Vec<Tensor<f32>>> = None;
        let mut comp = LossComponents::default();
        for _ in 0..cfg.grad_accum {
            let (inputs, targets) = sampler.next_batch(b);
            let signal = match teacher {
                Some((tp, _)) if uses_teacher => Some(TeacherSignal::compute(tp, &inputs, b, t)?),
                _ => None,
            };
            let mut g = Graph::new();
            let bound = model::bind(&mut g, &params, true);
            let vars = record_total_loss(
                &mut g,
                &params.config,
                &bound,
                &inputs,
                &targets,
                b,
                t,
                signal.as_ref().zip(teacher.map(|(_, p)| p)),
                &weights,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                other => other,
            })?;
            let c = vars.components(&g);
            if !c.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            g.backward(vars.total)?;
            let step_grads: Vec<Tensor<f32>> = bound
                .trainable(tied)
                .into_iter()
                .map(|v| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
                .collect();
            grads = Some(match grads {
                None => step_grads,
                Some(mut acc) => {
                    for (a, s) in acc.iter_mut().zip(&step_grads) {
                        a.add_assign(s)?;
                    }
                    acc
                }
            });
            comp.total += c.total;
            comp.ce += c.ce;
            comp.kl += c.kl;
            comp.cos += c.cos;
        }
        let mut grads = grads.expect("grad_accum >= 1");
        let n = cfg.grad_accum as f64;
        if cfg.grad_accum > 1 {
            let s = 1.0 / n as f32;
            for gt in &mut grads {
                for x in gt.data_mut() {
                    *x *= s;
                }
            }
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.max_grad_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step });
        }
        let lr = lr_at(step, cfg.steps, cfg.learning_rate, cfg.warmup_ratio);
        opt.step(&mut params.tensors_mut(), &grads, lr);
        let rec = StepRecord {
            step,
            lr,
            grad_norm,
            loss_total: comp.total / n,
            loss_ce: comp.ce / n,
            loss_kl: comp.kl / n,
            loss_cos: comp.cos / n,
        };
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step:>5} lr {lr:.2e} loss {:.4} (ce {:.4} kl {:.4} cos {:.4}) |g| {grad_norm:.3}",
                rec.loss_total,
                rec.loss_ce,
                rec.loss_kl,
                rec.loss_cos
            );
        }
        log.records.push(rec);
    }
    log.corpus_epochs = sampler.epoch();
    if !params.all_finite() {
        return Err(Error::Diverged { step: cfg.steps });
    }
    Ok((params, log))
}

/// Distill `student` against the frozen `teacher` under `cfg.loss_mode`.
pub fn train_student(
    student: ParameterSet<f32>,
    teacher: &ParameterSet<f32>,
    corpus: &TokenStream,
    cfg: &TrainConfig,
    weights: &LossWeights,
    partition: &BlockPartition,
) -> Result<(ParameterSet<f32>, TrainLog)> {
    if teacher.n_layers() != partition.n_teacher_layers() || student.n_layers() != partition.n_blocks() {
        return Err(Error::Partition(format!(
            "teacher {} / student {} layers do not match partition {:?} over {}",
            teacher.n_layers(),
            student.n_layers(),
            partition.starts(),
            partition.n_teacher_layers()
        )));
    }
    if !student.config.block_compatible(&teacher.config) {
        return Err(Error::Config("student and teacher widths differ".into()));
    }
    let w = cfg.loss_mode.apply(*weights);
    train_loop(student, Some((teacher, partition)), corpus, cfg, w)
}

/// Next-token pretraining from a seeded random initialization.
pub fn pretrain_teacher(
    config: &ModelConfig,
    corpus: &TokenStream,
    cfg: &TrainConfig,
) -> Result<(ParameterSet<f32>, TrainLog)> {
    if cfg.loss_mode != LossMode::Ce {
        return Err(Error::Config("teacher pretraining uses the ce loss mode".into()));
    }
    let params = model::init_random(config, cfg.seed)?;
    train_loop(params, None, corpus, cfg, LossWeights::ce_only())
}
