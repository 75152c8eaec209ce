//! Activation tracing, layer-similarity matrices, perplexity and
//! interpolation sweeps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TaskInstance, TokenStream};
use crate::error::{Error, Result};
use crate::kernels::log_sum_exp;
use crate::model::{self, ParameterSet};
use crate::surgery::{self, BlockPartition, PatchOptions, PatchOrder, PatchSet};
use crate::tensor::{Real, Tensor};
use crate::tokenizer;

/// Held-out token sequences used for activation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    samples: Vec<Vec<u32>>,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Vec<u32>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("calibration set"));
        }
        if samples.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("calibration sample"));
        }
        Ok(Self { samples })
    }

    /// `count` seeded windows of `seq_len` tokens drawn from `stream`.
    pub fn from_stream(stream: &TokenStream, count: usize, seq_len: usize, seed: u64) -> Result<Self> {
        Self::new(stream.sample_windows(count, seq_len, seed)?)
    }

    pub fn samples(&self) -> &[Vec<u32>] {
        &self.samples
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn seq_len(&self) -> usize {
        self.samples.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Per-sample hidden states. `states[s][0]` is the embedding output,
/// `states[s][i]` the output of layer `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    states: Vec<Vec<Tensor<f32>>>,
}

impl ActivationTrace {
    pub fn from_states(states: Vec<Vec<Tensor<f32>>>) -> Result<Self> {
        let first = states.first().ok_or(Error::Empty("activation trace"))?;
        let n = first.len();
        if n < 2 {
            return Err(Error::Invalid("trace needs the embedding and at least one layer".into()));
        }
        for s in &states {
            if s.len() != n {
                return Err(Error::Invalid("ragged layer count in trace".into()));
            }
            let (rows, cols) = (s[0].rows(), s[0].cols());
            if s.iter().any(|t| t.rows() != rows || t.cols() != cols || t.shape().len() != 2) {
                return Err(Error::Invalid("inconsistent token counts across layers".into()));
            }
        }
        Ok(Self { states })
    }

    /// Number of traced transformer layers (the embedding is not counted).
    pub fn n_layers(&self) -> usize {
        self.states[0].len() - 1
    }

    pub fn n_samples(&self) -> usize {
        self.states.len()
    }

    /// Hidden state at `layer` for sample `s`; 0 is the embedding output.
    pub fn state(&self, s: usize, layer: usize) -> &Tensor<f32> {
        &self.states[s][layer]
    }

    pub fn negated(&self) -> Self {
        Self {
            states: self
                .states
                .iter()
                .map(|s| s.iter().map(|t| t.map(|x| -x)).collect())
                .collect(),
        }
    }
}

const TRACE_BATCH: usize = 16;

/// Forward every calibration sample and keep all layer outputs.
pub fn trace(model: &ParameterSet<f32>, calib: &CalibrationSet) -> Result<ActivationTrace> {
    let mut states = Vec::with_capacity(calib.count());
    let samples = calib.samples();
    let mut i = 0;
    while i < samples.len() {
        let len = samples[i].len();
        let mut j = i + 1;
        while j < samples.len() && j - i < TRACE_BATCH && samples[j].len() == len {
            j += 1;
        }
        let tokens: Vec<u32> = samples[i..j].concat();
        let out = model::forward_batch(model, &tokens, j - i, len)?;
        for b in 0..j - i {
            let mut per = Vec::with_capacity(out.hidden.len() + 1);
            per.push(out.input.slice_rows(b * len, len)?);
            for h in &out.hidden {
                per.push(h.slice_rows(b * len, len)?);
            }
            states.push(per);
        }
        i = j;
    }
    ActivationTrace::from_states(states)
}

/// Cosine of two rows, accumulated in f64.
pub fn row_cosine(a: &[f32], b: &[f32], op: &'static str, row: usize) -> Result<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroNorm { op, row });
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

/// Mean over rows of the row-wise cosine between `a` and `b`.
pub fn mean_row_cosine(a: &Tensor<f32>, b: &Tensor<f32>, op: &'static str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(crate::error::shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut sum = 0.0;
    for r in 0..a.rows() {
        sum += row_cosine(a.row(r), b.row(r), op, r)?;
    }
    Ok(sum / a.rows() as f64)
}

/// Mean token cosine between layer outputs of two models on the same inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub model_a: String,
    pub model_b: String,
    /// `sim[a-1][b-1]` compares output of layer `a` of A with layer `b` of B.
    pub sim: Vec<Vec<f64>>,
}

impl LayerSimilarity {
    /// 1-based lookup.
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.sim[a - 1][b - 1]
    }

    pub fn n_a(&self) -> usize {
        self.sim.len()
    }

    pub fn n_b(&self) -> usize {
        self.sim.first().map_or(0, Vec::len)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for b in 1..=self.n_b() {
            out.push_str(&format!(",{}_{b}", self.model_b));
        }
        out.push('\n');
        for (a, row) in self.sim.iter().enumerate() {
            out.push_str(&format!("{}_{}", self.model_a, a + 1));
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Token mean within each sample, then mean across samples.
pub fn cosine_matrix(a: &ActivationTrace, b: &ActivationTrace) -> Result<LayerSimilarity> {
    if a.n_samples() != b.n_samples() {
        return Err(Error::Invalid(format!(
            "traces cover {} vs {} samples",
            a.n_samples(),
            b.n_samples()
        )));
    }
    let (na, nb) = (a.n_layers(), b.n_layers());
    let cells: Vec<(usize, usize)> = (1..=na).flat_map(|i| (1..=nb).map(move |j| (i, j))).collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| {
            let mut total = 0.0;
            for s in 0..a.n_samples() {
                total += mean_row_cosine(a.state(s, i), b.state(s, j), "cosine_matrix")?;
            }
            Ok(total / a.n_samples() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(LayerSimilarity {
        model_a: "a".into(),
        model_b: "b".into(),
        sim: values.chunks(nb).map(<[f64]>::to_vec).collect(),
    })
}

/// Similarity of each student layer with its alignment target in the teacher.
pub fn block_similarities(sim: &LayerSimilarity, partition: &BlockPartition) -> Result<Vec<f64>> {
    if sim.n_a() != partition.n_blocks() || sim.n_b() != partition.n_teacher_layers() {
        return Err(Error::Invalid(format!(
            "similarity matrix is {}x{}, partition needs {}x{}",
            sim.n_a(),
            sim.n_b(),
            partition.n_blocks(),
            partition.n_teacher_layers()
        )));
    }
    Ok((1..=partition.n_blocks())
        .map(|i| sim.get(i, partition.alignment_target(i)))
        .collect())
}

/// Least similar student layers first.
pub fn suggest_patch_order(sim: &LayerSimilarity, partition: &BlockPartition) -> Result<PatchOrder> {
    PatchOrder::by_similarity(&block_similarities(sim, partition)?)
}

/// Summed next-token NLL in f64 for one logits block.
pub fn nll_sum<T: Real>(logits: &Tensor<T>, targets: &[u32]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(crate::error::shape_err("nll", format!("{} rows, {} targets", logits.rows(), targets.len())));
    }
    let v = logits.cols();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let row = logits.row(r);
        total += log_sum_exp(row) - row[t as usize].to_f64();
    }
    Ok(total)
}

/// Summed NLL and token count over non-overlapping windows of `seq_len` predictions.
pub fn nll_total(model: &ParameterSet<f32>, text: &TokenStream, seq_len: usize, batch: usize) -> Result<(f64, usize)> {
    let toks = text.tokens();
    if toks.len() < 2 {
        return Err(Error::Empty("evaluation stream"));
    }
    if seq_len == 0 || batch == 0 {
        return Err(Error::Config("seq_len and batch must be positive".into()));
    }
    let seq_len = seq_len.min(model.config.max_seq_len);
    let n_pred = toks.len() - 1;
    let n_full = n_pred / seq_len;
    let mut total = 0.0f64;
    let mut start = 0;
    while start < n_full {
        let b = batch.min(n_full - start);
        let mut inputs = Vec::with_capacity(b * seq_len);
        let mut targets = Vec::with_capacity(b * seq_len);
        for w in start..start + b {
            let o = w * seq_len;
            inputs.extend_from_slice(&toks[o..o + seq_len]);
            targets.extend_from_slice(&toks[o + 1..o + seq_len + 1]);
        }
        let logits = model::logits_batch(model, &inputs, b, seq_len)?;
        total += nll_sum(&logits, &targets)?;
        start += b;
    }
    let rest = n_pred - n_full * seq_len;
    if rest > 0 {
        let o = n_full * seq_len;
        let logits = model::logits_batch(model, &toks[o..o + rest], 1, rest)?;
        total += nll_sum(&logits, &toks[o + 1..])?;
    }
    Ok((total, n_pred))
}

/// `exp(mean NLL)` over every next-token prediction in `text`.
pub fn perplexity(model: &ParameterSet<f32>, text: &TokenStream, seq_len: usize, batch: usize) -> Result<f64> {
    let (nll, n) = nll_total(model, text, seq_len, batch)?;
    Ok((nll / n as f64).exp())
}

/// Greedy continuation of `prompt` for at most `max_new` tokens, stopping after a newline or EOS.
pub fn greedy_complete(model: &ParameterSet<f32>, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let start = seq.len().saturating_sub(model.config.max_seq_len);
        let ctx = &seq[start..];
        let logits = model::logits_batch(model, ctx, 1, ctx.len())?;
        let last = logits.row(ctx.len() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        let tok = best as u32;
        out.push(tok);
        seq.push(tok);
        if tok == b'\n' as u32 || tok == tokenizer::EOS {
            break;
        }
    }
    Ok(out)
}

/// Exact-match rate: the completion must be the answer followed by a newline or EOS.
pub fn task_accuracy(model: &ParameterSet<f32>, tasks: &[TaskInstance]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Empty("task set"));
    }
    let mut correct = 0usize;
    for t in tasks {
        let prompt = tokenizer::encode(&t.prompt);
        let got = greedy_complete(model, &prompt, t.answer.len() + 1)?;
        let want: Vec<u32> = tokenizer::encode(&t.answer);
        if got.len() == want.len() + 1
            && got[..want.len()] == want[..]
            && (got[want.len()] == b'\n' as u32 || got[want.len()] == tokenizer::EOS)
        {
            correct += 1;
        }
    }
    Ok(correct as f64 / tasks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub seq_len: usize,
    pub batch_size: usize,
    /// Cap on held-out tokens scored; `None` scores the whole stream.
    #[serde(default)]
    pub max_tokens: Option<usize>,
    /// Held-out synthetic task instances; 0 disables the accuracy column.
    #[serde(default)]
    pub task_instances: usize,
    #[serde(default)]
    pub task_seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            seq_len: 256,
            batch_size: 8,
            max_tokens: Some(262_144),
            task_instances: 200,
            task_seed: 7,
        }
    }
}

/// Held-out inputs an [`EvalSpec`] is applied to.
pub struct EvalData {
    pub text: TokenStream,
    pub tasks: Vec<TaskInstance>,
}

impl EvalData {
    pub fn new(heldout: &TokenStream, spec: &EvalSpec) -> Self {
        let text = match spec.max_tokens {
            Some(n) => heldout.truncated(n),
            None => heldout.clone(),
        };
        let tasks = crate::corpus::synthetic::task_set(spec.task_seed, spec.task_instances);
        Self { text, tasks }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub perplexity: f64,
    pub task_accuracy: Option<f64>,
}

pub fn evaluate(model: &ParameterSet<f32>, spec: &EvalSpec, data: &EvalData) -> Result<Metrics> {
    let perplexity = perplexity(model, &data.text, spec.seq_len, spec.batch_size)?;
    let task_accuracy = if data.tasks.is_empty() {
        None
    } else {
        Some(task_accuracy(model, &data.tasks)?)
    };
    Ok(Metrics {
        perplexity,
        task_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub patch_prefix_len: usize,
    pub patch_set: PatchSet,
    pub n_layers: usize,
    pub inference_params: usize,
    pub perplexity: f64,
    pub task_accuracy: Option<f64>,
}

/// Evaluate the `M+1` prefix-patched models of `order`, smallest first.
pub fn interpolation_sweep(
    student: &ParameterSet<f32>,
    teacher: &ParameterSet<f32>,
    partition: &BlockPartition,
    order: &PatchOrder,
    spec: &EvalSpec,
    data: &EvalData,
) -> Result<Vec<SweepRecord>> {
    interpolation_sweep_with(student, teacher, partition, order, spec, data, PatchOptions::default())
}

pub fn interpolation_sweep_with(
    student: &ParameterSet<f32>,
    teacher: &ParameterSet<f32>,
    partition: &BlockPartition,
    order: &PatchOrder,
    spec: &EvalSpec,
    data: &EvalData,
    opts: PatchOptions,
) -> Result<Vec<SweepRecord>> {
    let models = surgery::patch_sequence_with(student, teacher, partition, order, opts)?;
    models
        .par_iter()
        .enumerate()
        .map(|(k, (set, m))| {
            let metrics = evaluate(m, spec, data)?;
            log::info!(
                "patched {k}/{} ({} layers): ppl {:.4}",
                order.len(),
                m.n_layers(),
                metrics.perplexity
            );
            Ok(SweepRecord {
                patch_prefix_len: k,
                patch_set: set.clone(),
                n_layers: m.n_layers(),
                inference_params: m.count_inference_params(),
                perplexity: metrics.perplexity,
                task_accuracy: metrics.task_accuracy,
            })
        })
        .collect()
}

pub fn write_sweep_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "patch_prefix_len",
        "patch_set",
        "n_layers",
        "inference_params",
        "perplexity",
        "task_accuracy",
    ])
    .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.patch_prefix_len.to_string(),
            serde_json::to_string(&r.patch_set)?,
            r.n_layers.to_string(),
            r.inference_params.to_string(),
            format!("{:.6}", r.perplexity),
            r.task_accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("spearman needs two equal-length series of length >= 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}
