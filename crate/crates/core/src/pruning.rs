//! Training-free depth reduction: naive layer drop, block-influence
//! pruning and layer collapse.

use serde::{Deserialize, Serialize};

pub use crate::analysis::CalibrationSet;
use crate::analysis::{self, mean_row_cosine, row_cosine, ActivationTrace};
use crate::error::{Error, Result};
use crate::model::{self, LayerBlock, ParameterSet};
use crate::surgery::{self, BlockPartition, PatchOrder, PatchSet};
use crate::tensor::Tensor;

pub const LACO_CHUNK_SIZES: [usize; 4] = [3, 4, 5, 6];
pub const LACO_THRESHOLDS: [f64; 6] = [0.95, 0.85, 0.75, 0.65, 0.55, 0.45];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LacoConfig {
    /// Layers folded into the chunk head per merge (`C`).
    pub chunk_size: usize,
    /// 1-based inclusive layer range `[L, H]`; `H = None` means the last layer.
    pub layer_range_lo: usize,
    #[serde(default)]
    pub layer_range_hi: Option<usize>,
    /// Scan step after an accepted merge (`I`).
    pub min_interval: usize,
    pub threshold: f64,
}

impl Default for LacoConfig {
    fn default() -> Self {
        Self {
            chunk_size: 3,
            layer_range_lo: 1,
            layer_range_hi: None,
            min_interval: 2,
            threshold: 0.95,
        }
    }
}

/// `BI_i = 1 − mean over samples and tokens of cos(x_{i−1}, x_i)`, one score per layer.
pub fn block_influence(trace: &ActivationTrace) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(trace.n_layers());
    for i in 1..=trace.n_layers() {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for s in 0..trace.n_samples() {
            let (x, y) = (trace.state(s, i - 1), trace.state(s, i));
            for r in 0..x.rows() {
                sum += row_cosine(x.row(r), y.row(r), "block_influence", r)?;
            }
            n += x.rows();
        }
        out.push(1.0 - sum / n as f64);
    }
    Ok(out)
}

fn argmin_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Copy of `model` without the (0-based) layer `idx`.
pub fn remove_layer(model: &ParameterSet<f32>, idx: usize) -> ParameterSet<f32> {
    let mut out = model.clone();
    out.layers.remove(idx);
    out.config.n_layers -= 1;
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortGptReport {
    pub sequential: bool,
    /// Original 1-based indices, in removal order.
    pub removed: Vec<usize>,
    /// BI scores seen at each removal, indexed by the then-current layers.
    pub bi_history: Vec<Vec<f64>>,
}

/// Remove `n_remove` layers with the lowest block influence. Sequential mode
/// recomputes BI on the shrunken model after each removal.
pub fn shortgpt_prune(
    model: &ParameterSet<f32>,
    calib: &CalibrationSet,
    n_remove: usize,
    sequential: bool,
) -> Result<(ParameterSet<f32>, ShortGptReport)> {
    let n = model.n_layers();
    if n_remove == 0 || n_remove >= n {
        return Err(Error::Invalid(format!("n_remove must lie in 1..{n}, got {n_remove}")));
    }
    let mut current = model.clone();
    let mut origin: Vec<usize> = (1..=n).collect();
    let mut report = ShortGptReport {
        sequential,
        removed: Vec::new(),
        bi_history: Vec::new(),
    };
    if sequential {
        for _ in 0..n_remove {
            let bi = block_influence(&analysis::trace(&current, calib)?)?;
            let idx = argmin_lowest(&bi);
            log::info!("shortgpt: removing layer {} (BI {:.5})", origin[idx], bi[idx]);
            report.removed.push(origin.remove(idx));
            report.bi_history.push(bi);
            current = remove_layer(&current, idx);
        }
    } else {
        let bi = block_influence(&analysis::trace(&current, calib)?)?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| bi[a].total_cmp(&bi[b]).then(a.cmp(&b)));
        let mut drop: Vec<usize> = idx[..n_remove].to_vec();
        report.removed = drop.iter().map(|&i| i + 1).collect();
        report.bi_history.push(bi);
        drop.sort_unstable_by(|a, b| b.cmp(a));
        for i in drop {
            current = remove_layer(&current, i);
        }
    }
    Ok((current, report))
}

/// `θ*_ℓ = θ_ℓ + Σ_i (θ_{ℓ+i} − θ_ℓ)` over the given chunk.
pub fn merge_layers(base: &LayerBlock<f32>, rest: &[&LayerBlock<f32>]) -> LayerBlock<f32> {
    let mut out = base.clone();
    for other in rest {
        for ((o, b), t) in out.tensors_mut().into_iter().zip(base.tensors()).zip(other.tensors()) {
            for ((x, &bv), &tv) in o.data_mut().iter_mut().zip(b.data()).zip(t.data()) {
                *x += tv - bv;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LacoStep {
    /// Original 1-based layers covered by the candidate chunk.
    pub layers: Vec<usize>,
    pub similarity: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LacoReport {
    pub config: LacoConfig,
    pub steps: Vec<LacoStep>,
    /// Original layers folded into each surviving layer.
    pub layer_origins: Vec<Vec<usize>>,
}

fn last_hidden_similarity(reference: &[Tensor<f32>], model: &ParameterSet<f32>, calib: &CalibrationSet) -> Result<f64> {
    let mut total = 0.0;
    for (r, s) in reference.iter().zip(calib.samples()) {
        let out = model::forward(model, s)?;
        total += mean_row_cosine(r, out.hidden.last().expect("layers"), "laco")?;
    }
    Ok(total / reference.len() as f64)
}

/// Layer collapse. Scans candidate heads `ℓ` downward from `H − C`, merging the
/// `C` layers after `ℓ` into it when the merged model's last hidden states stay
/// within `threshold` cosine of the original's. Accepted merges move the scan
/// down by `min_interval`, rejections by one.
pub fn laco_merge(
    model: &ParameterSet<f32>,
    calib: &CalibrationSet,
    cfg: &LacoConfig,
) -> Result<(ParameterSet<f32>, LacoReport)> {
    let n = model.n_layers();
    let hi = cfg.layer_range_hi.unwrap_or(n);
    let (lo, c) = (cfg.layer_range_lo, cfg.chunk_size);
    if c == 0 || cfg.min_interval == 0 || !cfg.threshold.is_finite() {
        return Err(Error::Config("chunk_size and min_interval must be positive, threshold finite".into()));
    }
    if lo == 0 || hi > n || lo > hi || hi - lo < c {
        return Err(Error::Invalid(format!(
            "layer range [{lo}, {hi}] on a {n}-layer model cannot hold a chunk of {}",
            c + 1
        )));
    }
    let reference: Vec<Tensor<f32>> = calib
        .samples()
        .iter()
        .map(|s| model::forward(model, s).map(|o| o.hidden.into_iter().last().expect("layers")))
        .collect::<Result<_>>()?;

    let mut current = model.clone();
    let mut origins: Vec<Vec<usize>> = (1..=n).map(|i| vec![i]).collect();
    let mut steps = Vec::new();
    // Current-model upper bound of the scan range.
    let mut hi_cur = hi;
    let mut l = hi - c;
    while l >= lo {
        let head = l - 1;
        let rest: Vec<&LayerBlock<f32>> = current.layers[head + 1..=head + c].iter().collect();
        let merged = merge_layers(&current.layers[head], &rest);
        let mut candidate = current.clone();
        candidate.layers.splice(head..=head + c, [merged]);
        candidate.config.n_layers = candidate.layers.len();
        let sim = last_hidden_similarity(&reference, &candidate, calib)?;
        let covered: Vec<usize> = origins[head..=head + c].concat();
        let accepted = sim >= cfg.threshold;
        log::info!(
            "laco: chunk {:?} similarity {sim:.5} {}",
            covered,
            if accepted { "accepted" } else { "rejected" }
        );
        steps.push(LacoStep {
            layers: covered.clone(),
            similarity: sim,
            accepted,
        });
        if accepted {
            current = candidate;
            origins.splice(head..=head + c, [covered]);
            hi_cur -= c;
            let next = l.saturating_sub(cfg.min_interval);
            l = next.min(hi_cur.saturating_sub(c));
        } else {
            l -= 1;
        }
        if l == 0 || hi_cur < c + 1 {
            break;
        }
    }
    Ok((
        current,
        LacoReport {
            config: cfg.clone(),
            steps,
            layer_origins: origins,
        },
    ))
}

/// Teacher layers only, arranged like the interpolated model with
/// `n_keep_patched` blocks patched: the untrained initialized student patched
/// with the first `n_keep_patched` entries of `order`.
pub fn naive_drop(
    teacher: &ParameterSet<f32>,
    partition: &BlockPartition,
    order: &PatchOrder,
    n_keep_patched: usize,
) -> Result<ParameterSet<f32>> {
    let m = partition.n_blocks();
    if n_keep_patched > m {
        return Err(Error::Invalid(format!("n_keep_patched {n_keep_patched} exceeds M = {m}")));
    }
    if order.len() != m {
        return Err(Error::Invalid(format!("patch order covers {} of {m} blocks", order.len())));
    }
    let init = surgery::init_student(teacher, partition)?;
    let set: PatchSet = order.as_slice()[..n_keep_patched].iter().copied().collect();
    surgery::patch(&init, teacher, partition, &set)
}

/// Method, removed/merged layers and settings recorded next to a pruned checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneManifest {
    pub method: String,
    pub n_layers_before: usize,
    pub n_layers_after: usize,
    /// Original 1-based indices of layers no longer present as separate layers.
    pub removed: Vec<usize>,
    pub details: serde_json::Value,
}
