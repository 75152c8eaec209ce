//! Pre-norm decoder-only transformer (RMSNorm, rotary positions, SiLU-gated FFN)
//! whose forward pass exposes every layer's residual-stream output.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::RopeTable;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Rotary,
    /// Learned absolute position table added to the embedding output.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
    #[serde(default = "default_positions")]
    pub positions: PositionEncoding,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_positions() -> PositionEncoding {
    PositionEncoding::Rotary
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl Default for ModelConfig {
    /// The desk-scale teacher: 8 layers, width 128, byte-level vocabulary.
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ffn: 512,
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_seq_len: 256,
            tie_embeddings: false,
            positions: PositionEncoding::Rotary,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ffn == 0 || self.max_seq_len == 0 {
            return bad("layer count, widths and max_seq_len must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("n_heads must divide d_model");
        }
        if self.positions == PositionEncoding::Rotary && (self.d_model / self.n_heads) % 2 != 0 {
            return bad("rotary positions need an even head dimension");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Same architecture with a different depth.
    pub fn with_layers(&self, n_layers: usize) -> Self {
        Self {
            n_layers,
            ..self.clone()
        }
    }

    /// Whether two configs agree on everything except depth and tying,
    /// i.e. whether layer blocks can be swapped between them.
    pub fn block_compatible(&self, other: &Self) -> bool {
        self.d_model == other.d_model
            && self.n_heads == other.n_heads
            && self.d_ffn == other.d_ffn
            && self.vocab_size == other.vocab_size
            && self.max_seq_len == other.max_seq_len
            && self.positions == other.positions
            && self.rope_base == other.rope_base
            && self.norm_eps == other.norm_eps
    }
}

/// One transformer block. Weights are stored `[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlock<T: Real = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

pub const LAYER_TENSOR_NAMES: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down",
];

impl<T: Real> LayerBlock<T> {
    pub fn tensors(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub fn shapes(cfg: &ModelConfig) -> [Vec<usize>; 9] {
        let (d, f) = (cfg.d_model, cfg.d_ffn);
        [
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d, f],
            vec![d, f],
            vec![f, d],
        ]
    }

    pub fn from_tensors(mut ts: Vec<Tensor<T>>) -> Self {
        assert_eq!(ts.len(), 9);
        let mut next = || ts.remove(0);
        Self {
            attn_norm: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ffn_norm: next(),
            w_gate: next(),
            w_up: next(),
            w_down: next(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> LayerBlock<U> {
        LayerBlock::from_tensors(self.tensors().iter().map(|t| t.cast()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LmHead<T: Real = f32> {
    /// The head reuses the embedding matrix.
    Tied,
    Untied(Tensor<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T: Real = f32> {
    pub config: ModelConfig,
    pub embedding: Tensor<T>,
    /// Present only with [`PositionEncoding::Learned`].
    pub positions: Option<Tensor<T>>,
    pub layers: Vec<LayerBlock<T>>,
    pub final_norm: Tensor<T>,
    pub head: LmHead<T>,
}

impl<T: Real> ParameterSet<T> {
    pub fn lm_head(&self) -> &Tensor<T> {
        match &self.head {
            LmHead::Tied => &self.embedding,
            LmHead::Untied(h) => h,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Named tensors in canonical order; a tied head is not listed.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        if let Some(p) = &self.positions {
            out.push(("positions".into(), p));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSOR_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let LmHead::Untied(h) = &self.head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        if let Some(p) = &mut self.positions {
            out.push(p);
        }
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        if let LmHead::Untied(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    /// Parameters actually stored (a tied head counts once).
    pub fn trainable_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters touched at inference: embedding and head counted separately even when tied.
    pub fn count_inference_params(&self) -> usize {
        let tied_extra = match self.head {
            LmHead::Tied => self.embedding.len(),
            LmHead::Untied(_) => 0,
        };
        self.trainable_params() + tied_extra
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Check the structural invariants tying the tensors to `config`.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.layers.len() != cfg.n_layers {
            return bad(format!("{} layers, config says {}", self.layers.len(), cfg.n_layers));
        }
        if matches!(self.head, LmHead::Tied) != cfg.tie_embeddings {
            return bad("head tying disagrees with config".into());
        }
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        let mut expect: Vec<(String, Vec<usize>)> = vec![("embedding".into(), vec![v, d])];
        if cfg.positions == PositionEncoding::Learned {
            expect.push(("positions".into(), vec![cfg.max_seq_len, d]));
        }
        for i in 0..cfg.n_layers {
            for (name, s) in LAYER_TENSOR_NAMES.iter().zip(LayerBlock::<T>::shapes(cfg)) {
                expect.push((format!("layers.{i}.{name}"), s));
            }
        }
        expect.push(("final_norm".into(), vec![d]));
        if !cfg.tie_embeddings {
            expect.push(("lm_head".into(), vec![v, d]));
        }
        let got = self.named_tensors();
        if got.len() != expect.len() {
            return bad(format!("{} tensors, expected {}", got.len(), expect.len()));
        }
        for ((gn, gt), (en, es)) in got.iter().zip(&expect) {
            if gn != en || gt.shape() != es.as_slice() {
                return bad(format!("tensor {gn} {:?}, expected {en} {es:?}", gt.shape()));
            }
        }
        if !self.all_finite() {
            return Err(Error::NonFinite { op: "parameters" });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            positions: self.positions.as_ref().map(|p| p.cast()),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            final_norm: self.final_norm.cast(),
            head: match &self.head {
                LmHead::Tied => LmHead::Tied,
                LmHead::Untied(h) => LmHead::Untied(h.cast()),
            },
        }
    }

    /// Rebuild from a named-tensor list in canonical order (see [`ParameterSet::named_tensors`]).
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut it = tensors.into_iter();
        let mut take = |want: &str| -> Result<Tensor<T>> {
            match it.next() {
                Some((name, t)) if name == want => Ok(t),
                Some((name, _)) => Err(Error::Config(format!("expected tensor {want}, found {name}"))),
                None => Err(Error::Config(format!("missing tensor {want}"))),
            }
        };
        let embedding = take("embedding")?;
        let positions = match config.positions {
            PositionEncoding::Learned => Some(take("positions")?),
            PositionEncoding::Rotary => None,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let ts = LAYER_TENSOR_NAMES
                .iter()
                .map(|n| take(&format!("layers.{i}.{n}")))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerBlock::from_tensors(ts));
        }
        let final_norm = take("final_norm")?;
        let head = if config.tie_embeddings {
            LmHead::Tied
        } else {
            LmHead::Untied(take("lm_head")?)
        };
        if let Some((name, _)) = it.next() {
            return Err(Error::Config(format!("unexpected trailing tensor {name}")));
        }
        let p = Self {
            config,
            embedding,
            positions,
            layers,
            final_norm,
            head,
        };
        p.validate()?;
        Ok(p)
    }
}

pub const INIT_STD: f64 = 0.02;

/// Scaled-normal initialization: std 0.02, residual output projections
/// std 0.02/sqrt(2·n_layers), norm weights one. Deterministic per seed.
pub fn init_random<T: Real>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_out = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let mut normal = |shape: &[usize], std: f64| -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    };
    let (v, d) = (config.vocab_size, config.d_model);
    let embedding = normal(&[v, d], INIT_STD);
    let positions = (config.positions == PositionEncoding::Learned)
        .then(|| normal(&[config.max_seq_len, d], INIT_STD));
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let shapes = LayerBlock::<T>::shapes(config);
        layers.push(LayerBlock {
            attn_norm: Tensor::full(&shapes[0], T::ONE),
            wq: normal(&shapes[1], INIT_STD),
            wk: normal(&shapes[2], INIT_STD),
            wv: normal(&shapes[3], INIT_STD),
            wo: normal(&shapes[4], std_out),
            ffn_norm: Tensor::full(&shapes[5], T::ONE),
            w_gate: normal(&shapes[6], INIT_STD),
            w_up: normal(&shapes[7], INIT_STD),
            w_down: normal(&shapes[8], std_out),
        });
    }
    let head = if config.tie_embeddings {
        LmHead::Tied
    } else {
        LmHead::Untied(normal(&[v, d], INIT_STD))
    };
    Ok(ParameterSet {
        config: config.clone(),
        embedding,
        positions,
        layers,
        final_norm: Tensor::full(&[d], T::ONE),
        head,
    })
}

/// Graph handles for every tensor of a [`ParameterSet`].
pub struct BoundParams {
    pub embedding: Var,
    pub positions: Option<Var>,
    pub layers: Vec<[Var; 9]>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl BoundParams {
    /// Leaves in the same order as [`ParameterSet::tensors_mut`].
    pub fn trainable(&self, tied: bool) -> Vec<Var> {
        let mut out = vec![self.embedding];
        out.extend(self.positions);
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.push(self.final_norm);
        if !tied {
            out.push(self.lm_head);
        }
        out
    }
}

/// Record the parameters as graph leaves (`trainable` selects gradient tracking).
pub fn bind<T: Real>(g: &mut Graph<T>, p: &ParameterSet<T>, trainable: bool) -> BoundParams {
    let embedding = g.leaf(p.embedding.clone(), trainable);
    let positions = p.positions.as_ref().map(|t| g.leaf(t.clone(), trainable));
    let layers = p
        .layers
        .iter()
        .map(|l| l.tensors().map(|t| g.leaf(t.clone(), trainable)))
        .collect();
    let final_norm = g.leaf(p.final_norm.clone(), trainable);
    let lm_head = match &p.head {
        LmHead::Tied => embedding,
        LmHead::Untied(h) => g.leaf(h.clone(), trainable),
    };
    BoundParams {
        embedding,
        positions,
        layers,
        final_norm,
        lm_head,
    }
}

pub struct GraphOutput {
    pub input: Var,
    pub hidden: Vec<Var>,
    pub logits: Var,
}

/// Record a forward pass over `batch` sequences of `seq` tokens each (row-major `[batch × seq]`).
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Result<GraphOutput> {
    if seq == 0 || seq > cfg.max_seq_len {
        return Err(Error::Invalid(format!(
            "sequence length {seq} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    if tokens.len() != batch * seq {
        return Err(Error::Invalid(format!(
            "{} tokens for batch {batch} x seq {seq}",
            tokens.len()
        )));
    }
    let eps = T::from_f64(cfg.norm_eps);
    let mut h = g.embedding(p.embedding, tokens)?;
    if let Some(pos) = p.positions {
        h = g.add_periodic(h, pos, seq)?;
    }
    let input = h;
    let rope = (cfg.positions == PositionEncoding::Rotary)
        .then(|| Arc::new(RopeTable::new(cfg.head_dim(), seq, cfg.rope_base)));
    let mut hidden = Vec::with_capacity(p.layers.len());
    for &[attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down] in &p.layers {
        let a = g.rms_norm(h, attn_norm, eps)?;
        let mut q = g.matmul(a, wq)?;
        let mut k = g.matmul(a, wk)?;
        let v = g.matmul(a, wv)?;
        if let Some(table) = &rope {
            q = g.rope(q, cfg.n_heads, seq, table.clone())?;
            k = g.rope(k, cfg.n_heads, seq, table.clone())?;
        }
        let att = g.attention(q, k, v, batch, seq, cfg.n_heads)?;
        let proj = g.matmul(att, wo)?;
        h = g.add(h, proj)?;
        let f = g.rms_norm(h, ffn_norm, eps)?;
        let gate = g.matmul(f, w_gate)?;
        let up = g.matmul(f, w_up)?;
        let act = g.swiglu(gate, up)?;
        let down = g.matmul(act, w_down)?;
        h = g.add(h, down)?;
        hidden.push(h);
    }
    let normed = g.rms_norm(h, p.final_norm, eps)?;
    let logits = g.matmul_nt(normed, p.lm_head)?;
    Ok(GraphOutput {
        input,
        hidden,
        logits,
    })
}

/// Plain-tensor forward result.
#[derive(Clone, Debug)]
pub struct ForwardResult<T: Real = f32> {
    /// `[rows × vocab]`
    pub logits: Tensor<T>,
    /// Residual-stream output of each layer, `[rows × d_model]`.
    pub hidden: Vec<Tensor<T>>,
    /// Embedding output (input to the first layer).
    pub input: Tensor<T>,
}

/// Untracked forward over a batch of equal-length sequences.
pub fn forward_batch<T: Real>(
    params: &ParameterSet<T>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Result<ForwardResult<T>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let out = forward_graph(&mut g, &params.config, &bound, tokens, batch, seq)?;
    Ok(ForwardResult {
        logits: g.take_value(out.logits),
        hidden: out.hidden.iter().map(|&h| g.take_value(h)).collect(),
        input: g.take_value(out.input),
    })
}

/// Causal forward over one token sequence.
pub fn forward<T: Real>(params: &ParameterSet<T>, tokens: &[u32]) -> Result<ForwardResult<T>> {
    forward_batch(params, tokens, 1, tokens.len())
}

/// Logits only, without keeping the per-layer hidden states.
pub fn logits_batch<T: Real>(
    params: &ParameterSet<T>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let out = forward_graph(&mut g, &params.config, &bound, tokens, batch, seq)?;
    Ok(g.take_value(out.logits))
}
