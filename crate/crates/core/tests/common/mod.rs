#![allow(dead_code)]

use boomerang::graph::{Graph, Var};
use boomerang::model::{init_random, ModelConfig, ParameterSet, PositionEncoding};
use boomerang::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lim: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-lim..lim)).collect()).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Max relative error between autodiff and central differences for a scalar
/// function of `inputs`, over every coordinate.
pub fn op_grad_error(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut vals = inputs.to_vec();
    for t in 0..vals.len() {
        for i in 0..vals[t].len() {
            let x = vals[t].data()[i];
            vals[t].data_mut()[i] = x + FD_STEP;
            let up = eval(&vals);
            vals[t].data_mut()[i] = x - FD_STEP;
            let down = eval(&vals);
            vals[t].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[t].data()[i], numeric));
        }
    }
    worst
}

/// Reduce a tensor node to a scalar through fixed random weights so every
/// output coordinate carries a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = uniform(&mut rng(seed), &shape, 1.0);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    g.sum(y)
}

pub fn tiny_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_ffn: 24,
        vocab_size: 19,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

pub fn micro_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 4,
        n_heads: 1,
        d_ffn: 4,
        vocab_size: 7,
        max_seq_len: 8,
        ..ModelConfig::default()
    }
}

/// Random model with weights spread to `±lim`, so activations are far from zero.
pub fn spread_model(cfg: &ModelConfig, seed: u64, lim: f64) -> ParameterSet<f64> {
    let mut p: ParameterSet<f64> = init_random(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x = r.random_range(-lim..lim);
        }
    }
    p
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

pub fn learned(cfg: ModelConfig) -> ModelConfig {
    ModelConfig {
        positions: PositionEncoding::Learned,
        ..cfg
    }
}

/// Every parameter tensor of two models equal bit for bit.
pub fn params_identical<T: boomerang::Real>(a: &ParameterSet<T>, b: &ParameterSet<T>) -> bool {
    let (na, nb) = (a.named_tensors(), b.named_tensors());
    na.len() == nb.len()
        && na
            .iter()
            .zip(&nb)
            .all(|((n1, t1), (n2, t2))| n1 == n2 && tensors_identical(t1, t2))
}

use boomerang::distill::{self, LossWeights};
use boomerang::model;
use boomerang::surgery::BlockPartition;

/// Max relative error of the distillation objective's student gradient
/// against central differences over `n_coords` random parameter coordinates.
pub fn loss_grad_error(
    student: &ParameterSet<f64>,
    teacher: &ParameterSet<f64>,
    partition: &BlockPartition,
    weights: &LossWeights,
    batch: usize,
    seq: usize,
    n_coords: usize,
    seed: u64,
) -> f64 {
    let mut r = rng(seed);
    let tokens = random_tokens(&mut r, batch * (seq + 1), student.config.vocab_size);
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    for b in 0..batch {
        let w = &tokens[b * (seq + 1)..(b + 1) * (seq + 1)];
        inputs.extend_from_slice(&w[..seq]);
        targets.extend_from_slice(&w[1..]);
    }
    let signal = distill::TeacherSignal::compute(teacher, &inputs, batch, seq).unwrap();

    let mut g = Graph::new();
    let bound = model::bind(&mut g, student, true);
    let vars = distill::record_total_loss(
        &mut g,
        &student.config,
        &bound,
        &inputs,
        &targets,
        batch,
        seq,
        Some((&signal, partition)),
        weights,
    )
    .unwrap();
    g.backward(vars.total).unwrap();
    let grads: Vec<Tensor<f64>> = bound
        .trainable(student.config.tie_embeddings)
        .into_iter()
        .map(|v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();

    let loss = |p: &ParameterSet<f64>| {
        distill::total_loss(&inputs, &targets, batch, seq, p, teacher, weights, partition)
            .unwrap()
            .total
    };
    let mut probe = student.clone();
    let mut worst = 0.0f64;
    for _ in 0..n_coords {
        let t = r.random_range(0..grads.len());
        let i = r.random_range(0..grads[t].len());
        let x = probe.tensors_mut()[t].data()[i];
        probe.tensors_mut()[t].data_mut()[i] = x + FD_STEP;
        let up = loss(&probe);
        probe.tensors_mut()[t].data_mut()[i] = x - FD_STEP;
        let down = loss(&probe);
        probe.tensors_mut()[t].data_mut()[i] = x;
        worst = worst.max(rel_err(grads[t].data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

pub fn tensors_identical<T: boomerang::Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
}
