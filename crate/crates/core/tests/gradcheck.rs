mod common;

use std::sync::Arc;

use boomerang::distill::LossWeights;
use boomerang::graph::Graph;
use boomerang::kernels::RopeTable;
use boomerang::surgery::BlockPartition;
use boomerang::Tensor;
use common::*;

const TOL: f64 = 1e-3;

fn assert_op(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[boomerang::Var]) -> boomerang::Result<boomerang::Var>) {
    let err = op_grad_error(inputs, f);
    assert!(err < TOL, "{name}: max relative error {err:.3e}");
}

#[test]
fn matmul_grad() {
    let mut r = rng(1);
    let (a, b) = (uniform(&mut r, &[3, 4], 2.0), uniform(&mut r, &[4, 2], 2.0));
    assert_op("matmul", &[a, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 9)
    });
}

#[test]
fn matmul_nt_grad() {
    let mut r = rng(2);
    let (a, b) = (uniform(&mut r, &[3, 4], 2.0), uniform(&mut r, &[5, 4], 2.0));
    assert_op("matmul_nt", &[a, b], |g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        weighted_sum(g, y, 9)
    });
}

#[test]
fn elementwise_grads() {
    let mut r = rng(3);
    let (a, b) = (uniform(&mut r, &[2, 5], 2.0), uniform(&mut r, &[2, 5], 2.0));
    assert_op("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 4)
    });
    assert_op("mul", &[a.clone(), b], |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 4)
    });
    assert_op("scale", &[a], |g, v| {
        let y = g.scale(v[0], -1.7)?;
        weighted_sum(g, y, 4)
    });
}

#[test]
fn square_at_three_is_six() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0f64));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
}

#[test]
fn constant_has_zero_grad() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0f64));
    let c = g.constant(Tensor::scalar(5.0f64));
    let y = g.scale(c, 2.0).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(x).is_none_or(|t| t.item() == 0.0));
}

#[test]
fn rms_norm_grad() {
    let mut r = rng(4);
    let (x, w) = (uniform(&mut r, &[3, 6], 2.0), uniform(&mut r, &[6], 2.0));
    assert_op("rms_norm", &[x, w], |g, v| {
        let y = g.rms_norm(v[0], v[1], 1e-6)?;
        weighted_sum(g, y, 5)
    });
}

#[test]
fn embedding_grad() {
    let mut r = rng(5);
    let table = uniform(&mut r, &[7, 4], 2.0);
    assert_op("embedding", &[table], |g, v| {
        let y = g.embedding(v[0], &[3, 0, 3, 6, 1])?;
        weighted_sum(g, y, 6)
    });
}

#[test]
fn add_periodic_grad() {
    let mut r = rng(6);
    let (x, pos) = (uniform(&mut r, &[6, 4], 2.0), uniform(&mut r, &[3, 4], 2.0));
    assert_op("add_periodic", &[x, pos], |g, v| {
        let y = g.add_periodic(v[0], v[1], 3)?;
        weighted_sum(g, y, 7)
    });
}

#[test]
fn rope_grad() {
    let mut r = rng(7);
    let x = uniform(&mut r, &[2 * 5, 8], 2.0);
    let table = Arc::new(RopeTable::<f64>::new(4, 5, 10_000.0));
    assert_op("rope", &[x], |g, v| {
        let y = g.rope(v[0], 2, 5, table.clone())?;
        weighted_sum(g, y, 8)
    });
}

#[test]
fn attention_grad() {
    let mut r = rng(8);
    let shape = [2 * 4, 6];
    let (q, k, v) = (uniform(&mut r, &shape, 2.0), uniform(&mut r, &shape, 2.0), uniform(&mut r, &shape, 2.0));
    assert_op("attention", &[q, k, v], |g, x| {
        let y = g.attention(x[0], x[1], x[2], 2, 4, 2)?;
        weighted_sum(g, y, 10)
    });
}

#[test]
fn swiglu_grad() {
    let mut r = rng(9);
    let (a, b) = (uniform(&mut r, &[3, 5], 2.0), uniform(&mut r, &[3, 5], 2.0));
    assert_op("swiglu", &[a, b], |g, v| {
        let y = g.swiglu(v[0], v[1])?;
        weighted_sum(g, y, 11)
    });
}

#[test]
fn cross_entropy_grad() {
    let mut r = rng(10);
    let logits = uniform(&mut r, &[4, 5], 2.0);
    assert_op("cross_entropy", &[logits], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]));
}

#[test]
fn kl_grad() {
    let mut r = rng(11);
    let logits = uniform(&mut r, &[4, 5], 2.0);
    let target = uniform(&mut r, &[4, 5], 2.0);
    for tau in [1.0, 2.0, 0.5] {
        assert_op("kl", &[logits.clone()], |g, v| g.kl_div(v[0], &target, tau));
    }
}

#[test]
fn cosine_grad() {
    let mut r = rng(12);
    let x = uniform(&mut r, &[4, 6], 2.0);
    let target = Arc::new(uniform(&mut r, &[4, 6], 2.0));
    assert_op("cosine", &[x], |g, v| g.cosine_distance(v[0], target.clone()));
}

#[test]
fn full_objective_grad_rotary_untied() {
    let student = spread_model(&tiny_config(2), 21, 0.5);
    let teacher = spread_model(&tiny_config(3), 22, 0.5);
    let p = BlockPartition::new(vec![1, 3], 3).unwrap();
    let err = loss_grad_error(&student, &teacher, &p, &LossWeights::for_student(2), 2, 5, 100, 23);
    assert!(err < TOL, "max relative error {err:.3e}");
}

#[test]
fn full_objective_grad_learned_tied() {
    let cfg = |n| boomerang::ModelConfig {
        tie_embeddings: true,
        ..learned(tiny_config(n))
    };
    let student = spread_model(&cfg(2), 31, 0.5);
    let teacher = spread_model(&cfg(3), 32, 0.5);
    let p = BlockPartition::new(vec![1, 2], 3).unwrap();
    let w = LossWeights {
        tau: 1.5,
        lambda_kl: 0.7,
        lambda_cos: 0.4,
    };
    let err = loss_grad_error(&student, &teacher, &p, &w, 2, 4, 100, 33);
    assert!(err < TOL, "max relative error {err:.3e}");
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0f64));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(boomerang::Error::BackwardTwice)));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::<f64>::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(boomerang::Error::NonScalarLoss(_))));
}
