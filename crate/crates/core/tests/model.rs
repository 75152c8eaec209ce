mod common;

use boomerang::model::{self, forward, init_random, LmHead, ModelConfig, ParameterSet, PositionEncoding};
use boomerang::surgery::{init_student, BlockPartition};
use boomerang::Tensor;
use common::*;
use proptest::prelude::*;

/// Straight-line f64 reference: loops only, no shared kernels.
fn reference_logits(p: &ParameterSet<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let c = &p.config;
    let (d, nh, t) = (c.d_model, c.n_heads, tokens.len());
    let dh = d / nh;
    let at = |m: &Tensor<f64>, i: usize, j: usize| m.data()[i * m.cols() + j];
    let rms = |x: &[f64], w: &Tensor<f64>| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let s = 1.0 / (ms + c.norm_eps).sqrt();
        x.iter().zip(w.data()).map(|(v, g)| v * s * g).collect()
    };
    let lin = |x: &[f64], m: &Tensor<f64>| -> Vec<f64> {
        (0..m.cols()).map(|j| (0..x.len()).map(|i| x[i] * at(m, i, j)).sum()).collect()
    };
    let rot = |v: &mut [f64], pos: usize| {
        if c.positions != PositionEncoding::Rotary {
            return;
        }
        let half = dh / 2;
        for h in 0..nh {
            for i in 0..half {
                let ang = pos as f64 * c.rope_base.powf(-2.0 * i as f64 / dh as f64);
                let (a, b) = (v[h * dh + i], v[h * dh + i + half]);
                v[h * dh + i] = a * ang.cos() - b * ang.sin();
                v[h * dh + i + half] = b * ang.cos() + a * ang.sin();
            }
        }
    };

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &tok)| {
            let mut e = p.embedding.row(tok as usize).to_vec();
            if let Some(pe) = &p.positions {
                for (a, b) in e.iter_mut().zip(pe.row(pos)) {
                    *a += b;
                }
            }
            e
        })
        .collect();
    for l in &p.layers {
        let a: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &l.attn_norm)).collect();
        let mut q: Vec<Vec<f64>> = a.iter().map(|r| lin(r, &l.wq)).collect();
        let mut k: Vec<Vec<f64>> = a.iter().map(|r| lin(r, &l.wk)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| lin(r, &l.wv)).collect();
        for i in 0..t {
            rot(&mut q[i], i);
            rot(&mut k[i], i);
        }
        let mut att = vec![vec![0.0; d]; t];
        for h in 0..nh {
            let s = h * dh..(h + 1) * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i][s.clone()].iter().zip(&k[j][s.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, sc) in scores.iter().enumerate() {
                    let w = (sc - m).exp() / z;
                    for dd in s.clone() {
                        att[i][dd] += w * v[j][dd];
                    }
                }
            }
        }
        for i in 0..t {
            let o = lin(&att[i], &l.wo);
            for (a, b) in x[i].iter_mut().zip(o) {
                *a += b;
            }
            let f = rms(&x[i], &l.ffn_norm);
            let (g, u) = (lin(&f, &l.w_gate), lin(&f, &l.w_up));
            let act: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let dn = lin(&act, &l.w_down);
            for (a, b) in x[i].iter_mut().zip(dn) {
                *a += b;
            }
        }
    }
    let head = p.lm_head();
    x.iter()
        .map(|r| {
            let n = rms(r, &p.final_norm);
            (0..head.rows()).map(|v| n.iter().zip(head.row(v)).map(|(a, b)| a * b).sum()).collect()
        })
        .collect()
}

fn toy(positions: PositionEncoding, tied: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 12,
        vocab_size: 11,
        max_seq_len: 10,
        tie_embeddings: tied,
        positions,
        ..ModelConfig::default()
    }
}

#[test]
fn matches_reference_implementation() {
    for (pos, tied) in [(PositionEncoding::Rotary, false), (PositionEncoding::Learned, true)] {
        let p = spread_model(&toy(pos, tied), 3, 0.6);
        let tokens = random_tokens(&mut rng(4), 7, 11);
        let got = forward(&p, &tokens).unwrap().logits;
        let want = reference_logits(&p, &tokens);
        for (r, w) in want.iter().enumerate() {
            for (a, b) in got.row(r).iter().zip(w) {
                assert!((a - b).abs() < 1e-5, "{pos:?}: {a} vs {b}");
            }
        }
        // f32 path agrees as well
        let p32: ParameterSet<f32> = p.cast();
        let got32 = forward(&p32, &tokens).unwrap().logits;
        for (r, w) in want.iter().enumerate() {
            for (a, b) in got32.row(r).iter().zip(w) {
                assert!((*a as f64 - b).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn single_token_logits_shape() {
    let p: ParameterSet<f32> = init_random(&tiny_config(2), 0).unwrap();
    let out = forward(&p, &[3]).unwrap();
    assert_eq!(out.logits.shape(), &[1, 19]);
    assert_eq!(out.hidden.len(), 2);
}

#[test]
fn out_of_range_token_rejected() {
    let p: ParameterSet<f32> = init_random(&tiny_config(1), 0).unwrap();
    assert!(matches!(forward(&p, &[1, 19]), Err(boomerang::Error::TokenOutOfRange { .. })));
}

#[test]
fn sequence_longer_than_context_rejected() {
    let p: ParameterSet<f32> = init_random(&tiny_config(1), 0).unwrap();
    assert!(forward(&p, &[1; 17]).is_err());
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = tiny_config(2);
    let a: ParameterSet<f32> = init_random(&cfg, 5).unwrap();
    let b: ParameterSet<f32> = init_random(&cfg, 5).unwrap();
    let c: ParameterSet<f32> = init_random(&cfg, 6).unwrap();
    assert!(params_identical(&a, &b));
    assert!(!tensors_identical(&a.layers[0].wq, &c.layers[0].wq));
}

#[test]
fn init_uses_scaled_normal() {
    let cfg = ModelConfig::default();
    let p: ParameterSet<f32> = init_random(&cfg, 1).unwrap();
    let std = |t: &Tensor<f32>| {
        let n = t.len() as f64;
        let m = t.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        (t.data().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    assert!((std(&p.layers[0].wq) - 0.02).abs() < 0.001);
    let out_std = 0.02 / (2.0 * cfg.n_layers as f64).sqrt();
    assert!((std(&p.layers[0].wo) - out_std).abs() < 0.0005);
    assert!((std(&p.layers[0].w_down) - out_std).abs() < 0.0005);
    assert!(p.layers[0].attn_norm.data().iter().all(|&x| x == 1.0));
}

#[test]
fn fresh_init_is_near_uniform() {
    let p: ParameterSet<f32> = init_random(&ModelConfig::default(), 2).unwrap();
    let tokens = random_tokens(&mut rng(3), 64, 259);
    let logits = forward(&p, &tokens).unwrap().logits;
    assert!(logits.all_finite());
    let ln_v = (259f64).ln();
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f32::MIN, f32::max) as f64;
        let z: f64 = row.iter().map(|&x| (x as f64 - m).exp()).sum();
        let h: f64 = -row
            .iter()
            .map(|&x| {
                let p = (x as f64 - m).exp() / z;
                p * p.ln()
            })
            .sum::<f64>();
        assert!((h - ln_v).abs() / ln_v < 0.05, "entropy {h}");
    }
}

#[test]
fn tied_head_follows_embedding() {
    let cfg = ModelConfig {
        tie_embeddings: true,
        ..tiny_config(1)
    };
    let mut p: ParameterSet<f32> = init_random(&cfg, 0).unwrap();
    assert!(matches!(p.head, LmHead::Tied));
    p.embedding.data_mut()[5] = 3.25;
    assert_eq!(p.lm_head().data()[5], 3.25);
}

#[test]
fn inference_params_count_tied_head_twice() {
    let untied: ParameterSet<f32> = init_random(&tiny_config(2), 0).unwrap();
    let total: usize = untied.named_tensors().iter().map(|(_, t)| t.len()).sum();
    assert_eq!(untied.count_inference_params(), total);
    let tied: ParameterSet<f32> = init_random(
        &ModelConfig {
            tie_embeddings: true,
            ..tiny_config(2)
        },
        0,
    )
    .unwrap();
    assert_eq!(tied.count_inference_params(), tied.trainable_params() + 19 * 16);
}

#[test]
fn later_layers_do_not_touch_earlier_hidden_states() {
    let a: ParameterSet<f32> = init_random(&tiny_config(4), 0).unwrap();
    let other: ParameterSet<f32> = init_random(&tiny_config(4), 1).unwrap();
    let mut b = a.clone();
    b.layers[3] = other.layers[3].clone();
    let tokens = random_tokens(&mut rng(1), 12, 19);
    let (ha, hb) = (forward(&a, &tokens).unwrap(), forward(&b, &tokens).unwrap());
    for i in 0..3 {
        assert!(tensors_identical(&ha.hidden[i], &hb.hidden[i]));
    }
    assert!(!tensors_identical(&ha.hidden[3], &hb.hidden[3]));
}

#[test]
fn batched_forward_matches_single() {
    let p: ParameterSet<f32> = init_random(&tiny_config(2), 0).unwrap();
    let tokens = random_tokens(&mut rng(2), 3 * 9, 19);
    let batched = model::forward_batch(&p, &tokens, 3, 9).unwrap();
    for b in 0..3 {
        let single = forward(&p, &tokens[b * 9..(b + 1) * 9]).unwrap();
        let rows = batched.logits.slice_rows(b * 9, 9).unwrap();
        assert!(rows.max_abs_diff(&single.logits) < 1e-6);
    }
}

#[test]
fn reruns_are_bit_identical() {
    let p: ParameterSet<f32> = init_random(&ModelConfig::default(), 9).unwrap();
    let tokens = random_tokens(&mut rng(9), 40, 259);
    let a = forward(&p, &tokens).unwrap();
    let b = forward(&p, &tokens).unwrap();
    assert!(tensors_identical(&a.logits, &b.logits));
}

#[test]
fn init_student_copies_start_layers() {
    let t: ParameterSet<f32> = init_random(&tiny_config(8), 4).unwrap();
    let part = BlockPartition::new(vec![1, 3, 5, 7, 8], 8).unwrap();
    let mut s = init_student(&t, &part).unwrap();
    for (i, &l) in [1, 3, 5, 7, 8].iter().enumerate() {
        assert!(tensors_identical(&s.layers[i].wq, &t.layers[l - 1].wq));
    }
    let before = t.layers[0].wq.clone();
    s.layers[0].wq.data_mut()[0] += 1.0;
    assert!(tensors_identical(&t.layers[0].wq, &before));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_causal(seed in 0u64..1000, t in 2usize..12, cut in 0usize..11) {
        let cut = cut % (t - 1);
        let p: ParameterSet<f32> = init_random(&tiny_config(2), seed).unwrap();
        let mut r = rng(seed);
        let a = random_tokens(&mut r, t, 19);
        let mut b = a.clone();
        for x in &mut b[cut + 1..] {
            *x = (*x + 1) % 19;
        }
        let (la, lb) = (forward(&p, &a).unwrap().logits, forward(&p, &b).unwrap().logits);
        for row in 0..=cut {
            prop_assert_eq!(la.row(row), lb.row(row));
        }
    }
}
