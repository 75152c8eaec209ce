mod common;

use boomerang::model::{forward, init_random, LmHead, ModelConfig, ParameterSet};
use boomerang::surgery::{
    init_student, patch, patch_sequence, patch_with, BlockPartition, FinalNormSource, KeepRule, PatchOptions,
    PatchOrder, PatchSet,
};
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Tag each layer's first norm weight with its origin so layer identity is visible.
fn tagged(cfg: &ModelConfig, seed: u64, base: f32) -> ParameterSet<f32> {
    let mut p: ParameterSet<f32> = init_random(cfg, seed).unwrap();
    for (i, l) in p.layers.iter_mut().enumerate() {
        l.attn_norm.data_mut()[0] = base + i as f32 + 1.0;
    }
    p
}

fn tags(p: &ParameterSet<f32>) -> Vec<f32> {
    p.layers.iter().map(|l| l.attn_norm.data()[0]).collect()
}

/// Independent oracle: splice blocks in one at a time in the given order,
/// tracking where each student layer currently sits.
fn splice_oracle(student: &[f32], teacher: &[f32], part: &BlockPartition, order: &[usize]) -> Vec<f32> {
    let mut seq: Vec<(usize, f32)> = student.iter().enumerate().map(|(i, &t)| (i + 1, t)).collect();
    for &i in order {
        let pos = seq.iter().position(|&(s, _)| s == i).unwrap();
        let block: Vec<(usize, f32)> = part.block(i).map(|l| (0, teacher[l - 1])).collect();
        seq.splice(pos..=pos, block);
    }
    seq.into_iter().map(|(_, t)| t).collect()
}

#[test]
fn desk_partition_examples() {
    let p = BlockPartition::every_kth(8, 2, KeepRule::KeepLast).unwrap();
    assert_eq!(p.starts(), &[1, 3, 5, 7, 8]);
    let blocks: Vec<Vec<usize>> = p.blocks().map(|b| b.collect()).collect();
    assert_eq!(blocks, vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7], vec![8]]);
    assert_eq!(BlockPartition::every_kth(8, 2, KeepRule::KeepFirstTwo).unwrap().starts(), &[1, 2, 4, 6, 8]);
    assert_eq!(BlockPartition::every_kth(3, 2, KeepRule::KeepLast).unwrap().starts(), &[1, 3]);
    assert!(BlockPartition::every_kth(8, 1, KeepRule::KeepLast).is_err());
    assert!(BlockPartition::every_kth(2, 2, KeepRule::KeepLast).is_err());
}

#[test]
fn patch_three_on_desk_example() {
    let cfg = micro_config(8);
    let t = tagged(&cfg, 1, 100.0);
    let part = BlockPartition::new(vec![1, 3, 5, 7, 8], 8).unwrap();
    let s = tagged(&cfg.with_layers(5), 2, 0.0);
    let m = patch(&s, &t, &part, &[3].into_iter().collect()).unwrap();
    assert_eq!(tags(&m), vec![1.0, 2.0, 105.0, 106.0, 4.0, 5.0]);
    assert!(tensors_identical(&m.embedding, &s.embedding));
    assert!(tensors_identical(m.lm_head(), s.lm_head()));
    assert_eq!(m.config.n_layers, 6);
}

#[test]
fn embedding_and_head_sources() {
    let cfg = micro_config(8);
    let t = tagged(&cfg, 1, 100.0);
    let part = BlockPartition::new(vec![1, 3, 5, 7, 8], 8).unwrap();
    let s = tagged(&cfg.with_layers(5), 2, 0.0);
    let first = patch(&s, &t, &part, &[1].into_iter().collect()).unwrap();
    assert!(tensors_identical(&first.embedding, &t.embedding));
    assert!(tensors_identical(first.lm_head(), s.lm_head()));
    assert!(tensors_identical(&first.final_norm, &s.final_norm));
    let last = patch(&s, &t, &part, &[5].into_iter().collect()).unwrap();
    assert!(tensors_identical(&last.embedding, &s.embedding));
    assert!(tensors_identical(last.lm_head(), t.lm_head()));
    assert!(tensors_identical(&last.final_norm, &t.final_norm));
    let alt = patch_with(
        &s,
        &t,
        &part,
        &[5].into_iter().collect(),
        PatchOptions {
            final_norm: FinalNormSource::WithEmbedding,
        },
    )
    .unwrap();
    assert!(tensors_identical(&alt.final_norm, &s.final_norm));
}

#[test]
fn tying_conflict_unties() {
    let cfg = ModelConfig {
        tie_embeddings: true,
        ..micro_config(4)
    };
    let t = tagged(&cfg, 1, 100.0);
    let part = BlockPartition::new(vec![1, 3], 4).unwrap();
    let s = tagged(&cfg.with_layers(2), 2, 0.0);
    let m = patch(&s, &t, &part, &[2].into_iter().collect()).unwrap();
    assert!(!m.config.tie_embeddings);
    assert!(matches!(m.head, LmHead::Untied(_)));
    assert!(tensors_identical(&m.embedding, &s.embedding));
    assert!(tensors_identical(m.lm_head(), &t.embedding));
    m.validate().unwrap();
    let both = patch(&s, &t, &part, &PatchSet::full(2)).unwrap();
    assert!(both.config.tie_embeddings && matches!(both.head, LmHead::Tied));
}

#[test]
fn endpoints_and_inputs_untouched() {
    let cfg = ModelConfig::default();
    let t: ParameterSet<f32> = init_random(&cfg, 1).unwrap();
    let part = BlockPartition::every_kth(8, 2, KeepRule::KeepLast).unwrap();
    let s: ParameterSet<f32> = init_random(&cfg.with_layers(5), 2).unwrap();
    let (t0, s0) = (t.clone(), s.clone());
    let empty = patch(&s, &t, &part, &PatchSet::empty()).unwrap();
    assert!(params_identical(&empty, &s));
    let full = patch(&s, &t, &part, &PatchSet::full(5)).unwrap();
    assert!(params_identical(&full, &t));
    let toks = random_tokens(&mut rng(3), 32, 259);
    assert!(forward(&full, &toks).unwrap().logits.max_abs_diff(&forward(&t, &toks).unwrap().logits) < 1e-5);
    assert!(params_identical(&t, &t0) && params_identical(&s, &s0));
}

#[test]
fn out_of_range_index_rejected() {
    let cfg = micro_config(4);
    let t: ParameterSet<f32> = init_random(&cfg, 1).unwrap();
    let part = BlockPartition::new(vec![1, 3], 4).unwrap();
    let s = init_student(&t, &part).unwrap();
    assert!(patch(&s, &t, &part, &[3].into_iter().collect()).is_err());
    assert!(patch(&s, &t, &part, &[0].into_iter().collect()).is_err());
    assert!(PatchOrder::new(vec![1, 1]).is_err());
    assert!(PatchOrder::new(vec![2, 3]).is_err());
}

#[test]
fn sequence_presets() {
    let cfg = micro_config(8);
    let t = tagged(&cfg, 1, 100.0);
    let part = BlockPartition::new(vec![1, 3, 5, 7, 8], 8).unwrap();
    let s = tagged(&cfg.with_layers(5), 2, 0.0);
    let seq = patch_sequence(&s, &t, &part, &PatchOrder::backward(5)).unwrap();
    let sets: Vec<Vec<usize>> = seq.iter().map(|(p, _)| p.iter().collect()).collect();
    assert_eq!(sets, vec![vec![], vec![5], vec![4, 5], vec![3, 4, 5], vec![2, 3, 4, 5], vec![1, 2, 3, 4, 5]]);
    assert!(params_identical(&seq[0].1, &s));
    assert!(params_identical(&seq[5].1, &t));
    let sizes: Vec<usize> = seq.iter().map(|(_, m)| m.n_layers()).collect();
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    let fwd = patch_sequence(&s, &t, &part, &PatchOrder::forward(5)).unwrap();
    assert!(tensors_identical(&fwd[1].1.embedding, &t.embedding));
}

#[test]
fn similarity_order_examples() {
    assert_eq!(PatchOrder::by_similarity(&[0.5, 0.5, 0.5]).unwrap().as_slice(), &[1, 2, 3]);
    assert_eq!(PatchOrder::by_similarity(&[0.9, 0.2, 0.8]).unwrap().as_slice(), &[2, 3, 1]);
}

#[test]
fn inference_params_strictly_monotone_along_desk_sweep() {
    let cfg = ModelConfig::default();
    let t: ParameterSet<f32> = init_random(&cfg, 1).unwrap();
    let part = BlockPartition::every_kth(8, 2, KeepRule::KeepLast).unwrap();
    let s = init_student(&t, &part).unwrap();
    let seq = patch_sequence(&s, &t, &part, &PatchOrder::forward(5)).unwrap();
    let counts: Vec<usize> = seq.iter().map(|(_, m)| m.count_inference_params()).collect();
    // forward order patches the two-layer blocks first
    assert!(counts[..4].windows(2).all(|w| w[0] < w[1]));
    assert!(counts[0] < counts[5]);
    assert!(s.count_inference_params() < t.count_inference_params());
}

fn random_instance(seed: u64) -> (BlockPartition, Vec<usize>, PatchSet) {
    let mut r = rng(seed);
    let n = r.random_range(3..=16);
    let part = if r.random_bool(0.5) {
        let k = r.random_range(2..n);
        let rule = if r.random_bool(0.5) { KeepRule::KeepLast } else { KeepRule::KeepFirstTwo };
        match BlockPartition::every_kth(n, k, rule) {
            Ok(p) => p,
            Err(_) => BlockPartition::every_kth(n, 2, KeepRule::KeepLast).unwrap(),
        }
    } else {
        let mut starts: Vec<usize> = (2..=n).filter(|_| r.random_bool(0.4)).collect();
        starts.insert(0, 1);
        if starts.len() < 2 {
            starts.push(n);
        }
        BlockPartition::new(starts, n).unwrap()
    };
    let m = part.n_blocks();
    let mut members: Vec<usize> = (1..=m).filter(|_| r.random_bool(0.5)).collect();
    members.shuffle(&mut r);
    let set = members.iter().copied().collect();
    (part, members, set)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tiling(seed in any::<u64>()) {
        let (part, _, _) = random_instance(seed);
        let flat: Vec<usize> = part.blocks().flatten().collect();
        prop_assert_eq!(flat, (1..=part.n_teacher_layers()).collect::<Vec<_>>());
        prop_assert_eq!(part.starts()[0], 1);
    }

    #[test]
    fn commutativity(seed in any::<u64>()) {
        let (part, members, set) = random_instance(seed);
        let n = part.n_teacher_layers();
        let t = tagged(&micro_config(n), 1, 100.0);
        let s = tagged(&micro_config(part.n_blocks()), 2, 0.0);
        let m = patch(&s, &t, &part, &set).unwrap();
        let mut reversed = members.clone();
        reversed.reverse();
        let other: PatchSet = reversed.iter().copied().collect();
        prop_assert!(params_identical(&m, &patch(&s, &t, &part, &other).unwrap()));
        let (st, tt) = (tags(&s), tags(&t));
        prop_assert_eq!(&tags(&m), &splice_oracle(&st, &tt, &part, &members));
        prop_assert_eq!(&tags(&m), &splice_oracle(&st, &tt, &part, &reversed));
    }

    #[test]
    fn size_monotone(seed in any::<u64>(), extra in any::<u64>()) {
        let (part, _, a) = random_instance(seed);
        let mut r = rng(extra);
        let mut b = a.clone();
        for i in 1..=part.n_blocks() {
            if r.random_bool(0.5) {
                b.insert(i);
            }
        }
        prop_assert!(a.is_subset(&b));
        let (sa, sb) = (part.patched_size(&a), part.patched_size(&b));
        prop_assert!(sa <= sb);
        prop_assert!(part.n_blocks() <= sa && sb <= part.n_teacher_layers());
        let want: usize = part.n_blocks() + a.iter().map(|i| part.block_len(i) - 1).sum::<usize>();
        prop_assert_eq!(sa, want);
    }
}
