use std::hint::black_box;

use boomerang::distill::{record_total_loss, LossWeights, TeacherSignal};
use boomerang::kernels::{attention_forward, AttnShape};
use boomerang::model::{bind, forward_batch, init_random};
use boomerang::surgery::{init_student, patch, BlockPartition, KeepRule, PatchSet};
use boomerang::{Graph, ModelConfig, ParameterSet, Tensor};
use criterion::{criterion_group, criterion_main, Criterion, Throughput};

fn filled(shape: &[usize], salt: u32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n as u32)
        .map(|i| ((i.wrapping_mul(2654435761).wrapping_add(salt) >> 8) as f32 / (1u32 << 24) as f32) - 0.5)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn tokens(n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|i| ((i * 7919 + 13) % vocab) as u32).collect()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for (m, k, n) in [(256, 128, 512), (2048, 128, 128), (2048, 128, 259)] {
        let (a, b) = (filled(&[m, k], 1), filled(&[k, n], 2));
        g.throughput(Throughput::Elements((2 * m * k * n) as u64));
        g.bench_function(format!("{m}x{k}x{n}"), |bch| bch.iter(|| black_box(a.matmul(&b).unwrap())));
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let s = AttnShape {
        batch: 8,
        seq: 256,
        heads: 4,
        d_model: 128,
    };
    let n = s.batch * s.seq * s.d_model;
    let (q, k, v) = (filled(&[n], 3), filled(&[n], 4), filled(&[n], 5));
    let mut out = vec![0.0f32; n];
    let mut probs = vec![0.0f32; s.batch * s.heads * s.seq * s.seq];
    c.bench_function("attention_forward/8x256x128", |b| {
        b.iter(|| attention_forward(q.data(), k.data(), v.data(), &s, &mut out, &mut probs))
    });
}

fn models() -> (ParameterSet<f32>, ParameterSet<f32>, BlockPartition) {
    let cfg = ModelConfig::default();
    let teacher = init_random(&cfg, 1).unwrap();
    let part = BlockPartition::every_kth(cfg.n_layers, 2, KeepRule::KeepLast).unwrap();
    let student = init_student(&teacher, &part).unwrap();
    (teacher, student, part)
}

fn model(c: &mut Criterion) {
    let (teacher, student, part) = models();
    let (batch, seq) = (8, 256);
    let inputs = tokens(batch * seq, teacher.config.vocab_size);
    let targets = tokens(batch * seq + 1, teacher.config.vocab_size)[1..].to_vec();
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.throughput(Throughput::Elements((batch * seq) as u64));
    g.bench_function("teacher_forward", |b| {
        b.iter(|| black_box(forward_batch(&teacher, &inputs, batch, seq).unwrap()))
    });
    let signal = TeacherSignal::compute(&teacher, &inputs, batch, seq).unwrap();
    let weights = LossWeights::for_student(part.n_blocks());
    g.bench_function("student_loss_and_backward", |b| {
        b.iter(|| {
            let mut graph = Graph::new();
            let bound = bind(&mut graph, &student, true);
            let loss = record_total_loss(
                &mut graph,
                &student.config,
                &bound,
                &inputs,
                &targets,
                batch,
                seq,
                Some((&signal, &part)),
                &weights,
            )
            .unwrap();
            graph.backward(loss.total).unwrap();
            black_box(graph)
        })
    });
    g.bench_function("patch_full", |b| {
        let full = PatchSet::full(part.n_blocks());
        b.iter(|| black_box(patch(&student, &teacher, &part, &full).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, matmul, attention, model);
criterion_main!(benches);
