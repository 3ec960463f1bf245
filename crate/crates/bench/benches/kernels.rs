use aqgt_bench::random_tensor;
use aqgt_core::config::SeqConfig;
use aqgt_core::numerics::Bound;
use aqgt_core::quantize::nearest_indices;
use aqgt_core::seqmodel::{GruLayer, TransformerBlock};
use aqgt_core::{ParamStore, Tape};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let (a, b) = (random_tensor(&[64, 128], 1), random_tensor(&[128, 64], 2));
    c.bench_function("matmul_64x128x64", |bench| {
        bench.iter(|| {
            let tape = Tape::inference();
            black_box(
                tape.constant(a.clone())
                    .matmul(tape.constant(b.clone()))
                    .unwrap()
                    .value(),
            )
        })
    });
}

fn nearest(c: &mut Criterion) {
    let (entries, queries) = (random_tensor(&[512, 32], 3), random_tensor(&[1024, 32], 4));
    c.bench_function("nearest_512x32_1024q", |bench| {
        bench.iter(|| black_box(nearest_indices(&entries, &queries).unwrap()))
    });
}

fn gru(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = GruLayer::new(&mut store, "gru", 96, 96, &mut rng);
    let x = random_tensor(&[16, 34, 96], 6);
    c.bench_function("gru_run_16x34x96", |bench| {
        bench.iter(|| {
            let tape = Tape::inference();
            let p = Bound::frozen(&tape, &store);
            black_box(layer.run(&p, tape.constant(x.clone())).unwrap().value())
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let block = TransformerBlock::new(&mut store, "tb", 96, &SeqConfig::default(), &mut rng);
    let x = random_tensor(&[16, 34, 96], 8);
    c.bench_function("transformer_block_16x34x96", |bench| {
        bench.iter(|| {
            let tape = Tape::inference();
            let p = Bound::frozen(&tape, &store);
            black_box(block.forward(&p, tape.constant(x.clone())).unwrap().value())
        })
    });
}

criterion_group!(kernels, matmul, nearest, gru, attention);
criterion_main!(kernels);
