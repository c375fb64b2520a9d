use std::hint::black_box;

use cbamnet::cbam::{refine, ChannelAttentionParams, SpatialAttentionParams};
use cbamnet::model::{build_model, BackboneConfig};
use cbamnet::Graph;
use cbamnet_bench::{image_batch, uniform};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv2d(c: &mut Criterion) {
    let x = uniform(&[16, 32, 32], 1);
    let k = uniform(&[16, 16, 3, 3], 2);
    let b = uniform(&[16], 3);
    c.bench_function("conv2d 16x32x32 k3 forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, kv, bv) = (g.input(x.clone()), g.input(k.clone()), g.input(b.clone()));
            black_box(g.conv2d(xv, kv, bv, 1, 1).unwrap());
        })
    });
    c.bench_function("conv2d 16x32x32 k3 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, kv, bv) = (g.param(x.clone()), g.param(k.clone()), g.param(b.clone()));
            let y = g.conv2d(xv, kv, bv, 1, 1).unwrap();
            let loss = g.sum(y).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn cbam(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = uniform(&[16, 14, 14], 5);
    let cp = ChannelAttentionParams::init(16, 8, &mut rng).unwrap();
    let sp = SpatialAttentionParams::init(&mut rng).unwrap();
    c.bench_function("cbam refine 16x14x14", |bench| bench.iter(|| black_box(refine(&f, &cp, &sp).unwrap())));
}

fn model(c: &mut Criterion) {
    let model = build_model(&BackboneConfig::four_block(32, 32), 8, 6).unwrap();
    let (batch, labels) = image_batch(8, 32, 7);
    c.bench_function("four-block model forward, batch 8", |bench| {
        bench.iter(|| black_box(model.forward(&batch).unwrap()))
    });
    c.bench_function("four-block model forward+backward, batch 8", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let vars = model.register(&mut g, true);
            let probs = model.record_batch(&mut g, &vars, &batch).unwrap();
            let loss = g.bce(probs, &labels).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

criterion_group!(benches, conv2d, cbam, model);
criterion_main!(benches);
