use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

use tcens_bench::{gaussian_matrix, pixel_batch};
use tcens_core::indomain::LofIndex;
use tcens_core::losses::{compute_center, msic_loss};
use tcens_core::{Activation, DenseNet, Rng};

fn lof(c: &mut Criterion) {
    let mut group = c.benchmark_group("lof");
    for n in [1_000, 4_000] {
        let train = gaussian_matrix(n, 128, 1);
        let queries = gaussian_matrix(256, 128, 2);
        group.bench_with_input(BenchmarkId::new("fit", n), &train, |b, t| {
            b.iter(|| LofIndex::fit(black_box(t.view()), 20).unwrap())
        });
        let index = LofIndex::fit(train.view(), 20).unwrap();
        group.bench_with_input(BenchmarkId::new("query_256", n), &queries, |b, q| {
            b.iter(|| index.score_batch(black_box(q.view())).unwrap())
        });
    }
    group.finish();
}

fn net(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let expert = DenseNet::new(&[784, 400, 400, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
    let x = pixel_batch(128, 4);
    c.bench_function("expert_forward_128", |b| b.iter(|| expert.predict(black_box(x.view())).unwrap()));
    c.bench_function("expert_forward_backward_128", |b| {
        b.iter(|| {
            let (out, cache) = expert.forward(x.view()).unwrap();
            expert.backward(&cache, out.view()).unwrap()
        })
    });
}

fn msic(c: &mut Criterion) {
    // 15 pairs, interleaved rows.
    let emb: Array2<f64> = gaussian_matrix(30, 128, 5);
    let center = compute_center(emb.view()).unwrap();
    c.bench_function("msic_15_pairs_d128", |b| {
        b.iter(|| msic_loss(black_box(emb.view()), &center, 0.25).unwrap())
    });
}

criterion_group!(benches, lof, net, msic);
criterion_main!(benches);
