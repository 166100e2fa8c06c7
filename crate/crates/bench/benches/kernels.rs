//! Hot paths under the default experiment's shapes: net forward and
//! gradient, exact top-1 search over the fused gallery, fusion with
//! variance, and the binary file round-trip.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;
use std::hint::black_box;

use cmce_bench::{gallery_set, net, random_vector, rng, DIM};
use cmce_core::ensemble::{fuse_mean, variance, TransformedStack};
use cmce_core::evalproto::GalleryIndex;
use cmce_core::format::{read_embedding_set, write_embedding_set};
use cmce_core::transform::{
    loss_and_grad, ClassifierHead, FusionMode, PairBatch, TrainConfig,
};

fn forward(c: &mut Criterion) {
    let net = net(1);
    let mut rng = rng(2);
    let x: Vec<f64> = (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    c.bench_function("net_forward_64", |b| {
        b.iter(|| net.forward_raw(black_box(&x)).unwrap())
    });
}

fn gradient(c: &mut Criterion) {
    let nets = vec![net(3)];
    let head = ClassifierHead::init(150, DIM, 16.0, 4).unwrap();
    let mut rng = rng(5);
    let n = 64;
    let batch = PairBatch {
        gallery: vec![(0..n).map(|_| random_vector(&mut rng, DIM).values().to_vec()).collect()],
        query: (0..n).map(|_| random_vector(&mut rng, DIM).values().to_vec()).collect(),
        labels: (0..n).map(|i| i as u32 % 150).collect(),
    };
    let cfg = TrainConfig::default();
    c.bench_function("loss_and_grad_batch64", |b| {
        b.iter(|| {
            loss_and_grad(
                black_box(&nets),
                None,
                &head,
                &batch,
                &cfg,
                FusionMode::Independent,
            )
            .unwrap()
        })
    });
}

fn search(c: &mut Criterion) {
    let index = GalleryIndex::from_set(&gallery_set(6)).unwrap();
    let mut rng = rng(7);
    let query = random_vector(&mut rng, DIM);
    c.bench_function("search_top1_gallery800", |b| {
        b.iter(|| index.search_top1(black_box(&query)).unwrap())
    });
}

fn fuse(c: &mut Criterion) {
    let mut rng = rng(8);
    let members: Vec<_> = (0..4).map(|_| random_vector(&mut rng, DIM)).collect();
    let ids: Vec<String> = (0..4).map(|i| format!("m{i}")).collect();
    c.bench_function("fuse_and_variance_4members", |b| {
        b.iter(|| {
            let stack =
                TransformedStack::new(1, 2, black_box(members.clone()), ids.clone()).unwrap();
            let v = variance(&stack).unwrap();
            let fused = fuse_mean(&stack);
            (v, fused)
        })
    });
}

fn file_roundtrip(c: &mut Criterion) {
    let set = gallery_set(9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.cmce");
    c.bench_function("embedding_file_roundtrip_800x64", |b| {
        b.iter_batched(
            || path.clone(),
            |path| {
                write_embedding_set(&path, black_box(&set)).unwrap();
                read_embedding_set(&path).unwrap()
            },
            BatchSize::PerIteration,
        )
    });
}

criterion_group!(benches, forward, gradient, search, fuse, file_roundtrip);
criterion_main!(benches);
