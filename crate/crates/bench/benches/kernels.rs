use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mstd_core::graph::Graph;
use mstd_core::nn::MultiHeadSelfAttention;
use mstd_core::rng;
use mstd_core::zoo::{MaskNet, MaskNetConfig};
use mstd_core::Tensor;
use std::hint::black_box;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "bench/input");
    Tensor::uniform(shape, 1.0, &mut r)
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [16usize, 64, 256] {
        let a = random(&[64, n], 1);
        let b = random(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.variable(a.clone());
                let w = g.variable(b.clone());
                let y = g.matmul(x, w).unwrap();
                let l = g.sum_all(y);
                black_box(g.backward(l).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut r = rng::stream(0, "bench/mhsa");
    let att = MultiHeadSelfAttention::new("a", 12, 3, &mut r).unwrap();
    let x = random(&[64, 32, 12], 3);
    c.bench_function("mhsa_fwd_bwd_64x32x12", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = att.forward(&mut g, xv).unwrap();
            let l = g.sum_all(y);
            black_box(g.backward(l).unwrap());
        })
    });
}

fn masknet(c: &mut Criterion) {
    let mut group = c.benchmark_group("masknet_fwd_bwd");
    for d_m in [32usize, 64] {
        let mut r = rng::stream(0, "bench/masknet");
        let net = MaskNet::new("mn", MaskNetConfig::new(d_m, 12, 3).unwrap(), &mut r).unwrap();
        let z = random(&[64, d_m], 4);
        group.bench_with_input(BenchmarkId::from_parameter(d_m), &d_m, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let zv = g.input(z.clone());
                let y = net.forward(&mut g, zv).unwrap();
                let l = g.sum_all(y);
                black_box(g.backward(l).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, attention, masknet);
criterion_main!(benches);
