//! Propagation cost of the samplers at a fixed position-update budget.
//!
//! Fifty updates cost plain SGLD fifty full forward+backward passes.
//! The two-level sampler at M=10, N=5 spends ten full passes plus fifty
//! first-layer-only ones, so its win is the body-to-first-layer cost
//! ratio. The network is desk-scale image-sized (784 → 256 → 256 → 10)
//! to give the body something to chew on.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use joule_core::net::mlp;
use joule_core::rng::{stream, stream_rng};
use joule_core::sampler::{run_chain, SamplerConfig, SamplerKind};
use joule_core::Tensor;

fn fifty_updates(c: &mut Criterion) {
    let mut rng = stream_rng(7, stream::PARAM_INIT);
    let net = mlp(784, &[256, 256], 10, true, &mut rng).unwrap();
    let x0 = Tensor::from_fn(&[784], |i| ((i * 37) % 101) as f64 / 50.0 - 1.0);
    let base = SamplerConfig {
        noise_scale: 0.01,
        seed: 3,
        ..SamplerConfig::default()
    };

    let mut group = c.benchmark_group("fifty-updates");
    let full = SamplerConfig {
        k_steps: 50,
        ..base.clone()
    };
    group.bench_function("sgld", |b| {
        b.iter(|| run_chain(&net, black_box(&x0), &full, SamplerKind::Sgld, false).unwrap())
    });
    group.bench_function("prox-sgld", |b| {
        b.iter(|| {
            run_chain(&net, black_box(&x0), &full, SamplerKind::ProximalSgld, false).unwrap()
        })
    });
    let split = SamplerConfig {
        m_steps: 10,
        n_steps: 5,
        ..base
    };
    group.bench_function("pyld-10x5", |b| {
        b.iter(|| run_chain(&net, black_box(&x0), &split, SamplerKind::Pyld, false).unwrap())
    });
    group.finish();
}

criterion_group!(benches, fifty_updates);
criterion_main!(benches);
