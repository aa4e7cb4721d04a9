//! Reduction oracles for the samplers on real networks: the two-level
//! sampler must collapse to the simpler ones in the limits where the
//! algorithms coincide, step by step.

mod common;

use common::*;
use joule_core::sampler::{
    chain_noise_rng, proximal_sgld_step, pyld_sample, sgld_step, ChainTrace, SamplerConfig,
};
use joule_core::tensor::Tensor;

#[test]
fn pyld_1_1_without_clamp_or_noise_is_an_sgld_step() {
    let mut r = rng(11);
    for case in 0..12 {
        let (net, shape) = random_net(case, &mut r);
        let x0 = safe_batch(&net, &shape, 1, joule_core::BnMode::EvalRunningStats, &mut r).sample(0);
        let cfg = SamplerConfig {
            alpha: 0.2,
            epsilon: f64::INFINITY,
            m_steps: 1,
            n_steps: 1,
            noise_scale: 0.0,
            ..SamplerConfig::default()
        };
        let mut rng_a = chain_noise_rng(0);
        let mut rng_b = chain_noise_rng(0);
        let mut trace = ChainTrace::new();
        let (via_pyld, t) = pyld_sample(&net, &x0, &cfg, &mut rng_a, false).unwrap();
        let (via_sgld, _) = sgld_step(&net, &x0, &cfg, &mut rng_b, &mut trace).unwrap();
        assert_eq!(t.full_propagations, 1);
        assert_eq!(t.first_layer_props, 1);
        for (i, (&a, &b)) in via_pyld.data().iter().zip(via_sgld.data()).enumerate() {
            assert!(
                (a - b).abs() <= 1e-12,
                "case {case}, coord {i}: pyld {a} vs sgld {b}"
            );
        }
    }
}

#[test]
fn pyld_m_1_tracks_m_proximal_steps_under_shared_noise() {
    let mut r = rng(22);
    for (case, m) in [(0usize, 1usize), (1, 5), (3, 20), (4, 5)] {
        let (net, shape) = random_net(case, &mut r);
        let x0 = safe_batch(&net, &shape, 1, joule_core::BnMode::EvalRunningStats, &mut r).sample(0);
        let cfg = SamplerConfig {
            alpha: 0.2,
            epsilon: 1.0,
            m_steps: m,
            n_steps: 1,
            noise_scale: 0.2,
            seed: 7,
            ..SamplerConfig::default()
        };
        let mut rng_a = chain_noise_rng(7);
        let mut rng_b = chain_noise_rng(7);
        let (via_pyld, trace) = pyld_sample(&net, &x0, &cfg, &mut rng_a, false).unwrap();
        let mut x = x0.clone();
        let mut t = ChainTrace::new();
        for _ in 0..m {
            x = proximal_sgld_step(&net, &x, &cfg, &mut rng_b, &mut t).unwrap().0;
        }
        assert_eq!(trace.full_propagations as usize, m);
        for (i, (&a, &b)) in via_pyld.data().iter().zip(x.data()).enumerate() {
            assert!(
                (a - b).abs() <= 1e-10,
                "case {case}, M={m}, coord {i}: pyld {a} vs prox {b}"
            );
        }
    }
}

#[test]
fn propagation_counts_scale_with_m_and_n() {
    let mut r = rng(33);
    let (net, shape) = random_net(1, &mut r);
    let x0 = safe_batch(&net, &shape, 1, joule_core::BnMode::EvalRunningStats, &mut r).sample(0);
    for m in [5usize, 10, 20] {
        for n in [5usize, 10, 20] {
            let cfg = SamplerConfig {
                m_steps: m,
                n_steps: n,
                ..SamplerConfig::default()
            };
            let mut rng_c = chain_noise_rng(1);
            let (_, trace) = pyld_sample(&net, &x0, &cfg, &mut rng_c, false).unwrap();
            assert_eq!(trace.full_propagations as usize, m);
            assert_eq!(trace.first_layer_props as usize, m * n);
        }
    }
}

#[test]
fn zero_network_with_noise_off_is_a_fixed_point() {
    // All-zero parameters give constant logits, so the energy gradient is
    // zero and a noiseless step returns the input unchanged.
    let mut r = rng(44);
    let (mut net, shape) = random_net(1, &mut r);
    for t in net.params_mut() {
        for v in t.data_mut() {
            *v = 0.0;
        }
    }
    let mut full = vec![1usize];
    full.extend_from_slice(&shape);
    let x0 = Tensor::from_fn(&full, |i| (i as f64 * 0.37).sin()).sample(0);
    let cfg = SamplerConfig {
        noise_scale: 0.0,
        ..SamplerConfig::default()
    };
    let mut rng_c = chain_noise_rng(2);
    let mut trace = ChainTrace::new();
    let (x1, _) = sgld_step(&net, &x0, &cfg, &mut rng_c, &mut trace).unwrap();
    assert_eq!(x1, x0);
}
