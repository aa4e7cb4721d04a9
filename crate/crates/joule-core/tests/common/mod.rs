//! Shared helpers for integration tests: finite-difference oracles, random
//! network generation, and the scalar losses the oracles differentiate.
//!
//! The finite-difference code deliberately goes through the *forward* path
//! only, so it is an independent check on every hand-written backward pass.

#![allow(dead_code)]

pub mod oracles;

use joule_core::net::{self, log_sum_exp, BnMode, Layer, SplitNetwork};
use joule_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// `|a - b| <= rtol * max(|a|, |b|) + atol`, the standard gradient-check
/// agreement test.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}

pub fn assert_all_close(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        assert!(
            close(a, n, rtol, atol),
            "{what}: coordinate {i}: analytic {a} vs finite-difference {n}"
        );
    }
}

/// Central finite differences of a scalar function of a tensor.
pub fn fd_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central finite differences of a scalar function of the network
/// parameters, flattened in parameter order.
pub fn fd_param_grad(
    net: &mut SplitNetwork,
    mut f: impl FnMut(&SplitNetwork) -> f64,
    h: f64,
) -> Vec<f64> {
    let n_tensors = net.params().len();
    let mut out = Vec::new();
    for ti in 0..n_tensors {
        let len = net.params()[ti].len();
        for j in 0..len {
            let orig = net.params()[ti].data()[j];
            net.params_mut()[ti].data_mut()[j] = orig + h;
            let fp = f(net);
            net.params_mut()[ti].data_mut()[j] = orig - h;
            let fm = f(net);
            net.params_mut()[ti].data_mut()[j] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
    }
    out
}

pub fn flatten_grads(grads: &joule_core::ParamGrads) -> Vec<f64> {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

/// Smallest |pre-activation| across all ReLU layers for a batch. Inputs
/// nearer a kink than the finite-difference step make the oracle invalid,
/// so test points keep a healthy margin.
pub fn relu_margin(net: &SplitNetwork, batch: &Tensor, mode: BnMode) -> f64 {
    let mut margin = f64::INFINITY;
    let mut cur = batch.clone();
    let mut layers: Vec<&Layer> = vec![net.first_layer()];
    layers.extend(net.body().iter());
    for layer in layers {
        if matches!(layer, Layer::Relu) {
            for &v in cur.data() {
                let a = v.abs();
                if a < margin {
                    margin = a;
                }
            }
        }
        let (next, _) = layer.forward(&cur, mode).expect("margin forward");
        cur = next;
    }
    margin
}

/// The joint objective the trainer descends, computed through forward
/// passes only: `mean CE(x_real) + mean E(x_real) - mean E(x_sampled)`.
pub fn joint_loss(
    net: &SplitNetwork,
    x_real: &Tensor,
    y_real: &[usize],
    x_sampled: &Tensor,
    mode: BnMode,
) -> f64 {
    let logits_r = net.forward_logits_batch(x_real, mode).expect("real forward");
    let logits_s = net
        .forward_logits_batch(x_sampled, mode)
        .expect("sampled forward");
    let b_r = logits_r.batch_len() as f64;
    let b_s = logits_s.batch_len() as f64;
    let mut loss = 0.0;
    for bi in 0..logits_r.batch_len() {
        let row = logits_r.row(bi);
        let lse = log_sum_exp(row);
        loss += (lse - row[y_real[bi]]) / b_r; // cross entropy
        loss += -lse / b_r; // + E(x_real)
    }
    for bi in 0..logits_s.batch_len() {
        loss -= -log_sum_exp(logits_s.row(bi)) / b_s; // - E(x_sampled)
    }
    loss
}

/// A catalogue of small architectures for randomized gradient checks.
pub fn random_net(case: usize, rng: &mut ChaCha12Rng) -> (SplitNetwork, Vec<usize>) {
    match case % 5 {
        0 => {
            // Linear model: first layer only, empty body.
            let d = 2 + rng.random_range(0..6);
            let net = net::mlp(d, &[], 2 + rng.random_range(0..3), false, rng).unwrap();
            (net, vec![d])
        }
        1 => {
            let d = 2 + rng.random_range(0..10);
            let h = 3 + rng.random_range(0..8);
            let net = net::mlp(d, &[h], 2, false, rng).unwrap();
            (net, vec![d])
        }
        2 => {
            let d = 2 + rng.random_range(0..6);
            let net = net::mlp(d, &[6, 5], 3, false, rng).unwrap();
            (net, vec![d])
        }
        3 => {
            let d = 2 + rng.random_range(0..6);
            let h = 4 + rng.random_range(0..5);
            let net = net::mlp(d, &[h, 4], 2, true, rng).unwrap();
            (net, vec![d])
        }
        _ => {
            // Tiny conv front end on a 1x3x3 image.
            let net = net::conv_net(&[1, 3, 3], 2, &[6], 2, true, rng).unwrap();
            (net, vec![1, 3, 3])
        }
    }
}

/// A random input batch with all ReLU pre-activations well away from their
/// kinks in the given mode, so central differences are trustworthy.
pub fn safe_batch(
    net: &SplitNetwork,
    shape: &[usize],
    batch: usize,
    mode: BnMode,
    rng: &mut ChaCha12Rng,
) -> Tensor {
    let mut full_shape = vec![batch];
    full_shape.extend_from_slice(shape);
    for _ in 0..200 {
        let x = Tensor::from_fn(&full_shape, |_| rng.random_range(-1.0..1.0));
        if relu_margin(net, &x, mode) > 1e-3 {
            return x;
        }
    }
    panic!("could not find a kink-safe batch in 200 draws");
}
