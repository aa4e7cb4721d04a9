//! Contract tests for the PGD attack: exact ball and domain constraints,
//! exact degenerate behavior at radius zero, a closed-form check on a linear
//! model, and monotone success in the radius.

mod common;

use common::rng;
use joule_core::data::{gaussian_blobs_2d, LabeledDataset};
use joule_core::eval::{accuracy, pgd_attack, robust_accuracy, AttackConfig, AttackNorm};
use joule_core::net::{mlp, BnMode};
use joule_core::rng::{stream, stream_rng};
use joule_core::tensor::Tensor;
use rand::Rng;

/// Same zero-preserving sign the attack uses.
fn step_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Same summation order as the library's norm, so `<=` comparisons agree.
fn l2(delta: &[f64]) -> f64 {
    delta.iter().map(|d| d * d).sum::<f64>().sqrt()
}

/// Inputs on the 1/256 grid: exactly representable, no negative zeros.
fn grid_input(r: &mut rand_chacha::ChaCha12Rng, d: usize, max_step: i64) -> Tensor {
    Tensor::from_fn(&[d], |_| r.random_range(-max_step..=max_step) as f64 / 256.0)
}

#[test]
fn linf_ball_and_domain_constraints_hold_exactly() {
    let mut r = rng(910);
    // The second scenario parks the input near the domain edge with a much
    // smaller radius, where writing `x + delta` rounds coarsely relative to
    // the ball.
    let scenarios = [(1.0, 0.3, 0.1), (0.001, 0.001, 0.0005)];
    for (case, &(spread, radius, step_size)) in (0..30).flat_map(|i| scenarios.iter().map(move |s| (i, s))) {
        let net = mlp(6, &[8], 3, false, &mut r).unwrap();
        let x = Tensor::from_fn(&[6], |_| {
            let base = if spread < 1.0 { 0.9 * step_sign(r.random_range(-1.0..1.0)) } else { 0.0 };
            base + r.random_range(-spread..spread)
        });
        let y = r.random_range(0..3);
        let cfg = AttackConfig {
            norm: AttackNorm::Linf,
            radius,
            step_size,
            steps: 12,
            random_start: true,
            seed: case as u64,
        };
        let mut arng = stream_rng(cfg.seed, stream::ATTACK);
        let adv = pgd_attack(&net, &x, y, &cfg, &mut arng).unwrap();
        for (a, xi) in adv.data().iter().zip(x.data()) {
            assert!(
                (a - xi).abs() <= radius,
                "case {case}: |{a} - {xi}| = {} > {radius}",
                (a - xi).abs()
            );
            assert!((-1.0..=1.0).contains(a), "case {case}: {a} out of domain");
        }
    }
}

#[test]
fn l2_ball_and_domain_constraints_hold_exactly() {
    let mut r = rng(920);
    let scenarios = [(1.0, 0.5, 0.2), (0.01, 1e-4, 5e-5)];
    for (case, &(spread, radius, step_size)) in (0..30).flat_map(|i| scenarios.iter().map(move |s| (i, s))) {
        let net = mlp(6, &[8], 3, false, &mut r).unwrap();
        let x = Tensor::from_fn(&[6], |_| {
            let base = if spread < 1.0 { 0.75 } else { 0.0 };
            base + r.random_range(-spread..spread)
        });
        let y = r.random_range(0..3);
        let cfg = AttackConfig {
            norm: AttackNorm::L2,
            radius,
            step_size,
            steps: 12,
            random_start: true,
            seed: case as u64,
        };
        let mut arng = stream_rng(cfg.seed, stream::ATTACK);
        let adv = pgd_attack(&net, &x, y, &cfg, &mut arng).unwrap();
        let delta: Vec<f64> = adv.data().iter().zip(x.data()).map(|(a, xi)| a - xi).collect();
        assert!(
            l2(&delta) <= radius,
            "case {case}: ||delta|| = {} > {radius}",
            l2(&delta)
        );
        for a in adv.data() {
            assert!((-1.0..=1.0).contains(a), "case {case}: {a} out of domain");
        }
    }
}

#[test]
fn radius_zero_is_the_bitwise_identity() {
    let mut r = rng(930);
    let net = mlp(2, &[4], 2, false, &mut r).unwrap();
    for norm in [AttackNorm::Linf, AttackNorm::L2] {
        for random_start in [false, true] {
            for case in 0..20 {
                let x = grid_input(&mut r, 2, 256); // includes the ±1 corners
                let y = r.random_range(0..2);
                let cfg = AttackConfig {
                    norm,
                    radius: 0.0,
                    step_size: 0.1,
                    steps: 5,
                    random_start,
                    seed: case,
                };
                let mut arng = stream_rng(cfg.seed, stream::ATTACK);
                let adv = pgd_attack(&net, &x, y, &cfg, &mut arng).unwrap();
                assert_eq!(adv.data(), x.data(), "{norm:?} random_start={random_start}");
            }
        }
    }
}

#[test]
fn radius_zero_robust_accuracy_equals_clean_accuracy() {
    let mut r = rng(940);
    let net = mlp(2, &[6], 2, false, &mut r).unwrap();
    let data = gaussian_blobs_2d(40, 2, 0.1, 17).unwrap();
    let cfg = AttackConfig {
        radius: 0.0,
        ..AttackConfig::default()
    };
    assert_eq!(
        robust_accuracy(&net, &data, &cfg).unwrap(),
        accuracy(&net, &data).unwrap()
    );
}

#[test]
fn one_linf_step_on_a_linear_model_matches_the_closed_form() {
    let mut r = rng(950);
    for case in 0..20 {
        let net = mlp(4, &[], 3, false, &mut r).unwrap();
        let x = grid_input(&mut r, 4, 120);
        let y = r.random_range(0..3);
        let cfg = AttackConfig {
            norm: AttackNorm::Linf,
            radius: 0.25,
            step_size: 0.25,
            steps: 1,
            random_start: false,
            seed: 0,
        };
        let mut arng = stream_rng(0, stream::ATTACK);
        let adv = pgd_attack(&net, &x, y, &cfg, &mut arng).unwrap();

        let (_, grad) = net
            .ce_loss_and_grad_input(&x.unsqueezed(), &[y], BnMode::EvalRunningStats)
            .unwrap();
        for i in 0..4 {
            let expected = x.data()[i] + 0.25 * step_sign(grad.data()[i]);
            assert_eq!(adv.data()[i], expected, "case {case} coordinate {i}");
        }
    }
}

#[test]
fn attack_success_is_monotone_in_the_radius() {
    // Linear two-class model: logits (x0, -x0). A sample with margin m on
    // the correct side is flipped by an Linf attack exactly when radius > m,
    // so robust accuracy is a step function of the radius we can predict.
    let mut r = rng(960);
    let mut net = mlp(2, &[], 2, false, &mut r).unwrap();
    {
        let params = net.params_mut();
        let mut it = params.into_iter();
        let w = it.next().unwrap();
        w.data_mut().copy_from_slice(&[1.0, 0.0, -1.0, 0.0]);
        let b = it.next().unwrap();
        b.data_mut().copy_from_slice(&[0.0, 0.0]);
    }

    let margins: Vec<f64> = (0..7).map(|i| 0.035 + 0.07 * i as f64).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for &m in &margins {
        rows.push(Tensor::from_vec(&[2], vec![m, 0.0]).unwrap());
        labels.push(0);
        rows.push(Tensor::from_vec(&[2], vec![-m, 0.0]).unwrap());
        labels.push(1);
    }
    let data = LabeledDataset::new(Tensor::stack(&rows).unwrap(), labels, 2).unwrap();
    assert_eq!(accuracy(&net, &data).unwrap(), 1.0);

    let radii = [0.05, 0.1, 0.2, 0.4];
    let mut accs = Vec::new();
    for &radius in &radii {
        let cfg = AttackConfig {
            norm: AttackNorm::Linf,
            radius,
            step_size: radius / 4.0,
            steps: 10,
            random_start: false,
            seed: 0,
        };
        let acc = robust_accuracy(&net, &data, &cfg).unwrap();
        let surviving = margins.iter().filter(|&&m| m > radius).count();
        assert_eq!(acc, (2 * surviving) as f64 / data.len() as f64, "radius {radius}");
        accs.push(acc);
    }
    for pair in accs.windows(2) {
        assert!(pair[1] <= pair[0], "robust accuracy rose with the radius: {accs:?}");
    }
    assert!(accs.last().unwrap() < accs.first().unwrap());
}

#[test]
fn attacks_reproduce_bit_for_bit_for_a_fixed_seed() {
    let mut r = rng(970);
    let net = mlp(3, &[6], 2, false, &mut r).unwrap();
    let x = Tensor::from_fn(&[3], |_| r.random_range(-0.8..0.8));
    let cfg = AttackConfig {
        norm: AttackNorm::L2,
        radius: 0.4,
        step_size: 0.1,
        steps: 15,
        random_start: true,
        seed: 7,
    };
    let mut rng_a = stream_rng(cfg.seed, stream::ATTACK);
    let mut rng_b = stream_rng(cfg.seed, stream::ATTACK);
    let a = pgd_attack(&net, &x, 1, &cfg, &mut rng_a).unwrap();
    let b = pgd_attack(&net, &x, 1, &cfg, &mut rng_b).unwrap();
    assert_eq!(a.data(), b.data());

    let data = gaussian_blobs_2d(20, 2, 0.1, 3).unwrap();
    let net2 = mlp(2, &[6], 2, false, &mut r).unwrap();
    let cfg2 = AttackConfig::default();
    assert_eq!(
        robust_accuracy(&net2, &data, &cfg2).unwrap(),
        robust_accuracy(&net2, &data, &cfg2).unwrap()
    );
}
