//! Evaluation: accuracy, calibration, OOD separation, and adversarial
//! robustness. Everything here is read-only over the network (running-stat
//! batch norm) and deterministic given the attack seed.

use crate::error::{Error, Result};
use crate::data::LabeledDataset;
use crate::net::{BnMode, SplitNetwork};
use crate::rng::{stream_rng, stream};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// One prediction with its softmax confidence.
#[derive(Clone, Copy, Debug)]
pub struct ScoredPrediction {
    /// `max_y p(y|x)`; always in `[1/C, 1]` for a C-class softmax.
    pub confidence: f64,
    pub predicted: usize,
    pub truth: usize,
}

/// Scores every sample in eval mode.
pub fn score_predictions(
    net: &SplitNetwork,
    data: &LabeledDataset,
) -> Result<Vec<ScoredPrediction>> {
    let probs = net.probs_batch(data.inputs(), BnMode::EvalRunningStats)?;
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let row = probs.row(i);
        let (predicted, &confidence) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .expect("at least one class");
        out.push(ScoredPrediction {
            confidence,
            predicted,
            truth: data.labels()[i],
        });
    }
    Ok(out)
}

/// Fraction of argmax-correct predictions (eval-mode batch norm).
pub fn accuracy(net: &SplitNetwork, data: &LabeledDataset) -> Result<f64> {
    let preds = score_predictions(net, data)?;
    let correct = preds.iter().filter(|p| p.predicted == p.truth).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Bucket index (0-based) for a confidence under `buckets` equal-width
/// buckets: bucket m covers `((m-1)/M, m/M]`, with confidence 0 landing in
/// the first bucket.
fn bucket_of(confidence: f64, buckets: usize) -> usize {
    for m in 1..=buckets {
        let lo = (m - 1) as f64 / buckets as f64;
        let hi = m as f64 / buckets as f64;
        if (m == 1 || confidence > lo) && confidence <= hi {
            return m - 1;
        }
    }
    buckets - 1
}

/// Expected Calibration Error over equal-width confidence buckets:
/// `Σ_m (|B_m|/n) · |acc(B_m) − conf(B_m)|`, empty buckets contributing 0.
pub fn ece(preds: &[ScoredPrediction], buckets: usize) -> f64 {
    assert!(!preds.is_empty(), "ece needs at least one prediction");
    assert!(buckets >= 1);
    let mut count = vec![0usize; buckets];
    let mut hits = vec![0usize; buckets];
    let mut conf_sum = vec![0.0f64; buckets];
    for p in preds {
        let b = bucket_of(p.confidence, buckets);
        count[b] += 1;
        if p.predicted == p.truth {
            hits[b] += 1;
        }
        conf_sum[b] += p.confidence;
    }
    let n = preds.len() as f64;
    let mut total = 0.0;
    for b in 0..buckets {
        if count[b] == 0 {
            continue;
        }
        let acc = hits[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += (count[b] as f64 / n) * (acc - conf).abs();
    }
    total
}

/// Probability that a random in-distribution score exceeds a random
/// out-of-distribution score, ties counted ½ (the rank-sum statistic).
///
/// Internally counts pair outcomes in half-units as an exact integer, so
/// `auroc(a, b) + auroc(b, a) == 1.0` holds exactly, ties included.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> f64 {
    assert!(
        !scores_in.is_empty() && !scores_out.is_empty(),
        "auroc needs scores on both sides"
    );
    let mut si = scores_in.to_vec();
    let mut so = scores_out.to_vec();
    si.sort_by(f64::total_cmp);
    so.sort_by(f64::total_cmp);
    // For each in-score: 2·(#out below) + (#out equal), accumulated via two
    // monotone pointers over the sorted out-scores.
    let mut below = 0usize;
    let mut below_or_eq = 0usize;
    let mut half_units: u128 = 0;
    for &v in &si {
        while below < so.len() && so[below] < v {
            below += 1;
        }
        while below_or_eq < so.len() && so[below_or_eq] <= v {
            below_or_eq += 1;
        }
        half_units += (below + below_or_eq) as u128;
    }
    let total: u128 = 2 * si.len() as u128 * so.len() as u128;
    let complement = total - half_units;
    if half_units <= complement {
        half_units as f64 / total as f64
    } else {
        1.0 - complement as f64 / total as f64
    }
}

/// Score function for out-of-distribution detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OodScore {
    /// `log p(x)` up to the normalizer: the negated energy.
    LogDensity,
    /// `max_y p(y|x)`.
    MaxSoftmax,
}

impl OodScore {
    pub fn name(self) -> &'static str {
        match self {
            OodScore::LogDensity => "log-density",
            OodScore::MaxSoftmax => "max-softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "log-density" | "logdensity" | "energy" => Some(OodScore::LogDensity),
            "max-softmax" | "maxsoftmax" | "softmax" => Some(OodScore::MaxSoftmax),
            _ => None,
        }
    }
}

/// Per-sample OOD scores, higher meaning more in-distribution.
pub fn ood_scores(
    net: &SplitNetwork,
    data: &LabeledDataset,
    kind: OodScore,
) -> Result<Vec<f64>> {
    let scores = match kind {
        OodScore::LogDensity => {
            let energies = net.energy_batch(data.inputs(), BnMode::EvalRunningStats)?;
            energies.into_iter().map(|e| -e).collect::<Vec<f64>>()
        }
        OodScore::MaxSoftmax => score_predictions(net, data)?
            .into_iter()
            .map(|p| p.confidence)
            .collect(),
    };
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "ood scores",
        });
    }
    Ok(scores)
}

// ── adversarial robustness ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackNorm {
    Linf,
    L2,
}

impl AttackNorm {
    pub fn name(self) -> &'static str {
        match self {
            AttackNorm::Linf => "linf",
            AttackNorm::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linf" | "inf" => Some(AttackNorm::Linf),
            "l2" => Some(AttackNorm::L2),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    pub norm: AttackNorm,
    /// Ball radius around the clean input; 0 degenerates to the identity.
    pub radius: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            norm: AttackNorm::Linf,
            radius: 4.0 / 255.0,
            step_size: 1.0 / 255.0,
            steps: 40,
            random_start: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0) || !self.radius.is_finite() {
            return Err(Error::NonFinite {
                context: "attack radius",
            });
        }
        if !(self.step_size > 0.0) || self.steps == 0 {
            return Err(Error::NonFinite {
                context: "attack step",
            });
        }
        Ok(())
    }
}

fn l2_norm(delta: &[f64]) -> f64 {
    delta.iter().map(|d| d * d).sum::<f64>().sqrt()
}

/// Scales `delta` onto the L2 ball of `radius` and nudges down until the
/// constraint holds exactly in floating point.
fn project_l2(delta: &mut [f64], radius: f64) {
    let norm = l2_norm(delta);
    if norm <= radius {
        return;
    }
    let scale = radius / norm;
    for d in delta.iter_mut() {
        *d *= scale;
    }
    while l2_norm(delta) > radius {
        for d in delta.iter_mut() {
            *d *= 1.0 - 1e-15;
        }
    }
}

/// Projected gradient descent on the cross-entropy loss of one sample:
/// signed (Linf) or normalized (L2) gradient steps, each projected back
/// onto the radius ball and clipped to the `[-1, 1]` data domain. Both
/// projections shrink per-coordinate deltas, so the returned point
/// satisfies the ball constraint exactly.
pub fn pgd_attack(
    net: &SplitNetwork,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let d = x.len();
    let mut delta = vec![0.0f64; d];
    if cfg.random_start {
        match cfg.norm {
            AttackNorm::Linf => {
                for v in &mut delta {
                    *v = rng.random_range(-1.0..1.0) * cfg.radius;
                }
            }
            AttackNorm::L2 => {
                for v in &mut delta {
                    *v = rng.sample(rand_distr::StandardNormal);
                }
                let norm = l2_norm(&delta);
                if norm > 0.0 {
                    // Uniform in the ball: scale a sphere point by r·u^(1/d).
                    let u: f64 = rng.random_range(0.0..1.0);
                    let scale = cfg.radius * u.powf(1.0 / d as f64) / norm;
                    for v in &mut delta {
                        *v *= scale;
                    }
                }
                project_l2(&mut delta, cfg.radius);
            }
        }
    }

    let mut adv = x.clone();
    for (a, dv) in adv.data_mut().iter_mut().zip(&delta) {
        *a += dv;
    }
    clip_to_ball_and_domain(&mut adv, x, cfg);

    for _ in 0..cfg.steps {
        let batch = adv.unsqueezed();
        let (_, grad) = net.ce_loss_and_grad_input(&batch, &[y], BnMode::EvalRunningStats)?;
        let g = grad.data();
        match cfg.norm {
            AttackNorm::Linf => {
                for (a, gi) in adv.data_mut().iter_mut().zip(g) {
                    *a += cfg.step_size * sign(*gi);
                }
            }
            AttackNorm::L2 => {
                let norm = l2_norm(g);
                if norm > 0.0 {
                    for (a, gi) in adv.data_mut().iter_mut().zip(g) {
                        *a += cfg.step_size * gi / norm;
                    }
                }
            }
        }
        clip_to_ball_and_domain(&mut adv, x, cfg);
    }
    Ok(adv)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clip_to_ball_and_domain(adv: &mut Tensor, x: &Tensor, cfg: &AttackConfig) {
    match cfg.norm {
        AttackNorm::Linf => {
            for (a, &xi) in adv.data_mut().iter_mut().zip(x.data()) {
                let delta = (*a - xi).clamp(-cfg.radius, cfg.radius);
                *a = (xi + delta).clamp(-1.0, 1.0);
                // Writing `xi + delta` and reading the difference back can
                // round outward by an ulp (badly when `|xi| >> radius`), so
                // nudge toward `xi` until the recomputed delta passes. The
                // shrink doubles so it always clears the rounding grid of
                // `xi + delta` no matter how the scales compare.
                let mut shrink = 1e-15;
                while (*a - xi).abs() > cfg.radius {
                    *a = xi + (*a - xi) * (1.0 - shrink);
                    shrink *= 2.0;
                }
            }
        }
        AttackNorm::L2 => {
            let mut delta: Vec<f64> =
                adv.data().iter().zip(x.data()).map(|(a, xi)| a - xi).collect();
            project_l2(&mut delta, cfg.radius);
            for ((a, &xi), dv) in adv.data_mut().iter_mut().zip(x.data()).zip(&delta) {
                *a = (xi + dv).clamp(-1.0, 1.0);
            }
            // Same story in aggregate: the rewritten coordinates can push the
            // recomputed norm past the radius, so shrink until it passes.
            // Each pass only moves points toward `x`, which keeps them inside
            // the domain box.
            let mut shrink = 1e-15;
            loop {
                let mut back: Vec<f64> = adv
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(a, xi)| a - xi)
                    .collect();
                if l2_norm(&back) <= cfg.radius {
                    break;
                }
                for d in &mut back {
                    *d *= 1.0 - shrink;
                }
                for ((a, &xi), dv) in adv.data_mut().iter_mut().zip(x.data()).zip(&back) {
                    *a = xi + dv;
                }
                shrink *= 2.0;
            }
        }
    }
}

/// Accuracy on PGD-perturbed inputs. The attack rng derives from
/// `cfg.seed`, so results are reproducible sample by sample.
pub fn robust_accuracy(
    net: &SplitNetwork,
    data: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<f64> {
    let mut rng = stream_rng(cfg.seed, stream::ATTACK);
    let mut correct = 0usize;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        let adv = pgd_attack(net, &x, y, cfg, &mut rng)?;
        let logits = net.forward_logits(&adv, BnMode::EvalRunningStats)?;
        let pred = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(c, _)| c)
            .expect("at least one class");
        if pred == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
