//! The joint training loop: classify real batches, sample negative batches
//! with Langevin chains seeded from the replay buffer, and descend the
//! combined cross-entropy + energy-difference objective.
//!
//! Divergence is a normal operating condition here, not an exception:
//! chains that blow up get their batch skipped, and a long enough run of
//! skipped batches aborts the run with the model left at its last good
//! state.

use crate::buffer::ReplayBuffer;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::init::InformativeInit;
use crate::net::{BnMode, ParamGrads, SplitNetwork};
use crate::rng::{stream_rng, stream};
use crate::sampler::{run_chain, SamplerConfig, SamplerKind};
use crate::tensor::Tensor;
use rand::Rng;
use std::io::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "sgd-momentum" | "momentum" => Some(OptimizerKind::SgdMomentum),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate. Zero is allowed and makes the run a dry pass
    /// that still samples, guards, and reports.
    pub lr: f64,
    /// Multiplier applied at each decay epoch.
    pub lr_decay: f64,
    /// Absolute epochs (1-based) at which the rate decays; strictly
    /// increasing.
    pub decay_epochs: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// L2 penalty folded into every parameter gradient as `wd·θ` before
    /// the optimizer step; zero (the default) disables it. Nonzero decay
    /// caps the logit scale, which in turn caps how steep the energy
    /// surface can get — the lever that keeps negative-sample chains from
    /// outrunning the gradient clamp on easy low-dimensional data.
    pub weight_decay: f64,
    pub sampler: SamplerConfig,
    pub sampler_kind: SamplerKind,
    /// Buffer reinitialization probability; consumed when building the
    /// buffer, recorded here so one config describes the whole run.
    pub rho: f64,
    pub buffer_capacity: usize,
    /// Skip a batch when any chain state coordinate exceeds this bound
    /// (default 10× the data domain radius of 1).
    pub state_bound: f64,
    /// Abort after this many consecutive skipped batches.
    pub max_consecutive_skips: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epochs = 200;
        TrainConfig {
            epochs,
            batch_size: 64,
            lr: 0.1,
            lr_decay: 0.2,
            decay_epochs: scaled_decay_epochs(epochs),
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            weight_decay: 0.0,
            sampler: SamplerConfig::default(),
            sampler_kind: SamplerKind::Pyld,
            rho: crate::buffer::DEFAULT_RHO,
            buffer_capacity: crate::buffer::DEFAULT_CAPACITY,
            state_bound: 10.0,
            max_consecutive_skips: 50,
            seed: 0,
        }
    }
}

/// The reference schedule decays at 1/3, 2/3, and 5/6 of the run; this
/// scales those points to any epoch budget.
pub fn scaled_decay_epochs(epochs: usize) -> Vec<usize> {
    vec![epochs / 3, 2 * epochs / 3, 5 * epochs / 6]
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::NonFinite {
                context: "learning rate",
            });
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::NonFinite {
                context: "learning rate decay",
            });
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::NonFinite {
                context: "decay epochs must be strictly increasing",
            });
        }
        if self.batch_size == 0 {
            return Err(Error::EmptyDataset);
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::NonFinite {
                context: "momentum",
            });
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::NonFinite {
                context: "weight decay",
            });
        }
        if !(self.state_bound > 0.0) {
            return Err(Error::NonFinite {
                context: "state bound",
            });
        }
        if self.max_consecutive_skips == 0 {
            return Err(Error::NonFinite {
                context: "consecutive skip budget",
            });
        }
        self.sampler.validate()
    }
}

/// Learning rate in effect at a (1-based) epoch: the base rate decayed once
/// per schedule point already reached.
pub fn effective_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.lr * cfg.lr_decay.powi(k as i32)
}

// ── optimizer ────────────────────────────────────────────────────────────

pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    velocity: Option<ParamGrads>,
    adam_m: Option<ParamGrads>,
    adam_v: Option<ParamGrads>,
    adam_t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            velocity: None,
            adam_m: None,
            adam_v: None,
            adam_t: 0,
        }
    }

    pub fn step(&mut self, net: &mut SplitNetwork, grads: &ParamGrads, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in net.params_mut().into_iter().zip(grads.tensors()) {
                    p.add_scaled(g, -lr);
                }
            }
            OptimizerKind::SgdMomentum => {
                let vel = self
                    .velocity
                    .get_or_insert_with(|| ParamGrads::zeros_like(net));
                vel.scale(self.momentum);
                vel.add_scaled(grads, 1.0);
                for (p, v) in net.params_mut().into_iter().zip(vel.tensors()) {
                    p.add_scaled(v, -lr);
                }
            }
            OptimizerKind::Adam => {
                let m = self.adam_m.get_or_insert_with(|| ParamGrads::zeros_like(net));
                m.scale(ADAM_BETA1);
                m.add_scaled(grads, 1.0 - ADAM_BETA1);
                let v = self.adam_v.get_or_insert_with(|| ParamGrads::zeros_like(net));
                v.scale(ADAM_BETA2);
                for (vt, g) in v.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (vi, gi) in vt.data_mut().iter_mut().zip(g.data()) {
                        *vi += (1.0 - ADAM_BETA2) * gi * gi;
                    }
                }
                self.adam_t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.adam_t);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.adam_t);
                let m = self.adam_m.as_ref().expect("initialized above");
                let v = self.adam_v.as_ref().expect("initialized above");
                for ((p, mt), vt) in net
                    .params_mut()
                    .into_iter()
                    .zip(m.tensors())
                    .zip(v.tensors())
                {
                    for ((pi, mi), vi) in
                        p.data_mut().iter_mut().zip(mt.data()).zip(vt.data())
                    {
                        let mhat = mi / bc1;
                        let vhat = vi / bc2;
                        *pi -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

// ── divergence handling ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuardDecision {
    Continue,
    SkipBatch,
    Abort,
}

/// Tracks skipped batches and decides when the run is unrecoverable.
pub struct DivergenceGuard {
    state_bound: f64,
    max_consecutive_skips: usize,
    consecutive: usize,
    total: u64,
}

impl DivergenceGuard {
    pub fn new(state_bound: f64, max_consecutive_skips: usize) -> Self {
        DivergenceGuard {
            state_bound,
            max_consecutive_skips,
            consecutive: 0,
            total: 0,
        }
    }

    /// Whether a sampled batch is usable: finite energies, finite states,
    /// every coordinate within the state bound.
    pub fn batch_ok(&self, energies: &[f64], states: &Tensor) -> bool {
        energies.iter().all(|e| e.is_finite())
            && states.is_finite()
            && states.max_abs() <= self.state_bound
    }

    /// Feeds one batch outcome; a skip is counted on every `false`.
    pub fn observe(&mut self, ok: bool) -> GuardDecision {
        if ok {
            self.consecutive = 0;
            GuardDecision::Continue
        } else {
            self.consecutive += 1;
            self.total += 1;
            if self.consecutive >= self.max_consecutive_skips {
                GuardDecision::Abort
            } else {
                GuardDecision::SkipBatch
            }
        }
    }

    pub fn divergence_count(&self) -> u64 {
        self.total
    }
}

// ── metrics ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_acc: f64,
    pub eval_acc: f64,
    /// Mean over the epoch's applied batches of the real-batch energy
    /// (train-mode forward, the same pass the gradient used). NaN if every
    /// batch was skipped.
    pub mean_real_energy: f64,
    pub mean_sample_energy: f64,
    /// `mean_real_energy - mean_sample_energy`.
    pub energy_gap: f64,
    /// Mean L2 norm of the applied parameter updates' gradients.
    pub grad_norm: f64,
    /// Cumulative skipped batches since training started.
    pub divergence_count: u64,
    /// Cumulative full network propagations spent by the sampler.
    pub full_propagations_cumulative: u64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,train_acc,eval_acc,mean_real_energy,mean_sample_energy,energy_gap,grad_norm,divergence_count,full_propagations_cumulative";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_acc,
            self.eval_acc,
            self.mean_real_energy,
            self.mean_sample_energy,
            self.energy_gap,
            self.grad_norm,
            self.divergence_count,
            self.full_propagations_cumulative
        )
    }
}

/// Writes the full metrics table with LF newlines.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

// ── the loop ─────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRecord>,
    /// True when the consecutive-skip budget was exhausted; the network is
    /// left at its last applied update.
    pub aborted: bool,
    pub divergence_count: u64,
    pub full_propagations: u64,
    pub first_layer_props: u64,
}

/// Scalar value of the training objective on one batch pair: mean
/// cross-entropy and the energy gap `mean E(real) − mean E(sampled)`. The
/// trainer's objective is their sum; the analytic gradient of that sum is
/// what `param_grad_joint` returns.
pub fn loss_value(
    net: &SplitNetwork,
    x_real: &Tensor,
    y_real: &[usize],
    x_sampled: &Tensor,
    mode: BnMode,
) -> Result<(f64, f64)> {
    let (losses, _) = net.ce_loss_and_grad_input(x_real, y_real, mode)?;
    let ce = losses.iter().sum::<f64>() / losses.len() as f64;
    let er = net.energy_batch(x_real, mode)?;
    let es = net.energy_batch(x_sampled, mode)?;
    let mean_er = er.iter().sum::<f64>() / er.len() as f64;
    let mean_es = es.iter().sum::<f64>() / es.len() as f64;
    let gap = mean_er - mean_es;
    if !ce.is_finite() || !gap.is_finite() {
        return Err(Error::NonFinite {
            context: "loss value",
        });
    }
    Ok((ce, gap))
}

/// Runs the full training loop. `on_epoch` fires after every completed
/// epoch with the freshly updated network, buffer, and metrics record —
/// the place to append CSV rows and write periodic checkpoints.
pub fn train(
    net: &mut SplitNetwork,
    train_data: &LabeledDataset,
    eval_data: &LabeledDataset,
    init: &InformativeInit,
    buf: &mut ReplayBuffer,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&SplitNetwork, &ReplayBuffer, &MetricsRecord) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_data.input_shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            context: "training data vs network input",
            expected: net.input_shape().to_vec(),
            got: train_data.input_shape().to_vec(),
        });
    }
    if init.input_shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            context: "initializer vs network input",
            expected: net.input_shape().to_vec(),
            got: init.input_shape().to_vec(),
        });
    }

    // A cold buffer would make the first batch's finals the only states
    // later draws can revive, so one badly mixed batch would poison every
    // chain start after it. Stocking the pool up front means early finals
    // displace a few slots at a time while the energy surface is still
    // forming around them.
    if buf.is_empty() {
        buf.fill_from(init)?;
    }

    let mut shuffle_rng = stream_rng(cfg.seed, stream::SHUFFLE);
    let mut chain_seed_rng = stream_rng(cfg.seed, stream::CHAIN_NOISE);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.momentum);
    let mut guard = DivergenceGuard::new(cfg.state_bound, cfg.max_consecutive_skips);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut full_props: u64 = 0;
    let mut first_props: u64 = 0;
    let mut aborted = false;
    let n = train_data.len();

    'epochs: for epoch in 1..=cfg.epochs {
        let lr = effective_lr(cfg, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut applied = 0usize;
        let mut sum_real_e = 0.0;
        let mut sum_samp_e = 0.0;
        let mut sum_gnorm = 0.0;

        for idx in order.chunks(cfg.batch_size) {
            let batch = train_data.subset(idx)?;
            let mut ok = true;

            // Negative-sample chains, one independent noise stream each.
            let starts = buf.draw(init, idx.len())?;
            let mut finals = Vec::with_capacity(idx.len());
            for (x0, _origin) in &starts {
                let mut chain_cfg = cfg.sampler.clone();
                chain_cfg.seed = chain_seed_rng.random();
                match run_chain(net, x0, &chain_cfg, cfg.sampler_kind, false) {
                    Ok((xm, trace)) => {
                        full_props += trace.full_propagations;
                        first_props += trace.first_layer_props;
                        finals.push(xm);
                    }
                    Err(Error::ChainDiverged { trace, .. }) => {
                        full_props += trace.full_propagations;
                        first_props += trace.first_layer_props;
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }

            if ok {
                let sampled = Tensor::stack(&finals)?;
                let energies = net.energy_batch(&sampled, BnMode::EvalRunningStats)?;
                ok = guard.batch_ok(&energies, &sampled);
                if ok {
                    let mut grads = net.param_grad_joint(
                        batch.inputs(),
                        batch.labels(),
                        &sampled,
                        BnMode::TrainBatchStats,
                    )?;
                    if cfg.weight_decay > 0.0 {
                        // Every parameter, batch-norm scale included: the
                        // norm's affine pair is as much a margin amplifier
                        // as any weight matrix, and exempting it just moves
                        // the logit growth there.
                        for (g, p) in
                            grads.total.tensors_mut().into_iter().zip(net.params())
                        {
                            g.add_scaled(p, cfg.weight_decay);
                        }
                    }
                    if grads.total.is_finite() {
                        net.update_bn_running_stats(&grads.real_cache);
                        optimizer.step(net, &grads.total, lr);
                        buf.push(&finals)?;
                        applied += 1;
                        sum_real_e += grads.real_energy;
                        sum_samp_e += grads.sampled_energy;
                        sum_gnorm += grads.total.sq_norm().sqrt();
                    } else {
                        ok = false;
                    }
                }
            }

            match guard.observe(ok) {
                GuardDecision::Continue | GuardDecision::SkipBatch => {}
                GuardDecision::Abort => {
                    aborted = true;
                    break 'epochs;
                }
            }
        }

        // Buffer hygiene: nothing non-finite may survive an epoch.
        for slot in buf.slots() {
            if !slot.is_finite() {
                return Err(Error::NonFinite {
                    context: "replay buffer after epoch",
                });
            }
        }

        let denom = applied as f64;
        let mean_real_energy = if applied > 0 { sum_real_e / denom } else { f64::NAN };
        let mean_sample_energy = if applied > 0 { sum_samp_e / denom } else { f64::NAN };
        let record = MetricsRecord {
            epoch,
            train_acc: accuracy(net, train_data)?,
            eval_acc: accuracy(net, eval_data)?,
            mean_real_energy,
            mean_sample_energy,
            energy_gap: mean_real_energy - mean_sample_energy,
            grad_norm: if applied > 0 { sum_gnorm / denom } else { f64::NAN },
            divergence_count: guard.divergence_count(),
            full_propagations_cumulative: full_props,
        };
        on_epoch(net, buf, &record)?;
        metrics.push(record);
    }

    Ok(TrainReport {
        metrics,
        aborted,
        divergence_count: guard.divergence_count(),
        full_propagations: full_props,
        first_layer_props: first_props,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_blobs_2d;
    use crate::init::FitOptions;
    use crate::net::mlp;

    fn tiny_setup(
        seed: u64,
    ) -> (SplitNetwork, LabeledDataset, LabeledDataset, InformativeInit) {
        let data = gaussian_blobs_2d(64, 2, 0.08, seed).unwrap();
        let (train, eval) = data.split(16, seed).unwrap();
        let mut rng = stream_rng(seed, stream::PARAM_INIT);
        let net = mlp(2, &[8], 2, true, &mut rng).unwrap();
        let mut fit = stream_rng(seed, stream::INIT_FIT);
        let init = InformativeInit::fit(&train, &FitOptions::default(), &mut fit).unwrap();
        (net, train, eval, init)
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            decay_epochs: vec![2],
            sampler: SamplerConfig {
                k_steps: 4,
                m_steps: 2,
                n_steps: 2,
                ..SamplerConfig::default()
            },
            buffer_capacity: 64,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_counts_past_decay_epochs() {
        let cfg = TrainConfig {
            lr: 0.1,
            lr_decay: 0.2,
            decay_epochs: vec![3, 5],
            ..TrainConfig::default()
        };
        assert_eq!(effective_lr(&cfg, 1), 0.1);
        assert_eq!(effective_lr(&cfg, 2), 0.1);
        assert_eq!(effective_lr(&cfg, 3), 0.1 * 0.2);
        assert_eq!(effective_lr(&cfg, 4), 0.1 * 0.2);
        assert_eq!(effective_lr(&cfg, 5), 0.1 * 0.2 * 0.2);
        assert_eq!(effective_lr(&cfg, 99), 0.1 * 0.2 * 0.2);
    }

    #[test]
    fn decay_points_scale_with_the_epoch_budget() {
        assert_eq!(scaled_decay_epochs(150), vec![50, 100, 125]);
        assert_eq!(scaled_decay_epochs(200), vec![66, 133, 166]);
    }

    #[test]
    fn guard_skips_then_aborts_after_consecutive_failures() {
        let mut guard = DivergenceGuard::new(10.0, 3);
        assert_eq!(guard.observe(true), GuardDecision::Continue);
        assert_eq!(guard.observe(false), GuardDecision::SkipBatch);
        assert_eq!(guard.observe(false), GuardDecision::SkipBatch);
        // A good batch resets the consecutive counter but not the total.
        assert_eq!(guard.observe(true), GuardDecision::Continue);
        assert_eq!(guard.divergence_count(), 2);
        assert_eq!(guard.observe(false), GuardDecision::SkipBatch);
        assert_eq!(guard.observe(false), GuardDecision::SkipBatch);
        assert_eq!(guard.observe(false), GuardDecision::Abort);
        assert_eq!(guard.divergence_count(), 5);
    }

    #[test]
    fn guard_flags_non_finite_energy_and_outsized_states() {
        let guard = DivergenceGuard::new(10.0, 3);
        let good = Tensor::filled(&[2, 2], 1.0);
        assert!(guard.batch_ok(&[0.0, -1.0], &good));
        assert!(!guard.batch_ok(&[0.0, f64::NAN], &good));
        let big = Tensor::filled(&[2, 2], 10.5);
        assert!(!guard.batch_ok(&[0.0, -1.0], &big));
    }

    #[test]
    fn identical_batches_have_exactly_zero_gap() {
        let mut rng = stream_rng(1, stream::PARAM_INIT);
        let net = mlp(3, &[5], 2, false, &mut rng).unwrap();
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64).sin());
        let (_, gap) = loss_value(&net, &x, &[0, 1, 0, 1], &x, BnMode::EvalRunningStats).unwrap();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn saturated_logits_give_zero_cross_entropy() {
        // A linear model whose bias sends the true class to +50: softmax
        // probability is 1 up to f64 resolution, so CE underflows to 0.
        let mut rng = stream_rng(2, stream::PARAM_INIT);
        let mut net = mlp(2, &[], 2, false, &mut rng).unwrap();
        for p in net.params_mut() {
            for v in p.data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        // Second parameter tensor is the bias of the only layer.
        net.params_mut()[1].data_mut()[0] = 50.0;
        net.params_mut()[1].data_mut()[1] = -50.0;
        let x = Tensor::zeros(&[3, 2]);
        let (ce, _) = loss_value(&net, &x, &[0, 0, 0], &x, BnMode::EvalRunningStats).unwrap();
        assert_eq!(ce, 0.0);
    }

    #[test]
    fn zero_lr_epoch_reports_metrics_without_touching_parameters() {
        let (mut net, train_data, eval_data, init) = tiny_setup(7);
        let before: Vec<Tensor> = net.params().into_iter().cloned().collect();
        let mut cfg = tiny_config(7);
        cfg.epochs = 1;
        cfg.lr = 0.0;
        let mut buf = ReplayBuffer::new(cfg.buffer_capacity, cfg.rho, cfg.seed).unwrap();
        let report = train(
            &mut net,
            &train_data,
            &eval_data,
            &init,
            &mut buf,
            &cfg,
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert!(!report.aborted);
        assert_eq!(report.metrics.len(), 1);
        let after: Vec<&Tensor> = net.params();
        for (b, a) in before.iter().zip(after) {
            assert_eq!(b.data(), a.data(), "zero lr must not move parameters");
        }
        // Chains still ran and the buffer was stocked.
        assert!(buf.is_full());
        assert!(report.full_propagations > 0);
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical() {
        let run = || {
            let (mut net, train_data, eval_data, init) = tiny_setup(9);
            let cfg = tiny_config(9);
            let mut buf = ReplayBuffer::new(cfg.buffer_capacity, cfg.rho, cfg.seed).unwrap();
            let report = train(
                &mut net,
                &train_data,
                &eval_data,
                &init,
                &mut buf,
                &cfg,
                |_, _, _| Ok(()),
            )
            .unwrap();
            let params: Vec<Vec<f64>> = net.params().iter().map(|p| p.data().to_vec()).collect();
            let slots: Vec<Vec<f64>> = buf.slots().iter().map(|s| s.data().to_vec()).collect();
            (params, slots, report.metrics)
        };
        let (p1, s1, m1) = run();
        let (p2, s2, m2) = run();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn runaway_sampler_skips_every_batch_then_aborts() {
        let (mut net, train_data, eval_data, init) = tiny_setup(11);
        let before: Vec<Tensor> = net.params().into_iter().cloned().collect();
        let mut cfg = tiny_config(11);
        cfg.epochs = 5;
        cfg.sampler.alpha = 1e8;
        cfg.sampler.noise_scale = 0.0;
        cfg.sampler_kind = SamplerKind::Sgld;
        cfg.max_consecutive_skips = 3;
        let mut buf = ReplayBuffer::new(cfg.buffer_capacity, cfg.rho, cfg.seed).unwrap();
        let report = train(
            &mut net,
            &train_data,
            &eval_data,
            &init,
            &mut buf,
            &cfg,
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert!(report.aborted);
        assert_eq!(report.divergence_count, 3);
        assert!(report.metrics.is_empty(), "no epoch completed");
        for (b, a) in before.iter().zip(net.params()) {
            assert_eq!(b.data(), a.data(), "skipped batches must not update");
        }
        // Only the start-of-run stock remains: every slot is still a tame
        // initializer draw, never a runaway chain state.
        for s in buf.slots() {
            assert!(s.max_abs() < 1e3, "divergent state stored: {}", s.max_abs());
        }
    }

    #[test]
    fn weight_decay_shrinks_parameters_relative_to_a_plain_run() {
        let run = |wd: f64| {
            let (mut net, train_data, eval_data, init) = tiny_setup(13);
            let mut cfg = tiny_config(13);
            cfg.weight_decay = wd;
            let mut buf = ReplayBuffer::new(cfg.buffer_capacity, cfg.rho, cfg.seed).unwrap();
            train(
                &mut net,
                &train_data,
                &eval_data,
                &init,
                &mut buf,
                &cfg,
                |_, _, _| Ok(()),
            )
            .unwrap();
            net.params()
                .iter()
                .map(|p| p.sq_norm())
                .sum::<f64>()
                .sqrt()
        };
        let plain = run(0.0);
        let decayed = run(0.5);
        assert!(
            decayed < plain,
            "decay must shrink weights: {decayed} vs {plain}"
        );

        let mut cfg = tiny_config(13);
        cfg.weight_decay = -0.1;
        assert!(cfg.validate().is_err(), "negative decay must be rejected");
    }

    #[test]
    fn metrics_rows_render_stably() {
        let rec = MetricsRecord {
            epoch: 3,
            train_acc: 0.5,
            eval_acc: 0.25,
            mean_real_energy: -1.5,
            mean_sample_energy: -1.0,
            energy_gap: -0.5,
            grad_norm: 2.0,
            divergence_count: 1,
            full_propagations_cumulative: 640,
        };
        assert_eq!(rec.csv_row(), "3,0.5,0.25,-1.5,-1,-0.5,2,1,640");
        assert!(METRICS_CSV_HEADER.starts_with("epoch,"));
    }
}
