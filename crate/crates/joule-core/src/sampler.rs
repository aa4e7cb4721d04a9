//! Langevin samplers: plain SGLD, proximal (gradient-clamped) SGLD, and a
//! two-level sampler that freezes the body gradient per outer iteration.
//!
//! Sampling always sees the network in frozen-statistics mode, so a chain is
//! a pure function of (target, start state, config, noise stream). Every
//! full forward+backward and every first-layer-only VJP is counted in a
//! [`ChainTrace`]; the counters are exact and do not depend on whether
//! per-step recording is enabled.

use crate::error::{Error, Result};
use crate::net::{BnMode, SplitNetwork};
use crate::rng::stream_rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Sampler hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Step size α; the update moves by −(α/2)·gradient.
    pub alpha: f64,
    /// Per-coordinate clamp radius ε for the proximal samplers;
    /// `f64::INFINITY` disables clamping.
    pub epsilon: f64,
    /// Chain length K for plain and proximal SGLD.
    pub k_steps: usize,
    /// Outer iterations M of the two-level sampler.
    pub m_steps: usize,
    /// Inner first-layer updates N per outer iteration.
    pub n_steps: usize,
    /// Coefficient on the per-coordinate standard-normal noise. Equal to
    /// `alpha` this is the classic Langevin noise term; 0 disables noise.
    pub noise_scale: f64,
    /// Seed for the chain noise stream used by [`run_chain`].
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            alpha: 0.2,
            epsilon: 1.0,
            k_steps: 20,
            m_steps: 10,
            n_steps: 5,
            noise_scale: 0.2,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |context| Err(Error::NonFinite { context });
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad("sampler alpha must be positive and finite");
        }
        if !(self.epsilon > 0.0) {
            return bad("sampler epsilon must be positive (or +inf)");
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return bad("sampler noise_scale must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Sgld,
    ProximalSgld,
    /// Two-level sampler: per outer iteration the body gradient is frozen
    /// into a slack vector, then N first-layer-only updates run.
    Pyld,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Sgld => "sgld",
            SamplerKind::ProximalSgld => "prox-sgld",
            SamplerKind::Pyld => "pyld",
        }
    }

    pub fn parse(s: &str) -> Option<SamplerKind> {
        match s {
            "sgld" => Some(SamplerKind::Sgld),
            "prox-sgld" | "proximal-sgld" | "prox" => Some(SamplerKind::ProximalSgld),
            "pyld" => Some(SamplerKind::Pyld),
            _ => None,
        }
    }
}

/// Per-step record, written when tracing is enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Energy at the state the step started from.
    pub energy: f64,
    /// Largest absolute gradient coordinate seen during the step (pre-clamp).
    pub grad_max_abs: f64,
    /// Largest absolute state coordinate after the step.
    pub x_max_abs: f64,
}

/// Chain bookkeeping: exact propagation counters plus optional per-step
/// records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainTrace {
    /// Complete forward+backward passes through the whole network.
    pub full_propagations: u64,
    /// First-layer-only VJP evaluations.
    pub first_layer_props: u64,
    pub steps: Vec<StepRecord>,
}

impl ChainTrace {
    pub fn new() -> Self {
        ChainTrace::default()
    }

    /// Sums the counters of another chain into this one. Step records are
    /// per-chain and are not merged.
    pub fn absorb_counters(&mut self, other: &ChainTrace) {
        self.full_propagations += other.full_propagations;
        self.first_layer_props += other.first_layer_props;
    }

    /// Writes the recorded steps as CSV: `step,energy,grad_max_abs,x_max_abs`.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "step,energy,grad_max_abs,x_max_abs")?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{}", s.step, s.energy, s.grad_max_abs, s.x_max_abs)?;
        }
        Ok(())
    }
}

/// What a Langevin chain samples from. Implementations must be pure:
/// repeated evaluation at the same point returns identical values.
pub trait ChainTarget {
    fn state_shape(&self) -> Vec<usize>;
    fn energy(&self, x: &Tensor) -> Result<f64>;
    /// Energy and its input gradient; one full propagation.
    fn energy_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;
}

/// A chain target factored as `body ∘ first_layer`, enabling frozen-slack
/// inner updates.
pub trait SplitTarget: ChainTarget {
    /// Energy gradient with respect to the first layer's output, plus the
    /// energy; one full propagation.
    fn slack_energy(&self, x: &Tensor) -> Result<(Tensor, f64)>;
    /// `pᵀ·J_{f0}(x)`; one first-layer-only propagation.
    fn first_layer_vjp(&self, x: &Tensor, p: &Tensor) -> Result<Tensor>;
}

// Networks are sampled in frozen-statistics mode: chains never touch batch
// statistics, so the target is pure.
impl ChainTarget for SplitNetwork {
    fn state_shape(&self) -> Vec<usize> {
        self.input_shape().to_vec()
    }

    fn energy(&self, x: &Tensor) -> Result<f64> {
        SplitNetwork::energy(self, x, BnMode::EvalRunningStats)
    }

    fn energy_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        self.energy_and_grad_input(x, BnMode::EvalRunningStats)
    }
}

impl SplitTarget for SplitNetwork {
    fn slack_energy(&self, x: &Tensor) -> Result<(Tensor, f64)> {
        self.slack_and_energy(x, BnMode::EvalRunningStats)
    }

    fn first_layer_vjp(&self, x: &Tensor, p: &Tensor) -> Result<Tensor> {
        self.grad_first_input(x, p, BnMode::EvalRunningStats)
    }
}

/// Per-coordinate clamp of `v` to `[-bound, bound]`. `bound = +inf` returns
/// the input unchanged.
pub fn clamp_coords(v: &Tensor, bound: f64) -> Tensor {
    let mut out = v.clone();
    for x in out.data_mut() {
        *x = x.clamp(-bound, bound);
    }
    out
}

/// One plain SGLD step: `x − (α/2)·∇E(x) + noise_scale·η`.
pub fn sgld_step<T: ChainTarget + ?Sized>(
    target: &T,
    x: &Tensor,
    cfg: &SamplerConfig,
    rng: &mut ChaCha12Rng,
    trace: &mut ChainTrace,
) -> Result<(Tensor, StepInfo)> {
    let (energy, grad) = target.energy_grad(x)?;
    trace.full_propagations += 1;
    let grad_max_abs = grad.max_abs();
    if !energy.is_finite() || !grad_max_abs.is_finite() {
        return Err(Error::NonFinite {
            context: "sgld gradient",
        });
    }
    let half = 0.5 * cfg.alpha;
    let mut next = x.clone();
    for (xi, gi) in next.data_mut().iter_mut().zip(grad.data()) {
        *xi -= half * gi;
    }
    add_noise(&mut next, cfg.noise_scale, rng);
    Ok((next, StepInfo { energy, grad_max_abs }))
}

/// One proximal SGLD step: the gradient is clamped per coordinate to
/// `[-ε, ε]` before the update; the noise is not clamped.
pub fn proximal_sgld_step<T: ChainTarget + ?Sized>(
    target: &T,
    x: &Tensor,
    cfg: &SamplerConfig,
    rng: &mut ChaCha12Rng,
    trace: &mut ChainTrace,
) -> Result<(Tensor, StepInfo)> {
    let (energy, grad) = target.energy_grad(x)?;
    trace.full_propagations += 1;
    let grad_max_abs = grad.max_abs();
    if !energy.is_finite() || !grad_max_abs.is_finite() {
        return Err(Error::NonFinite {
            context: "proximal sgld gradient",
        });
    }
    let half = 0.5 * cfg.alpha;
    let mut next = x.clone();
    for (xi, gi) in next.data_mut().iter_mut().zip(grad.data()) {
        *xi -= half * gi.clamp(-cfg.epsilon, cfg.epsilon);
    }
    add_noise(&mut next, cfg.noise_scale, rng);
    Ok((next, StepInfo { energy, grad_max_abs }))
}

/// Energy and pre-clamp gradient magnitude observed by a single step.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub energy: f64,
    pub grad_max_abs: f64,
}

/// Runs the two-level sampler for M outer iterations.
///
/// Each outer iteration computes the slack vector once (one full forward
/// plus a body-only backward), applies N inner updates
/// `x ← x − (α/2)·clamp(pᵀ·J_{f0}(x), ε)` using first-layer-only VJPs, and
/// then adds `noise_scale·η` once. Divergence aborts with the partial trace
/// attached.
pub fn pyld_sample<T: SplitTarget + ?Sized>(
    target: &T,
    x0: &Tensor,
    cfg: &SamplerConfig,
    rng: &mut ChaCha12Rng,
    record: bool,
) -> Result<(Tensor, ChainTrace)> {
    cfg.validate()?;
    let mut trace = ChainTrace::new();
    let mut x = x0.clone();
    if !x.is_finite() {
        return Err(Error::NonFinite {
            context: "pyld start state",
        });
    }
    for t in 0..cfg.m_steps {
        let diverged = |trace: ChainTrace| Error::ChainDiverged {
            step: t as u64,
            trace: Box::new(trace),
        };
        let (p, energy) = target.slack_energy(&x)?;
        trace.full_propagations += 1;
        if !energy.is_finite() || !p.is_finite() {
            return Err(diverged(trace));
        }
        let half = 0.5 * cfg.alpha;
        let mut grad_max_abs = 0.0f64;
        for _ in 0..cfg.n_steps {
            let vjp = target.first_layer_vjp(&x, &p)?;
            trace.first_layer_props += 1;
            let vmax = vjp.max_abs();
            if !vmax.is_finite() {
                return Err(diverged(trace));
            }
            if vmax > grad_max_abs {
                grad_max_abs = vmax;
            }
            for (xi, gi) in x.data_mut().iter_mut().zip(vjp.data()) {
                *xi -= half * gi.clamp(-cfg.epsilon, cfg.epsilon);
            }
        }
        add_noise(&mut x, cfg.noise_scale, rng);
        let x_max_abs = x.max_abs();
        if !x_max_abs.is_finite() {
            return Err(diverged(trace));
        }
        if record {
            trace.steps.push(StepRecord {
                step: t as u64,
                energy,
                grad_max_abs,
                x_max_abs,
            });
        }
    }
    Ok((x, trace))
}

/// Uniform driver over the three samplers. The noise stream is derived from
/// `cfg.seed`, so a fixed config yields an identical chain on every run.
pub fn run_chain<T: SplitTarget + ?Sized>(
    target: &T,
    x0: &Tensor,
    cfg: &SamplerConfig,
    kind: SamplerKind,
    record: bool,
) -> Result<(Tensor, ChainTrace)> {
    cfg.validate()?;
    let mut rng = chain_noise_rng(cfg.seed);
    match kind {
        SamplerKind::Pyld => pyld_sample(target, x0, cfg, &mut rng, record),
        SamplerKind::Sgld | SamplerKind::ProximalSgld => {
            let mut trace = ChainTrace::new();
            let mut x = x0.clone();
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    context: "chain start state",
                });
            }
            for t in 0..cfg.k_steps {
                let stepped = match kind {
                    SamplerKind::Sgld => sgld_step(target, &x, cfg, &mut rng, &mut trace),
                    _ => proximal_sgld_step(target, &x, cfg, &mut rng, &mut trace),
                };
                let (next, info) = match stepped {
                    Ok(v) => v,
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::ChainDiverged {
                            step: t as u64,
                            trace: Box::new(trace),
                        })
                    }
                    Err(e) => return Err(e),
                };
                x = next;
                let x_max_abs = x.max_abs();
                if !x_max_abs.is_finite() {
                    return Err(Error::ChainDiverged {
                        step: t as u64,
                        trace: Box::new(trace),
                    });
                }
                if record {
                    trace.steps.push(StepRecord {
                        step: t as u64,
                        energy: info.energy,
                        grad_max_abs: info.grad_max_abs,
                        x_max_abs,
                    });
                }
            }
            Ok((x, trace))
        }
    }
}

/// The noise stream a chain with the given seed draws from.
pub fn chain_noise_rng(seed: u64) -> ChaCha12Rng {
    stream_rng(seed, crate::rng::stream::CHAIN_NOISE)
}

fn add_noise(x: &mut Tensor, scale: f64, rng: &mut ChaCha12Rng) {
    if scale == 0.0 {
        return;
    }
    for xi in x.data_mut() {
        let eta: f64 = rng.sample(StandardNormal);
        *xi += scale * eta;
    }
}
