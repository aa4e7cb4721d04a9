//! Experiment configuration: one TOML file drives a whole run.
//!
//! Every knob has a default, so the empty file is a valid experiment
//! (two-moons data, the stock sampler, the stock training schedule).
//! Unknown keys are rejected rather than ignored: a typo'd
//! `wieght_decay` should stop the run, not silently train without
//! decay. The same struct serializes back to TOML for the
//! resolved-config snapshot, and the round trip is lossless.
//!
//! Seeds never appear inside sections. One top-level `seed` feeds every
//! random stream — parameter init, data generation, shuffling, buffer
//! draws, chain noise, attack starts — so reproducing a run means
//! reproducing one number.

use std::path::{Path, PathBuf};

use joule_core::init::{CovarianceShape, FitOptions};
use joule_core::sampler::{SamplerConfig, SamplerKind};
use joule_core::trainer::{OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

/// One experiment end to end: where the data comes from, what network
/// sits on it, how chains are driven, how training is scheduled, and
/// where artifacts land.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for the whole run.
    #[serde(default)]
    pub seed: u64,
    /// Directory all artifacts are written into; created on demand.
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub init: InitSection,
}

fn d_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: d_output_dir(),
            dataset: DatasetConfig::default(),
            arch: ArchConfig::default(),
            sampler: SamplerSection::default(),
            train: TrainSection::default(),
            init: InitSection::default(),
        }
    }
}

// ── dataset ──────────────────────────────────────────────────────────────

/// Where samples come from. The generators (`two-moons`,
/// `gaussian-mixture`, `synth-digits`, `uniform`) are seeded and need no
/// files; `csv` and `idx` read from `path` (and `labels_path` for idx).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Source name: two-moons, gaussian-mixture, synth-digits, uniform,
    /// csv, or idx.
    #[serde(default = "d_dataset_name")]
    pub name: String,
    /// Data file for the file-backed formats; unused by generators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Label file for idx data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    /// Reshapes each sample, e.g. `[1, 28, 28]` to feed a convolutional
    /// first layer. The product must match the stored feature count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    /// Class count for the file-backed formats; inferred as
    /// max label + 1 when omitted. Generators know their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// Generator sample count (train and eval together).
    #[serde(default = "d_dataset_n")]
    pub n: usize,
    /// Generator noise standard deviation.
    #[serde(default = "d_noise_std")]
    pub noise_std: f64,
    /// Mixture component count for gaussian-mixture.
    #[serde(default = "d_components")]
    pub components: usize,
    /// How many samples the eval split holds; the rest train.
    #[serde(default = "d_eval_n")]
    pub eval_n: usize,
    /// Shuffle seed for the train/eval split; the master seed when
    /// omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

fn d_dataset_name() -> String {
    "two-moons".into()
}

fn d_dataset_n() -> usize {
    1500
}

fn d_noise_std() -> f64 {
    0.08
}

fn d_components() -> usize {
    3
}

fn d_eval_n() -> usize {
    500
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: d_dataset_name(),
            path: None,
            labels_path: None,
            input_shape: None,
            classes: None,
            n: d_dataset_n(),
            noise_std: d_noise_std(),
            components: d_components(),
            eval_n: d_eval_n(),
            split_seed: None,
        }
    }
}

// ── architecture ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Hidden layer widths of the dense body.
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    /// Batch norm after each hidden layer.
    #[serde(default = "d_true")]
    pub batch_norm: bool,
    /// Channel count of a 3x3 convolutional first layer; 0 keeps the
    /// first layer dense. Conv input must be shaped
    /// `[channels, height, width]`.
    #[serde(default)]
    pub conv_channels: usize,
    /// Zero the output layer before training so the energy surface
    /// starts flat instead of sloping away from the data.
    #[serde(default = "d_true")]
    pub flat_start: bool,
}

fn d_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn d_true() -> bool {
    true
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: d_hidden(),
            batch_norm: true,
            conv_channels: 0,
            flat_start: true,
        }
    }
}

// ── sampler ──────────────────────────────────────────────────────────────

/// Mirrors [`SamplerConfig`] minus the seed, which comes from the top
/// level. Defaults are the library's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    /// Chain flavor: sgld, prox-sgld, or pyld.
    #[serde(default = "d_kind")]
    pub kind: String,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Per-coordinate gradient clamp; `inf` disables it.
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_k_steps")]
    pub k_steps: usize,
    #[serde(default = "d_m_steps")]
    pub m_steps: usize,
    #[serde(default = "d_n_steps")]
    pub n_steps: usize,
    #[serde(default = "d_noise_scale")]
    pub noise_scale: f64,
}

fn d_kind() -> String {
    SamplerKind::Pyld.name().into()
}

fn d_alpha() -> f64 {
    SamplerConfig::default().alpha
}

fn d_epsilon() -> f64 {
    SamplerConfig::default().epsilon
}

fn d_k_steps() -> usize {
    SamplerConfig::default().k_steps
}

fn d_m_steps() -> usize {
    SamplerConfig::default().m_steps
}

fn d_n_steps() -> usize {
    SamplerConfig::default().n_steps
}

fn d_noise_scale() -> f64 {
    SamplerConfig::default().noise_scale
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: d_kind(),
            alpha: d_alpha(),
            epsilon: d_epsilon(),
            k_steps: d_k_steps(),
            m_steps: d_m_steps(),
            n_steps: d_n_steps(),
            noise_scale: d_noise_scale(),
        }
    }
}

// ── training ─────────────────────────────────────────────────────────────

/// Mirrors [`TrainConfig`] minus the seed and the sampler (their own
/// section), plus the checkpoint cadence, which is artifact plumbing the
/// trainer itself never sees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_decay_epochs")]
    pub decay_epochs: Vec<usize>,
    /// sgd, sgd-momentum, or adam.
    #[serde(default = "d_optimizer")]
    pub optimizer: String,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    /// Chain restart probability when drawing from the replay buffer.
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_buffer_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "d_state_bound")]
    pub state_bound: f64,
    #[serde(default = "d_max_skips")]
    pub max_consecutive_skips: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the
    /// final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn d_epochs() -> usize {
    TrainConfig::default().epochs
}

fn d_batch_size() -> usize {
    TrainConfig::default().batch_size
}

fn d_lr() -> f64 {
    TrainConfig::default().lr
}

fn d_lr_decay() -> f64 {
    TrainConfig::default().lr_decay
}

fn d_decay_epochs() -> Vec<usize> {
    TrainConfig::default().decay_epochs
}

fn d_optimizer() -> String {
    TrainConfig::default().optimizer.name().into()
}

fn d_momentum() -> f64 {
    TrainConfig::default().momentum
}

fn d_weight_decay() -> f64 {
    TrainConfig::default().weight_decay
}

fn d_rho() -> f64 {
    TrainConfig::default().rho
}

fn d_buffer_capacity() -> usize {
    TrainConfig::default().buffer_capacity
}

fn d_state_bound() -> f64 {
    TrainConfig::default().state_bound
}

fn d_max_skips() -> usize {
    TrainConfig::default().max_consecutive_skips
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: d_epochs(),
            batch_size: d_batch_size(),
            lr: d_lr(),
            lr_decay: d_lr_decay(),
            decay_epochs: d_decay_epochs(),
            optimizer: d_optimizer(),
            momentum: d_momentum(),
            weight_decay: d_weight_decay(),
            rho: d_rho(),
            buffer_capacity: d_buffer_capacity(),
            state_bound: d_state_bound(),
            max_consecutive_skips: d_max_skips(),
            checkpoint_every: 0,
        }
    }
}

// ── initializer ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    /// Covariance form: full or diagonal.
    #[serde(default = "d_covariance")]
    pub covariance: String,
    /// Jitter inputs by ±1/512 before fitting, smoothing quantized
    /// image data.
    #[serde(default)]
    pub dequantize: bool,
}

fn d_covariance() -> String {
    "full".into()
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection {
            covariance: d_covariance(),
            dequantize: false,
        }
    }
}

// ── loading and conversion ───────────────────────────────────────────────

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    /// The resolved experiment as TOML, every default spelled out.
    pub fn to_toml(&self) -> Result<String, String> {
        toml::to_string_pretty(self).map_err(|e| format!("config serialization: {e}"))
    }

    /// Sampler settings with the master seed threaded in.
    pub fn sampler_config(&self) -> Result<(SamplerConfig, SamplerKind), String> {
        let s = &self.sampler;
        let kind = SamplerKind::parse(&s.kind).ok_or_else(|| {
            format!(
                "sampler.kind: unknown sampler `{}` (expected sgld, prox-sgld, or pyld)",
                s.kind
            )
        })?;
        let cfg = SamplerConfig {
            alpha: s.alpha,
            epsilon: s.epsilon,
            k_steps: s.k_steps,
            m_steps: s.m_steps,
            n_steps: s.n_steps,
            noise_scale: s.noise_scale,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| format!("sampler: {e}"))?;
        Ok((cfg, kind))
    }

    /// The full training configuration, sampler included.
    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let t = &self.train;
        let (sampler, sampler_kind) = self.sampler_config()?;
        let optimizer = OptimizerKind::parse(&t.optimizer).ok_or_else(|| {
            format!(
                "train.optimizer: unknown optimizer `{}` (expected sgd, sgd-momentum, or adam)",
                t.optimizer
            )
        })?;
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay: t.lr_decay,
            decay_epochs: t.decay_epochs.clone(),
            optimizer,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            sampler,
            sampler_kind,
            rho: t.rho,
            buffer_capacity: t.buffer_capacity,
            state_bound: t.state_bound,
            max_consecutive_skips: t.max_consecutive_skips,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| format!("train: {e}"))?;
        Ok(cfg)
    }

    pub fn fit_options(&self) -> Result<FitOptions, String> {
        let covariance = match self.init.covariance.as_str() {
            "full" => CovarianceShape::Full,
            "diagonal" | "diag" => CovarianceShape::Diagonal,
            other => {
                return Err(format!(
                    "init.covariance: unknown form `{other}` (expected full or diagonal)"
                ))
            }
        };
        Ok(FitOptions {
            covariance,
            dequantize: self.init.dequantize,
        })
    }
}
