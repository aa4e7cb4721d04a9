//! Class-conditional Gaussian initializer for sampling chains.
//!
//! Instead of seeding chains from uniform noise, we fit one Gaussian per
//! class to the training data — mixture weight, mean, and a Cholesky factor
//! of the (population) covariance — and draw chain starts from the mixture.
//! Starts drawn this way already sit near the data manifold, which is what
//! lets short chains produce useful negative samples.

use crate::data::{batch_feature_moments, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// How much structure the fitted covariance keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceShape {
    /// Dense per-class covariance with a lower-triangular Cholesky factor.
    Full,
    /// Per-feature variances only; cheaper and always factorizable.
    Diagonal,
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub covariance: CovarianceShape,
    /// Adds uniform jitter of total width 1/256 (so ±1/512) to each input
    /// coordinate before fitting. Smooths away quantization plateaus in
    /// image data; off by default.
    pub dequantize: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            covariance: CovarianceShape::Full,
            dequantize: false,
        }
    }
}

/// One fitted Cholesky factor. `Full` holds a `[d, d]` lower-triangular
/// matrix; `Diagonal` holds the `[d]` diagonal of such a matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum CovFactor {
    Full(Tensor),
    Diagonal(Tensor),
}

impl CovFactor {
    /// Writes `L z` into `out` (both length d).
    fn matvec(&self, z: &[f64], out: &mut [f64]) {
        match self {
            CovFactor::Full(l) => {
                let d = z.len();
                for i in 0..d {
                    let mut acc = 0.0;
                    for (j, zj) in z.iter().enumerate().take(i + 1) {
                        acc += l.at2(i, j) * zj;
                    }
                    out[i] = acc;
                }
            }
            CovFactor::Diagonal(l) => {
                for (o, (li, zi)) in out.iter_mut().zip(l.data().iter().zip(z)) {
                    *o = li * zi;
                }
            }
        }
    }

    /// Reconstructs `L Lᵀ` as a dense `[d, d]` tensor.
    pub fn reconstruct(&self) -> Tensor {
        match self {
            CovFactor::Full(l) => {
                let d = l.shape()[0];
                let mut out = Tensor::zeros(&[d, d]);
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for k in 0..=i.min(j) {
                            acc += l.at2(i, k) * l.at2(j, k);
                        }
                        *out.at2_mut(i, j) = acc;
                    }
                }
                out
            }
            CovFactor::Diagonal(l) => {
                let d = l.len();
                let mut out = Tensor::zeros(&[d, d]);
                for i in 0..d {
                    *out.at2_mut(i, i) = l.data()[i] * l.data()[i];
                }
                out
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovFactor::Full(l) => l.shape()[0],
            CovFactor::Diagonal(l) => l.len(),
        }
    }
}

/// A per-class Gaussian mixture fitted to labeled data.
///
/// Fields are public so degenerate instances (for example a zero factor,
/// which makes every draw reproduce the class mean) can be built directly
/// in tests and tools.
#[derive(Clone, Debug, PartialEq)]
pub struct InformativeInit {
    /// Mixture weights: class frequencies, summing to 1.
    pub pi: Vec<f64>,
    /// Per-class means in the dataset's input shape.
    pub mu: Vec<Tensor>,
    /// Per-class Cholesky factors of covariance + jitter·I.
    pub cov_factor: Vec<CovFactor>,
    /// The diagonal regularizer the factors were computed at (shared by
    /// all classes).
    pub jitter: f64,
}

const MAX_JITTER_ESCALATIONS: u32 = 6;

impl InformativeInit {
    pub fn num_classes(&self) -> usize {
        self.pi.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.mu[0].shape()
    }

    pub fn feature_count(&self) -> usize {
        self.mu[0].len()
    }

    /// Structural checks for instances that arrive from outside `fit`
    /// (manual construction, checkpoints).
    pub fn validate(&self) -> Result<()> {
        let c = self.pi.len();
        if c == 0 || self.mu.len() != c || self.cov_factor.len() != c {
            return Err(Error::ShapeMismatch {
                context: "initializer class counts",
                expected: vec![c, c],
                got: vec![self.mu.len(), self.cov_factor.len()],
            });
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.pi.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::NonFinite {
                context: "initializer mixture weights",
            });
        }
        let d = self.feature_count();
        for (y, (m, f)) in self.mu.iter().zip(&self.cov_factor).enumerate() {
            if m.len() != d || f.dim() != d {
                return Err(Error::ShapeMismatch {
                    context: "initializer factor shape",
                    expected: vec![d, d],
                    got: vec![m.len(), f.dim()],
                });
            }
            if !m.is_finite() {
                return Err(Error::NonFinite {
                    context: "initializer mean",
                });
            }
            let finite = match f {
                CovFactor::Full(l) | CovFactor::Diagonal(l) => l.is_finite(),
            };
            if !finite {
                return Err(Error::NotPositiveDefinite {
                    class: y,
                    attempts: 0,
                });
            }
        }
        Ok(())
    }

    /// Fits mixture weights, class means, and covariance factors to the
    /// dataset. Every class in `0..num_classes` must appear at least twice.
    pub fn fit(
        dataset: &LabeledDataset,
        options: &FitOptions,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let n = dataset.len();
        let c = dataset.num_classes();
        let d = dataset.feature_count();
        if !dataset.inputs().is_finite() {
            return Err(Error::NonFinite {
                context: "initializer fit inputs",
            });
        }

        let mut counts = vec![0usize; c];
        for &y in dataset.labels() {
            counts[y] += 1;
        }
        for (y, &count) in counts.iter().enumerate() {
            if count < 2 {
                return Err(Error::ClassTooSmall { class: y, count });
            }
        }

        // Work on a flat copy so dequantization never touches the caller's
        // data.
        let mut flat: Vec<Vec<f64>> = (0..n).map(|i| dataset.inputs().row(i).to_vec()).collect();
        if options.dequantize {
            for row in &mut flat {
                for v in row.iter_mut() {
                    *v += rng.random_range(-1.0 / 512.0..1.0 / 512.0);
                }
            }
        }

        let pi: Vec<f64> = counts.iter().map(|&k| k as f64 / n as f64).collect();

        let mut mu_flat: Vec<Vec<f64>> = vec![vec![0.0; d]; c];
        for (row, &y) in flat.iter().zip(dataset.labels()) {
            for (acc, v) in mu_flat[y].iter_mut().zip(row) {
                *acc += v;
            }
        }
        for (m, &count) in mu_flat.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= count as f64;
            }
        }

        let (cov_factor, jitter) = match options.covariance {
            CovarianceShape::Full => {
                let mut sigmas = Vec::with_capacity(c);
                for y in 0..c {
                    sigmas.push(class_covariance(
                        &flat,
                        dataset.labels(),
                        y,
                        &mu_flat[y],
                        counts[y],
                    ));
                }
                let start = initial_jitter(&sigmas);
                let (factors, jitter) = factor_all_full(&sigmas, start)?;
                (factors.into_iter().map(CovFactor::Full).collect(), jitter)
            }
            CovarianceShape::Diagonal => {
                let mut vars: Vec<Vec<f64>> = vec![vec![0.0; d]; c];
                for (row, &y) in flat.iter().zip(dataset.labels()) {
                    for ((acc, v), m) in vars[y].iter_mut().zip(row).zip(&mu_flat[y]) {
                        let dlt = v - m;
                        *acc += dlt * dlt;
                    }
                }
                let mut trace_max = 0.0f64;
                for (var, &count) in vars.iter_mut().zip(&counts) {
                    for v in var.iter_mut() {
                        *v /= count as f64;
                    }
                    trace_max = trace_max.max(var.iter().sum::<f64>() / d as f64);
                }
                let jitter = positive_or_floor(1e-6 * trace_max);
                let factors = vars
                    .into_iter()
                    .map(|var| {
                        CovFactor::Diagonal(
                            Tensor::from_vec(
                                &[d],
                                var.into_iter().map(|v| (v + jitter).sqrt()).collect(),
                            )
                            .expect("diagonal factor shape"),
                        )
                    })
                    .collect();
                (factors, jitter)
            }
        };
        Ok(finish(pi, mu_flat, cov_factor, jitter, dataset))
    }

    /// Draws one sample from class `y`: `μ_y + L_y z` with standard-normal
    /// `z`.
    pub fn sample_class(&self, y: usize, rng: &mut ChaCha12Rng) -> Result<Tensor> {
        if y >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: self.num_classes(),
            });
        }
        let d = self.feature_count();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = self.mu[y].clone();
        let mut lz = vec![0.0; d];
        self.cov_factor[y].matvec(&z, &mut lz);
        for (o, v) in out.data_mut().iter_mut().zip(&lz) {
            *o += v;
        }
        Ok(out)
    }

    /// Draws a class from the mixture weights, then a sample from that
    /// class. Returns the sample together with its class.
    pub fn sample_marginal(&self, rng: &mut ChaCha12Rng) -> Result<(Tensor, usize)> {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut cum = 0.0;
        let mut y = self.num_classes() - 1;
        for (k, p) in self.pi.iter().enumerate() {
            cum += p;
            if u < cum {
                y = k;
                break;
            }
        }
        Ok((self.sample_class(y, rng)?, y))
    }
}

fn finish(
    pi: Vec<f64>,
    mu_flat: Vec<Vec<f64>>,
    cov_factor: Vec<CovFactor>,
    jitter: f64,
    dataset: &LabeledDataset,
) -> InformativeInit {
    let shape = dataset.input_shape();
    let mu = mu_flat
        .into_iter()
        .map(|m| Tensor::from_vec(shape, m).expect("class mean shape"))
        .collect();
    InformativeInit {
        pi,
        mu,
        cov_factor,
        jitter,
    }
}

/// Population covariance (1/n normalization) of one class.
fn class_covariance(
    flat: &[Vec<f64>],
    labels: &[usize],
    class: usize,
    mean: &[f64],
    count: usize,
) -> Tensor {
    let d = mean.len();
    let mut sigma = Tensor::zeros(&[d, d]);
    let mut centered = vec![0.0; d];
    for (row, &y) in flat.iter().zip(labels) {
        if y != class {
            continue;
        }
        for ((cv, v), m) in centered.iter_mut().zip(row).zip(mean) {
            *cv = v - m;
        }
        let s = sigma.data_mut();
        for i in 0..d {
            let ci = centered[i];
            let base = i * d;
            // Upper triangle only; mirrored below.
            for (j, cj) in centered.iter().enumerate().skip(i) {
                s[base + j] += ci * cj;
            }
        }
    }
    let scale = 1.0 / count as f64;
    for i in 0..d {
        for j in i..d {
            let v = sigma.at2(i, j) * scale;
            *sigma.at2_mut(i, j) = v;
            *sigma.at2_mut(j, i) = v;
        }
    }
    sigma
}

/// Starting regularizer: 1e-6 of the mean diagonal entry, taken over the
/// worst (largest-trace) class so one shared value serves all of them.
fn initial_jitter(sigmas: &[Tensor]) -> f64 {
    let mut trace_max = 0.0f64;
    for s in sigmas {
        let d = s.shape()[0];
        let tr: f64 = (0..d).map(|i| s.at2(i, i)).sum();
        trace_max = trace_max.max(tr / d as f64);
    }
    positive_or_floor(1e-6 * trace_max)
}

/// Zero-variance data would leave the escalation ladder stuck at zero, so
/// give it a tiny absolute floor to climb from.
fn positive_or_floor(jitter: f64) -> f64 {
    if jitter > 0.0 {
        jitter
    } else {
        1e-12
    }
}

/// Factors every class at a shared jitter, escalating ×10 on failure until
/// all succeed or the attempt budget runs out.
fn factor_all_full(sigmas: &[Tensor], start_jitter: f64) -> Result<(Vec<Tensor>, f64)> {
    let mut jitter = start_jitter;
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        let mut factors = Vec::with_capacity(sigmas.len());
        let mut failed = None;
        for (y, sigma) in sigmas.iter().enumerate() {
            match cholesky_lower(sigma, jitter) {
                Some(l) => factors.push(l),
                None => {
                    failed = Some(y);
                    break;
                }
            }
        }
        match failed {
            None => return Ok((factors, jitter)),
            Some(class) => {
                if attempts > MAX_JITTER_ESCALATIONS {
                    return Err(Error::NotPositiveDefinite { class, attempts });
                }
                jitter *= 10.0;
            }
        }
    }
}

/// Lower-triangular Cholesky factor of `sigma + jitter·I`, or `None` if a
/// pivot is non-positive or non-finite.
fn cholesky_lower(sigma: &Tensor, jitter: f64) -> Option<Tensor> {
    let d = sigma.shape()[0];
    let mut l = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..=i {
            let mut s = sigma.at2(i, j);
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l.at2(i, k) * l.at2(j, k);
            }
            if i == j {
                if !s.is_finite() || s <= 0.0 {
                    return None;
                }
                *l.at2_mut(i, j) = s.sqrt();
            } else {
                *l.at2_mut(i, j) = s / l.at2(j, j);
            }
        }
    }
    Some(l)
}

// ── distribution match diagnostics ───────────────────────────────────────

/// What to draw the comparison batch from in [`statistic_gap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    /// The fitted mixture.
    Informative,
    /// Uniform noise over `[-1, 1]^d`.
    Uniform,
}

#[derive(Clone, Copy, Debug)]
pub struct GapSummary {
    /// Mean over features of |batch mean − data mean|.
    pub mean_gap: f64,
    /// Mean over features of |batch variance − data variance|.
    pub var_gap: f64,
}

/// Draws `batch` starts from the chosen reference and reports how far their
/// per-feature moments sit from the dataset's. Lower is a better match; the
/// fitted mixture should beat uniform noise by a wide margin on real data.
pub fn statistic_gap(
    init: &InformativeInit,
    dataset: &LabeledDataset,
    reference: Reference,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<GapSummary> {
    let shape = init.input_shape();
    let mut samples = Vec::with_capacity(batch);
    for _ in 0..batch {
        let x = match reference {
            Reference::Informative => init.sample_marginal(rng)?.0,
            Reference::Uniform => Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)),
        };
        samples.push(x);
    }
    let stacked = Tensor::stack(&samples)?;
    let (batch_mean, batch_var) = batch_feature_moments(&stacked);
    let (data_mean, data_var) = dataset.feature_moments();
    let d = data_mean.len();
    let mean_gap = batch_mean
        .iter()
        .zip(&data_mean)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / d as f64;
    let var_gap = batch_var
        .iter()
        .zip(&data_var)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / d as f64;
    Ok(GapSummary { mean_gap, var_gap })
}
