//! Labeled datasets and the built-in seeded generators.
//!
//! All generated data lives in the `[-1, 1]` input domain the samplers and
//! attacks assume. Generators are deterministic functions of their seed, so
//! experiments need no downloaded files.

use crate::error::{Error, Result};
use crate::rng::{stream_rng, stream};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.batch_len() == 0 {
            return Err(Error::EmptyDataset);
        }
        if inputs.batch_len() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "dataset labels",
                expected: vec![inputs.batch_len()],
                got: vec![labels.len()],
            });
        }
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes,
                });
            }
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs.sample_shape()
    }

    pub fn feature_count(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (Tensor, usize) {
        (self.inputs.sample(i), self.labels[i])
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let samples: Vec<Tensor> = indices.iter().map(|&i| self.inputs.sample(i)).collect();
        LabeledDataset::new(
            Tensor::stack(&samples)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Splits off `n_eval` samples chosen by a seeded shuffle; returns
    /// `(train, eval)`.
    pub fn split(&self, n_eval: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if n_eval == 0 || n_eval >= self.len() {
            return Err(Error::ShapeMismatch {
                context: "split size",
                expected: vec![self.len()],
                got: vec![n_eval],
            });
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = stream_rng(seed, stream::DATA);
        // Fisher-Yates so the split depends only on the seed.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let eval_idx = &order[..n_eval];
        let train_idx = &order[n_eval..];
        Ok((self.subset(train_idx)?, self.subset(eval_idx)?))
    }

    /// Per-feature mean and population variance over the whole dataset.
    pub fn feature_moments(&self) -> (Vec<f64>, Vec<f64>) {
        batch_feature_moments(&self.inputs)
    }

    /// Per-feature (min, max) over the dataset.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.feature_count();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..self.len() {
            for (f, &v) in self.inputs.row(i).iter().enumerate() {
                if v < lo[f] {
                    lo[f] = v;
                }
                if v > hi[f] {
                    hi[f] = v;
                }
            }
        }
        (lo, hi)
    }
}

/// Per-feature mean and population variance of a batched tensor.
pub fn batch_feature_moments(batch: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = batch.batch_len();
    let d: usize = batch.sample_shape().iter().product();
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (f, &v) in batch.row(i).iter().enumerate() {
            mean[f] += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for i in 0..n {
        for (f, &v) in batch.row(i).iter().enumerate() {
            let dlt = v - mean[f];
            var[f] += dlt * dlt;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    (mean, var)
}

// ── generators ───────────────────────────────────────────────────────────

/// Two interleaved half-moons with Gaussian jitter, scaled into `[-1, 1]²`
/// and clamped to the domain. Class 0 is the upper moon.
pub fn two_moons(n: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    let mut rng = stream_rng(seed, stream::DATA);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let t = std::f64::consts::PI * rng.random_range(0.0..1.0);
        let (mut px, mut py) = if y == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        px += noise_std * nx;
        py += noise_std * ny;
        // Raw moons span roughly x in [-1, 2], y in [-0.5, 1].
        px = (px - 0.5) * 0.6;
        py = (py - 0.25) * 0.6;
        data.push(px.clamp(-1.0, 1.0));
        data.push(py.clamp(-1.0, 1.0));
        labels.push(y);
    }
    LabeledDataset::new(Tensor::from_vec(&[n, 2], data)?, labels, 2)
}

/// `k` isotropic Gaussian blobs with means on a circle, one class per blob.
pub fn gaussian_blobs_2d(n: usize, k: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    assert!(k >= 1, "need at least one component");
    let mut rng = stream_rng(seed, stream::DATA);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        let angle = 2.0 * std::f64::consts::PI * y as f64 / k as f64;
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let px = 0.6 * angle.cos() + noise_std * nx;
        let py = 0.6 * angle.sin() + noise_std * ny;
        data.push(px.clamp(-1.0, 1.0));
        data.push(py.clamp(-1.0, 1.0));
        labels.push(y);
    }
    LabeledDataset::new(Tensor::from_vec(&[n, 2], data)?, labels, k)
}

/// Uniform samples over `[-1, 1]^d`, labeled 0; handy as an
/// out-of-distribution contrast set.
pub fn uniform_noise(n: usize, shape: &[usize], seed: u64) -> Result<LabeledDataset> {
    let mut rng = stream_rng(seed, stream::DATA);
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let inputs = Tensor::from_fn(&full, |_| rng.random_range(-1.0..1.0));
    LabeledDataset::new(inputs, vec![0; n], 1)
}

// Seven-segment digit rendering for the synthetic image set. Segment
// endpoints live on a 28x28 canvas.
const SEG_ENDPOINTS: [((f64, f64), (f64, f64)); 7] = [
    ((9.0, 5.0), (19.0, 5.0)),   // A: top
    ((19.0, 5.0), (19.0, 14.0)), // B: upper right
    ((19.0, 14.0), (19.0, 23.0)),// C: lower right
    ((9.0, 23.0), (19.0, 23.0)), // D: bottom
    ((9.0, 14.0), (9.0, 23.0)),  // E: lower left
    ((9.0, 5.0), (9.0, 14.0)),   // F: upper left
    ((9.0, 14.0), (19.0, 14.0)), // G: middle
];

const DIGIT_SEGMENTS: [u8; 10] = [
    0b0111111, // 0: ABCDEF
    0b0000110, // 1: BC
    0b1011011, // 2: ABDEG
    0b1001111, // 3: ABCDG
    0b1100110, // 4: BCFG
    0b1101101, // 5: ACDFG
    0b1111101, // 6: ACDEFG
    0b0000111, // 7: ABC
    0b1111111, // 8: all
    0b1101111, // 9: ABCDFG
];

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let ab_sq = abx * abx + aby * aby;
    let t = if ab_sq == 0.0 {
        0.0
    } else {
        ((apx * abx + apy * aby) / ab_sq).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.0 - (a.0 + t * abx), p.1 - (a.1 + t * aby));
    (dx * dx + dy * dy).sqrt()
}

/// Synthetic 28x28 ten-class digit images in `[-1, 1]`: seven-segment
/// glyphs with per-sample shift, intensity, and pixel noise. Digit-like
/// enough that per-pixel class means are strongly structured, which is what
/// the informative-initializer tests need at image scale.
pub fn synth_digits(n: usize, seed: u64) -> Result<LabeledDataset> {
    let mut rng = stream_rng(seed, stream::DATA);
    let mut data = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 10;
        let mask = DIGIT_SEGMENTS[y];
        let dx = rng.random_range(-2..=2) as f64;
        let dy = rng.random_range(-2..=2) as f64;
        let intensity = rng.random_range(0.7..1.0);
        for py in 0..28 {
            for px in 0..28 {
                let p = (px as f64 - dx, py as f64 - dy);
                let mut dist = f64::INFINITY;
                for (s, seg) in SEG_ENDPOINTS.iter().enumerate() {
                    if mask & (1 << s) != 0 {
                        let d = point_segment_distance(p, seg.0, seg.1);
                        if d < dist {
                            dist = d;
                        }
                    }
                }
                let stroke = 1.0 - (dist / 1.6).powi(2);
                let mut v = intensity * stroke.max(0.0);
                let noise: f64 = rng.sample(StandardNormal);
                v += 0.05 * noise;
                data.push((2.0 * v - 1.0).clamp(-1.0, 1.0));
            }
        }
        labels.push(y);
    }
    LabeledDataset::new(Tensor::from_vec(&[n, 784], data)?, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_is_balanced_in_domain_and_seeded() {
        let a = two_moons(400, 0.1, 5).unwrap();
        let b = two_moons(400, 0.1, 5).unwrap();
        let c = two_moons(400, 0.1, 6).unwrap();
        assert_eq!(a.inputs(), b.inputs());
        assert_ne!(a.inputs(), c.inputs());
        assert_eq!(a.labels().iter().filter(|&&y| y == 0).count(), 200);
        assert!(a.inputs().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn split_partitions_without_overlap() {
        let d = two_moons(100, 0.1, 1).unwrap();
        let (train, eval) = d.split(30, 9).unwrap();
        assert_eq!(train.len(), 70);
        assert_eq!(eval.len(), 30);
        let total_before: f64 = d.inputs().data().iter().sum();
        let total_after: f64 =
            train.inputs().data().iter().sum::<f64>() + eval.inputs().data().iter().sum::<f64>();
        assert!((total_before - total_after).abs() < 1e-9);
    }

    #[test]
    fn synth_digits_have_structured_class_means() {
        let d = synth_digits(200, 3).unwrap();
        assert_eq!(d.input_shape(), &[784]);
        assert_eq!(d.num_classes(), 10);
        // Digit 1 (two right-side segments) must differ from digit 8 (all
        // segments) in mean pixel mass.
        let ones: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == 1).collect();
        let eights: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == 8).collect();
        let mass = |idx: &[usize]| -> f64 {
            idx.iter()
                .map(|&i| d.inputs().row(i).iter().sum::<f64>())
                .sum::<f64>()
                / idx.len() as f64
        };
        assert!(mass(&eights) > mass(&ones) + 10.0);
    }

    #[test]
    fn blobs_cover_k_classes() {
        let d = gaussian_blobs_2d(90, 3, 0.05, 2).unwrap();
        assert_eq!(d.num_classes(), 3);
        for y in 0..3 {
            assert_eq!(d.labels().iter().filter(|&&l| l == y).count(), 30);
        }
    }
}
