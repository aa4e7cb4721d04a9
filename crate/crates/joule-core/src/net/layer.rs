//! Individual layers: dense, 3x3 convolution, batch norm, ReLU.
//!
//! Layers operate on batched tensors (leading axis = batch) and hand back a
//! cache holding exactly what their backward pass needs. Batch-norm backward
//! in batch-statistics mode propagates through the batch mean and variance,
//! so its input gradient couples every sample in the batch.

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

/// How batch-norm layers normalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with statistics of the current batch.
    TrainBatchStats,
    /// Normalize with frozen running statistics; forward is a pure function.
    EvalRunningStats,
}

#[derive(Clone, Debug)]
pub struct Dense {
    /// Weight matrix `[out, in]`.
    pub w: Tensor,
    /// Bias vector `[out]`.
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct Conv3x3 {
    /// Kernel `[out_ch, in_ch, 3, 3]`, stride 1, zero padding 1.
    pub w: Tensor,
    /// Bias vector `[out_ch]`.
    pub b: Tensor,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// EMA weight on the fresh batch statistics, in (0, 1).
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Conv3x3(Conv3x3),
    BatchNorm(BatchNorm),
    Relu,
}

/// Per-layer backward state captured during a forward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Dense {
        input: Tensor,
    },
    Conv {
        input: Tensor,
    },
    BatchNorm {
        /// Normalized activations, same shape as the layer input.
        xhat: Tensor,
        /// Per-feature `1 / sqrt(var + eps)` actually used.
        inv_std: Tensor,
        /// Batch statistics (empty in running-stats mode).
        batch_mean: Tensor,
        batch_var: Tensor,
        used_batch_stats: bool,
    },
    Relu {
        input: Tensor,
    },
}

/// Parameter gradients for one layer, shapes mirroring the parameters.
#[derive(Clone, Debug)]
pub enum LayerGrads {
    Dense { dw: Tensor, db: Tensor },
    Conv { dw: Tensor, db: Tensor },
    BatchNorm { dgamma: Tensor, dbeta: Tensor },
    None,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv3x3(_) => "conv3x3",
            Layer::BatchNorm(_) => "batch-norm",
            Layer::Relu => "relu",
        }
    }

    /// Output sample shape for a given input sample shape, validating
    /// compatibility.
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                let flat: usize = in_shape.iter().product();
                if flat != d.w.shape()[1] {
                    return Err(Error::ShapeMismatch {
                        context: "dense input",
                        expected: vec![d.w.shape()[1]],
                        got: in_shape.to_vec(),
                    });
                }
                Ok(vec![d.w.shape()[0]])
            }
            Layer::Conv3x3(c) => {
                if in_shape.len() != 3 || in_shape[0] != c.w.shape()[1] {
                    return Err(Error::ShapeMismatch {
                        context: "conv input",
                        expected: vec![c.w.shape()[1], 0, 0],
                        got: in_shape.to_vec(),
                    });
                }
                Ok(vec![c.w.shape()[0], in_shape[1], in_shape[2]])
            }
            Layer::BatchNorm(bn) => {
                let features = match in_shape.len() {
                    1 => in_shape[0],
                    3 => in_shape[0],
                    _ => {
                        return Err(Error::ShapeMismatch {
                            context: "batch-norm input rank",
                            expected: vec![bn.features()],
                            got: in_shape.to_vec(),
                        })
                    }
                };
                if features != bn.features() {
                    return Err(Error::ShapeMismatch {
                        context: "batch-norm features",
                        expected: vec![bn.features()],
                        got: in_shape.to_vec(),
                    });
                }
                Ok(in_shape.to_vec())
            }
            Layer::Relu => Ok(in_shape.to_vec()),
        }
    }

    /// Batched forward pass. `x` is `[batch, ...in_shape]`.
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Dense(d) => dense_forward(d, x),
            Layer::Conv3x3(c) => conv_forward(c, x),
            Layer::BatchNorm(bn) => bn_forward(bn, x, mode),
            Layer::Relu => {
                let mut out = x.clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok((out, Cache::Relu { input: x.clone() }))
            }
        }
    }

    /// Batched backward pass. Returns the input gradient and, when
    /// `want_params` is set, the parameter gradients.
    pub fn backward(
        &self,
        cache: &Cache,
        d_out: &Tensor,
        want_params: bool,
    ) -> Result<(Tensor, LayerGrads)> {
        match (self, cache) {
            (Layer::Dense(d), Cache::Dense { input }) => dense_backward(d, input, d_out, want_params),
            (Layer::Conv3x3(c), Cache::Conv { input }) => conv_backward(c, input, d_out, want_params),
            (Layer::BatchNorm(bn), Cache::BatchNorm { xhat, inv_std, used_batch_stats, .. }) => {
                bn_backward(bn, xhat, inv_std, *used_batch_stats, d_out, want_params)
            }
            (Layer::Relu, Cache::Relu { input }) => {
                let mut d_in = d_out.clone();
                for (g, &v) in d_in.data_mut().iter_mut().zip(input.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                Ok((d_in, LayerGrads::None))
            }
            _ => Err(Error::NonFinite {
                context: "layer/cache kind mismatch",
            }),
        }
    }

    pub fn grads_zeros(&self) -> LayerGrads {
        match self {
            Layer::Dense(d) => LayerGrads::Dense {
                dw: Tensor::zeros(d.w.shape()),
                db: Tensor::zeros(d.b.shape()),
            },
            Layer::Conv3x3(c) => LayerGrads::Conv {
                dw: Tensor::zeros(c.w.shape()),
                db: Tensor::zeros(c.b.shape()),
            },
            Layer::BatchNorm(bn) => LayerGrads::BatchNorm {
                dgamma: Tensor::zeros(bn.gamma.shape()),
                dbeta: Tensor::zeros(bn.beta.shape()),
            },
            Layer::Relu => LayerGrads::None,
        }
    }

    /// Parameter tensors of this layer, in serialization order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.w, &d.b],
            Layer::Conv3x3(c) => vec![&c.w, &c.b],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Relu => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.w, &mut d.b],
            Layer::Conv3x3(c) => vec![&mut c.w, &mut c.b],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Relu => vec![],
        }
    }
}

impl LayerGrads {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerGrads::Dense { dw, db } | LayerGrads::Conv { dw, db } => vec![dw, db],
            LayerGrads::BatchNorm { dgamma, dbeta } => vec![dgamma, dbeta],
            LayerGrads::None => vec![],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerGrads::Dense { dw, db } | LayerGrads::Conv { dw, db } => vec![dw, db],
            LayerGrads::BatchNorm { dgamma, dbeta } => vec![dgamma, dbeta],
            LayerGrads::None => vec![],
        }
    }
}

// ── dense ────────────────────────────────────────────────────────────────

fn dense_forward(d: &Dense, x: &Tensor) -> Result<(Tensor, Cache)> {
    let batch = x.batch_len();
    let (out_dim, in_dim) = (d.w.shape()[0], d.w.shape()[1]);
    let flat: usize = x.sample_shape().iter().product();
    same_shape("dense forward", &[in_dim], &[flat])?;

    let mut out = Tensor::zeros(&[batch, out_dim]);
    for bi in 0..batch {
        let xi = x.row(bi);
        let oi = out.row_mut(bi);
        for o in 0..out_dim {
            let wrow = &d.w.data()[o * in_dim..(o + 1) * in_dim];
            let mut acc = d.b.data()[o];
            for i in 0..in_dim {
                acc += wrow[i] * xi[i];
            }
            oi[o] = acc;
        }
    }
    Ok((out, Cache::Dense { input: x.clone() }))
}

fn dense_backward(
    d: &Dense,
    input: &Tensor,
    d_out: &Tensor,
    want_params: bool,
) -> Result<(Tensor, LayerGrads)> {
    let batch = input.batch_len();
    let (out_dim, in_dim) = (d.w.shape()[0], d.w.shape()[1]);
    same_shape("dense backward", &[batch, out_dim], d_out.shape())?;

    let mut d_in = Tensor::zeros(input.shape());
    for bi in 0..batch {
        let go = d_out.row(bi);
        let gi = d_in.row_mut(bi);
        for o in 0..out_dim {
            let g = go[o];
            if g == 0.0 {
                continue;
            }
            let wrow = &d.w.data()[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                gi[i] += g * wrow[i];
            }
        }
    }

    if !want_params {
        return Ok((d_in, LayerGrads::None));
    }
    let mut dw = Tensor::zeros(d.w.shape());
    let mut db = Tensor::zeros(d.b.shape());
    for bi in 0..batch {
        let xi = input.row(bi);
        let go = d_out.row(bi);
        for o in 0..out_dim {
            let g = go[o];
            db.data_mut()[o] += g;
            if g == 0.0 {
                continue;
            }
            let wrow = &mut dw.data_mut()[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                wrow[i] += g * xi[i];
            }
        }
    }
    Ok((d_in, LayerGrads::Dense { dw, db }))
}

// ── conv 3x3, stride 1, zero padding 1 ───────────────────────────────────

fn conv_forward(c: &Conv3x3, x: &Tensor) -> Result<(Tensor, Cache)> {
    let batch = x.batch_len();
    let s = x.sample_shape();
    let (oc, ic) = (c.w.shape()[0], c.w.shape()[1]);
    if s.len() != 3 || s[0] != ic {
        return Err(Error::ShapeMismatch {
            context: "conv forward",
            expected: vec![ic, 0, 0],
            got: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut out = Tensor::zeros(&[batch, oc, h, w]);

    let kidx = |o: usize, i: usize, ky: usize, kx: usize| ((o * ic + i) * 3 + ky) * 3 + kx;
    for bi in 0..batch {
        let xi = x.row(bi);
        let oi = out.row_mut(bi);
        for o in 0..oc {
            let bias = c.b.data()[o];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias;
                    for i in 0..ic {
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += c.w.data()[kidx(o, i, ky, kx)]
                                    * xi[(i * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    oi[(o * h + y) * w + xx] = acc;
                }
            }
        }
    }
    Ok((out, Cache::Conv { input: x.clone() }))
}

fn conv_backward(
    c: &Conv3x3,
    input: &Tensor,
    d_out: &Tensor,
    want_params: bool,
) -> Result<(Tensor, LayerGrads)> {
    let batch = input.batch_len();
    let s = input.sample_shape();
    let (oc, ic, h, w) = (c.w.shape()[0], c.w.shape()[1], s[1], s[2]);
    same_shape("conv backward", &[batch, oc, h, w], d_out.shape())?;

    let kidx = |o: usize, i: usize, ky: usize, kx: usize| ((o * ic + i) * 3 + ky) * 3 + kx;
    let mut d_in = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(c.w.shape());
    let mut db = Tensor::zeros(c.b.shape());

    for bi in 0..batch {
        let xi = input.row(bi);
        let go = d_out.row(bi);
        let gi = d_in.row_mut(bi);
        for o in 0..oc {
            for y in 0..h {
                for xx in 0..w {
                    let g = go[(o * h + y) * w + xx];
                    if g == 0.0 {
                        continue;
                    }
                    db.data_mut()[o] += g;
                    for i in 0..ic {
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let src = (i * h + sy as usize) * w + sx as usize;
                                gi[src] += g * c.w.data()[kidx(o, i, ky, kx)];
                                dw.data_mut()[kidx(o, i, ky, kx)] += g * xi[src];
                            }
                        }
                    }
                }
            }
        }
    }

    let grads = if want_params {
        LayerGrads::Conv { dw, db }
    } else {
        LayerGrads::None
    };
    Ok((d_in, grads))
}

// ── batch norm ───────────────────────────────────────────────────────────

/// Iterates a batched tensor as (feature, element) pairs. For rank-1 samples
/// the feature axis is the only axis; for rank-3 samples it is the channel
/// axis and elements run over batch and both spatial axes.
fn bn_geometry(x: &Tensor, features: usize) -> Result<(usize, usize)> {
    let s = x.sample_shape();
    match s.len() {
        1 if s[0] == features => Ok((features, 1)),
        3 if s[0] == features => Ok((features, s[1] * s[2])),
        _ => Err(Error::ShapeMismatch {
            context: "batch-norm geometry",
            expected: vec![features],
            got: s.to_vec(),
        }),
    }
}

fn bn_forward(bn: &BatchNorm, x: &Tensor, mode: BnMode) -> Result<(Tensor, Cache)> {
    let features = bn.features();
    let (_, spatial) = bn_geometry(x, features)?;
    let batch = x.batch_len();
    let count = (batch * spatial) as f64;

    let use_batch = mode == BnMode::TrainBatchStats;
    let (mean, var) = if use_batch {
        let mut mean = vec![0.0f64; features];
        let mut var = vec![0.0f64; features];
        for bi in 0..batch {
            let xi = x.row(bi);
            for f in 0..features {
                for e in 0..spatial {
                    mean[f] += xi[f * spatial + e];
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for bi in 0..batch {
            let xi = x.row(bi);
            for f in 0..features {
                for e in 0..spatial {
                    let d = xi[f * spatial + e] - mean[f];
                    var[f] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= count;
        }
        (mean, var)
    } else {
        (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec())
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();

    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..batch {
        let xi = x.row(bi);
        let xh = xhat.row_mut(bi);
        for f in 0..features {
            for e in 0..spatial {
                xh[f * spatial + e] = (xi[f * spatial + e] - mean[f]) * inv_std[f];
            }
        }
        let oi = out.row_mut(bi);
        for f in 0..features {
            let (g, b) = (bn.gamma.data()[f], bn.beta.data()[f]);
            for e in 0..spatial {
                oi[f * spatial + e] = g * xh[f * spatial + e] + b;
            }
        }
    }

    let (batch_mean, batch_var) = if use_batch {
        (
            Tensor::from_vec(&[features], mean).expect("bn mean shape"),
            Tensor::from_vec(&[features], var).expect("bn var shape"),
        )
    } else {
        (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
    };

    Ok((
        out,
        Cache::BatchNorm {
            xhat,
            inv_std: Tensor::from_vec(&[features], inv_std).expect("bn inv_std shape"),
            batch_mean,
            batch_var,
            used_batch_stats: use_batch,
        },
    ))
}

fn bn_backward(
    bn: &BatchNorm,
    xhat: &Tensor,
    inv_std: &Tensor,
    used_batch_stats: bool,
    d_out: &Tensor,
    want_params: bool,
) -> Result<(Tensor, LayerGrads)> {
    let features = bn.features();
    let (_, spatial) = bn_geometry(xhat, features)?;
    let batch = xhat.batch_len();
    same_shape("batch-norm backward", xhat.shape(), d_out.shape())?;
    let count = (batch * spatial) as f64;

    // Per-feature reductions used by both the parameter gradients and the
    // coupled input gradient.
    let mut sum_dy = vec![0.0f64; features];
    let mut sum_dy_xhat = vec![0.0f64; features];
    for bi in 0..batch {
        let go = d_out.row(bi);
        let xh = xhat.row(bi);
        for f in 0..features {
            for e in 0..spatial {
                let idx = f * spatial + e;
                sum_dy[f] += go[idx];
                sum_dy_xhat[f] += go[idx] * xh[idx];
            }
        }
    }

    let mut d_in = Tensor::zeros(xhat.shape());
    for bi in 0..batch {
        let go = d_out.row(bi);
        let xh = xhat.row(bi);
        let gi = d_in.row_mut(bi);
        for f in 0..features {
            let scale = bn.gamma.data()[f] * inv_std.data()[f];
            for e in 0..spatial {
                let idx = f * spatial + e;
                gi[idx] = if used_batch_stats {
                    scale * (go[idx] - sum_dy[f] / count - xh[idx] * sum_dy_xhat[f] / count)
                } else {
                    scale * go[idx]
                };
            }
        }
    }

    let grads = if want_params {
        LayerGrads::BatchNorm {
            dgamma: Tensor::from_vec(&[features], sum_dy_xhat).expect("bn dgamma shape"),
            dbeta: Tensor::from_vec(&[features], sum_dy).expect("bn dbeta shape"),
        }
    } else {
        LayerGrads::None
    };
    Ok((d_in, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_2x3() -> Dense {
        Dense {
            w: Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap(),
            b: Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap(),
        }
    }

    #[test]
    fn dense_forward_matches_hand_computation() {
        let d = dense_2x3();
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -1.0, 2.0]).unwrap();
        let (out, _) = Layer::Dense(d).forward(&x, BnMode::EvalRunningStats).unwrap();
        // row0: 1 - 2 + 6 + 0.1 = 5.1 ; row1: -1 - 0.5 + 0 - 0.2 = -1.7
        assert!((out.data()[0] - 5.1).abs() < 1e-12);
        assert!((out.data()[1] + 1.7).abs() < 1e-12);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::from_vec(&[1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let layer = Layer::Relu;
        let (out, cache) = layer.forward(&x, BnMode::EvalRunningStats).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        let ones = Tensor::filled(&[1, 3], 1.0);
        let (d_in, _) = layer.backward(&cache, &ones, false).unwrap();
        assert_eq!(d_in.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn bn_eval_mode_is_pure_and_repeatable() {
        let mut bn = BatchNorm::new(2);
        bn.running_mean = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        bn.running_var = Tensor::from_vec(&[2], vec![4.0, 1.0]).unwrap();
        let layer = Layer::BatchNorm(bn);
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 2.0, 1.0]).unwrap();
        let (a, _) = layer.forward(&x, BnMode::EvalRunningStats).unwrap();
        let (b, _) = layer.forward(&x, BnMode::EvalRunningStats).unwrap();
        assert_eq!(a, b);
        // feature 0: (1 - 0.5)/sqrt(4 + 1e-5) ~= 0.25
        assert!((a.data()[0] - 0.25).abs() < 1e-5);
    }

    #[test]
    fn bn_train_mode_normalizes_batch_to_zero_mean_unit_var() {
        let layer = Layer::BatchNorm(BatchNorm::new(1));
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, _) = layer.forward(&x, BnMode::TrainBatchStats).unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / 4.0;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps shrinks the variance slightly
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        // Single in/out channel, kernel with 1 at the center.
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let c = Conv3x3 {
            w,
            b: Tensor::zeros(&[1]),
        };
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, _) = Layer::Conv3x3(c).forward(&x, BnMode::EvalRunningStats).unwrap();
        assert_eq!(out.data(), x.data());
    }
}
