//! Split classifier networks and their gradients.
//!
//! A [`SplitNetwork`] is an ordinary feed-forward classifier with one twist:
//! the first parametrized layer is held separately from the rest (the
//! "body"). The energy of an input is the negative log-sum-exp of the
//! logits, and the split lets a sampler freeze the body's contribution to
//! the energy gradient (the "slack" vector) while it runs several cheap
//! first-layer-only updates.
//!
//! All gradients are exact reverse-mode derivatives, computed by hand per
//! layer; the test suite checks every one of them against central finite
//! differences.

mod layer;

pub use layer::{BatchNorm, BnMode, Cache, Conv3x3, Dense, Layer, LayerGrads};

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct SplitNetwork {
    first_layer: Layer,
    body: Vec<Layer>,
    input_shape: Vec<usize>,
    feature_shape: Vec<usize>,
    num_classes: usize,
}

/// Everything a backward pass needs, captured by one forward pass.
pub struct ForwardCache {
    first: Cache,
    body: Vec<Cache>,
    /// First-layer output, `[batch, ...feature_shape]`.
    pub features: Tensor,
    /// Network output, `[batch, num_classes]`.
    pub logits: Tensor,
}

/// Parameter gradients mirroring a network's layer structure
/// (`layers[0]` = first layer, then the body in order).
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl SplitNetwork {
    /// Validates the layer chain: input → first layer → body → `[num_classes]`.
    /// The body may be empty, in which case the first layer produces the
    /// logits directly.
    pub fn new(
        first_layer: Layer,
        body: Vec<Layer>,
        input_shape: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        let feature_shape = first_layer.out_shape(input_shape)?;
        let mut shape = feature_shape.clone();
        for layer in &body {
            shape = layer.out_shape(&shape)?;
        }
        same_shape("network output", &[num_classes], &shape)?;
        Ok(SplitNetwork {
            first_layer,
            body,
            input_shape: input_shape.to_vec(),
            feature_shape,
            num_classes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn first_layer(&self) -> &Layer {
        &self.first_layer
    }

    pub fn body(&self) -> &[Layer] {
        &self.body
    }

    /// All layers in order, first layer included.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        std::iter::once(&self.first_layer).chain(self.body.iter())
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .flat_map(|l| l.params())
            .map(|t| t.len())
            .sum()
    }

    /// Flat list of parameter tensors in layer order. The order is shared
    /// with [`ParamGrads::tensors`] and the checkpoint format.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.first_layer.params_mut();
        for layer in &mut self.body {
            out.extend(layer.params_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.first_layer.params();
        for layer in &self.body {
            out.extend(layer.params());
        }
        out
    }

    // ── forward ──────────────────────────────────────────────────────────

    /// Full forward pass over a batch, retaining per-layer caches.
    pub fn forward_cached(&self, x: &Tensor, mode: BnMode) -> Result<ForwardCache> {
        self.check_batch_input(x)?;
        let (features, first) = self.first_layer.forward(x, mode)?;
        let mut cur = features.clone();
        let mut body = Vec::with_capacity(self.body.len());
        for layer in &self.body {
            let (next, cache) = layer.forward(&cur, mode)?;
            body.push(cache);
            cur = next;
        }
        Ok(ForwardCache {
            first,
            body,
            features,
            logits: cur,
        })
    }

    /// Logits for a batch `[batch, ...input_shape]`.
    pub fn forward_logits_batch(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        Ok(self.forward_cached(x, mode)?.logits)
    }

    /// Logits for a single sample.
    pub fn forward_logits(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let out = self.forward_logits_batch(&x.unsqueezed(), mode)?;
        Ok(out.sample(0))
    }

    /// Energy of a single sample: `-logsumexp(logits)`. Non-finite logits
    /// yield a NaN energy rather than an error so chain-level divergence
    /// handling can decide what to do.
    pub fn energy(&self, x: &Tensor, mode: BnMode) -> Result<f64> {
        let logits = self.forward_logits(x, mode)?;
        Ok(-log_sum_exp(logits.data()))
    }

    /// Energies for a batch.
    pub fn energy_batch(&self, x: &Tensor, mode: BnMode) -> Result<Vec<f64>> {
        let logits = self.forward_logits_batch(x, mode)?;
        Ok((0..logits.batch_len())
            .map(|i| -log_sum_exp(logits.row(i)))
            .collect())
    }

    // ── input gradients ──────────────────────────────────────────────────

    /// Energy and its exact input gradient for a single sample; one full
    /// forward and one full backward pass.
    pub fn energy_and_grad_input(&self, x: &Tensor, mode: BnMode) -> Result<(f64, Tensor)> {
        let cache = self.forward_cached(&x.unsqueezed(), mode)?;
        let energy = -log_sum_exp(cache.logits.row(0));
        // dE/dlogits = -softmax(logits)
        let mut d_logits = Tensor::zeros(cache.logits.shape());
        let sm = softmax(cache.logits.row(0));
        for (g, s) in d_logits.data_mut().iter_mut().zip(sm) {
            *g = -s;
        }
        let d_input = self.backward_input_only(&cache, &d_logits)?;
        Ok((energy, d_input.sample(0)))
    }

    /// `∇_x E(x)` for a single sample.
    pub fn grad_energy_input(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        Ok(self.energy_and_grad_input(x, mode)?.1)
    }

    /// Slack vector and energy: the energy gradient with respect to the
    /// first layer's output, obtained by one full forward pass and a
    /// backward pass through the body only.
    pub fn slack_and_energy(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, f64)> {
        let cache = self.forward_cached(&x.unsqueezed(), mode)?;
        let energy = -log_sum_exp(cache.logits.row(0));
        let mut d_logits = Tensor::zeros(cache.logits.shape());
        let sm = softmax(cache.logits.row(0));
        for (g, s) in d_logits.data_mut().iter_mut().zip(sm) {
            *g = -s;
        }
        let d_features = self.body_backward_to_features(&cache, &d_logits)?;
        Ok((d_features.sample(0), energy))
    }

    /// `∇_{f0(x)} E` for a single sample.
    pub fn slack(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        Ok(self.slack_and_energy(x, mode)?.0)
    }

    /// Vector-Jacobian product `pᵀ · J_{f0}(x)` through the first layer
    /// only. With a fresh slack `p` this equals the full energy gradient
    /// `∇_x E(x)`, by the chain rule.
    pub fn grad_first_input(&self, x: &Tensor, p: &Tensor, mode: BnMode) -> Result<Tensor> {
        same_shape("slack vector", &self.feature_shape, p.shape())?;
        let xb = x.unsqueezed();
        self.check_batch_input(&xb)?;
        let (_, cache) = self.first_layer.forward(&xb, mode)?;
        let (d_in, _) = self.first_layer.backward(&cache, &p.unsqueezed(), false)?;
        Ok(d_in.sample(0))
    }

    /// Cross-entropy losses and input gradients for a labeled batch,
    /// used by gradient-based attacks.
    pub fn ce_loss_and_grad_input(
        &self,
        x: &Tensor,
        labels: &[usize],
        mode: BnMode,
    ) -> Result<(Vec<f64>, Tensor)> {
        let batch = x.batch_len();
        if labels.len() != batch {
            return Err(Error::ShapeMismatch {
                context: "labels",
                expected: vec![batch],
                got: vec![labels.len()],
            });
        }
        let cache = self.forward_cached(x, mode)?;
        let mut losses = Vec::with_capacity(batch);
        let mut d_logits = Tensor::zeros(cache.logits.shape());
        for bi in 0..batch {
            let y = labels[bi];
            if y >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes: self.num_classes,
                });
            }
            let row = cache.logits.row(bi);
            losses.push(log_sum_exp(row) - row[y]);
            let sm = softmax(row);
            let g = d_logits.row_mut(bi);
            for (c, s) in sm.into_iter().enumerate() {
                g[c] = if c == y { s - 1.0 } else { s };
            }
        }
        let d_input = self.backward_input_only(&cache, &d_logits)?;
        Ok((losses, d_input))
    }

    /// Class probabilities for a batch.
    pub fn probs_batch(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let logits = self.forward_logits_batch(x, mode)?;
        let mut out = Tensor::zeros(logits.shape());
        for bi in 0..logits.batch_len() {
            let sm = softmax(logits.row(bi));
            out.row_mut(bi).copy_from_slice(&sm);
        }
        Ok(out)
    }

    // ── parameter gradients ──────────────────────────────────────────────

    /// Gradient of the joint objective
    /// `mean CE(x_real, y_real) + mean E(x_real) - mean E(x_sampled)`
    /// with respect to every parameter. Returns the cross-entropy part and
    /// the energy-difference part separately; their sum is the update
    /// direction. When `x_sampled` equals `x_real` bitwise, the energy part
    /// is exactly zero.
    pub fn param_grad_joint(
        &self,
        x_real: &Tensor,
        y_real: &[usize],
        x_sampled: &Tensor,
        mode: BnMode,
    ) -> Result<JointGrads> {
        let batch = x_real.batch_len();
        if y_real.len() != batch {
            return Err(Error::ShapeMismatch {
                context: "labels",
                expected: vec![batch],
                got: vec![y_real.len()],
            });
        }
        let cache_r = self.forward_cached(x_real, mode)?;
        let cache_s = self.forward_cached(x_sampled, mode)?;
        let inv_b = 1.0 / batch as f64;
        let inv_bs = 1.0 / x_sampled.batch_len() as f64;

        let mut d_ce = Tensor::zeros(cache_r.logits.shape());
        let mut d_er = Tensor::zeros(cache_r.logits.shape());
        let mut ce_loss = 0.0;
        let mut real_energy = 0.0;
        for bi in 0..batch {
            let y = y_real[bi];
            if y >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes: self.num_classes,
                });
            }
            let row = cache_r.logits.row(bi);
            let lse = log_sum_exp(row);
            ce_loss += (lse - row[y]) * inv_b;
            real_energy += -lse * inv_b;
            let sm = softmax(row);
            let gc = d_ce.row_mut(bi);
            for (c, &s) in sm.iter().enumerate() {
                gc[c] = (if c == y { s - 1.0 } else { s }) * inv_b;
            }
            let ge = d_er.row_mut(bi);
            for (c, &s) in sm.iter().enumerate() {
                ge[c] = -s * inv_b;
            }
        }

        let mut d_es = Tensor::zeros(cache_s.logits.shape());
        let mut sampled_energy = 0.0;
        for bi in 0..x_sampled.batch_len() {
            let row = cache_s.logits.row(bi);
            sampled_energy += -log_sum_exp(row) * inv_bs;
            let sm = softmax(row);
            let g = d_es.row_mut(bi);
            for (c, &s) in sm.iter().enumerate() {
                g[c] = -s * inv_bs;
            }
        }

        let (ce, _) = self.backward_params(&cache_r, &d_ce)?;
        let (g_er, _) = self.backward_params(&cache_r, &d_er)?;
        let (g_es, _) = self.backward_params(&cache_s, &d_es)?;

        let mut energy_diff = g_er;
        energy_diff.add_scaled(&g_es, -1.0);
        let mut total = ce.clone();
        total.add_scaled(&energy_diff, 1.0);

        Ok(JointGrads {
            total,
            cross_entropy: ce,
            energy_diff,
            ce_loss,
            real_energy,
            sampled_energy,
            real_cache: cache_r,
        })
    }

    /// Backward pass through body and first layer, collecting parameter
    /// gradients. Also returns the input gradient.
    pub fn backward_params(
        &self,
        cache: &ForwardCache,
        d_logits: &Tensor,
    ) -> Result<(ParamGrads, Tensor)> {
        let mut grads = vec![LayerGrads::None; self.body.len() + 1];
        let mut d = d_logits.clone();
        for (i, layer) in self.body.iter().enumerate().rev() {
            let (d_in, g) = layer.backward(&cache.body[i], &d, true)?;
            grads[i + 1] = g;
            d = d_in;
        }
        let (d_input, g_first) = self.first_layer.backward(&cache.first, &d, true)?;
        grads[0] = g_first;
        Ok((ParamGrads { layers: grads }, d_input))
    }

    fn backward_input_only(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<Tensor> {
        let mut d = d_logits.clone();
        for (i, layer) in self.body.iter().enumerate().rev() {
            let (d_in, _) = layer.backward(&cache.body[i], &d, false)?;
            d = d_in;
        }
        let (d_input, _) = self.first_layer.backward(&cache.first, &d, false)?;
        Ok(d_input)
    }

    fn body_backward_to_features(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<Tensor> {
        let mut d = d_logits.clone();
        for (i, layer) in self.body.iter().enumerate().rev() {
            let (d_in, _) = layer.backward(&cache.body[i], &d, false)?;
            d = d_in;
        }
        Ok(d)
    }

    /// Folds the batch statistics captured in `cache` into the running
    /// statistics of every batch-norm layer. Call this only for forward
    /// passes over real data; it is the single place running stats mutate.
    pub fn update_bn_running_stats(&mut self, cache: &ForwardCache) {
        let first_cache = std::iter::once(&cache.first);
        let caches = first_cache.chain(cache.body.iter());
        let layers = std::iter::once(&mut self.first_layer).chain(self.body.iter_mut());
        for (layer, lc) in layers.zip(caches) {
            if let (
                Layer::BatchNorm(bn),
                Cache::BatchNorm {
                    batch_mean,
                    batch_var,
                    used_batch_stats: true,
                    ..
                },
            ) = (layer, lc)
            {
                let m = bn.momentum;
                for (r, &b) in bn.running_mean.data_mut().iter_mut().zip(batch_mean.data()) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, &b) in bn.running_var.data_mut().iter_mut().zip(batch_var.data()) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
    }

    fn check_batch_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.sample_shape() != self.input_shape.as_slice()
        {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Result of [`SplitNetwork::param_grad_joint`].
pub struct JointGrads {
    /// `cross_entropy + energy_diff`.
    pub total: ParamGrads,
    pub cross_entropy: ParamGrads,
    /// Gradient of `mean E(x_real) - mean E(x_sampled)`.
    pub energy_diff: ParamGrads,
    pub ce_loss: f64,
    pub real_energy: f64,
    pub sampled_energy: f64,
    /// Forward cache of the real batch, kept so the caller can fold its
    /// batch statistics into the running batch-norm estimates.
    pub real_cache: ForwardCache,
}

impl ParamGrads {
    pub fn zeros_like(net: &SplitNetwork) -> Self {
        let mut layers = vec![net.first_layer.grads_zeros()];
        layers.extend(net.body.iter().map(|l| l.grads_zeros()));
        ParamGrads { layers }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|g| g.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|g| g.tensors_mut()).collect()
    }

    /// `self += scale * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ta, tb) in a.tensors_mut().into_iter().zip(b.tensors()) {
                ta.add_scaled(tb, scale);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0;
        for t in self.tensors() {
            let a = t.max_abs();
            if a.is_nan() {
                return f64::NAN;
            }
            if a > m {
                m = a;
            }
        }
        m
    }
}

// ── numerics ─────────────────────────────────────────────────────────────

/// Max-shifted log-sum-exp. Propagates NaN if any entry is non-finite.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in v {
        if x.is_nan() {
            return f64::NAN;
        }
        if x > m {
            m = x;
        }
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in v {
        if x > m {
            m = x;
        }
    }
    let exps: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ── builders ─────────────────────────────────────────────────────────────

fn he_dense(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Dense {
    let scale = (2.0 / in_dim as f64).sqrt();
    Dense {
        w: Tensor::from_fn(&[out_dim, in_dim], |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        }),
        b: Tensor::zeros(&[out_dim]),
    }
}

fn he_conv(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Conv3x3 {
    let scale = (2.0 / (in_ch * 9) as f64).sqrt();
    Conv3x3 {
        w: Tensor::from_fn(&[out_ch, in_ch, 3, 3], |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        }),
        b: Tensor::zeros(&[out_ch]),
    }
}

/// Multi-layer perceptron classifier. With empty `hidden` this builds a
/// plain linear model (first layer only, empty body).
pub fn mlp(
    input_dim: usize,
    hidden: &[usize],
    num_classes: usize,
    batch_norm: bool,
    rng: &mut impl Rng,
) -> Result<SplitNetwork> {
    if hidden.is_empty() {
        let first = Layer::Dense(he_dense(input_dim, num_classes, rng));
        return SplitNetwork::new(first, vec![], &[input_dim], num_classes);
    }
    let first = Layer::Dense(he_dense(input_dim, hidden[0], rng));
    let mut body = Vec::new();
    let mut prev = hidden[0];
    for (i, &h) in hidden.iter().enumerate() {
        if i > 0 {
            body.push(Layer::Dense(he_dense(prev, h, rng)));
            prev = h;
        }
        if batch_norm {
            body.push(Layer::BatchNorm(BatchNorm::new(h)));
        }
        body.push(Layer::Relu);
    }
    body.push(Layer::Dense(he_dense(prev, num_classes, rng)));
    SplitNetwork::new(first, body, &[input_dim], num_classes)
}

/// Image classifier with a 3x3 convolutional first layer followed by a
/// dense head.
pub fn conv_net(
    input_shape: &[usize; 3],
    channels: usize,
    hidden: &[usize],
    num_classes: usize,
    batch_norm: bool,
    rng: &mut impl Rng,
) -> Result<SplitNetwork> {
    let [c, h, w] = *input_shape;
    let first = Layer::Conv3x3(he_conv(c, channels, rng));
    let mut body = Vec::new();
    if batch_norm {
        body.push(Layer::BatchNorm(BatchNorm::new(channels)));
    }
    body.push(Layer::Relu);
    let mut prev = channels * h * w;
    for &hd in hidden {
        body.push(Layer::Dense(he_dense(prev, hd, rng)));
        if batch_norm {
            body.push(Layer::BatchNorm(BatchNorm::new(hd)));
        }
        body.push(Layer::Relu);
        prev = hd;
    }
    body.push(Layer::Dense(he_dense(prev, num_classes, rng)));
    SplitNetwork::new(first, body, input_shape, num_classes)
}

/// Zeroes the last dense layer of a freshly built classifier, making the
/// initial logits — and with them the energy surface — perfectly flat.
///
/// A random head gives the energy a slope that runs downhill away from
/// the data in most far-field directions, and negative-sample chains
/// slide down that slope faster than the first parameter updates can dam
/// it. Starting flat instead grows the landscape outward from the data,
/// with the chains held nearby the whole way. Apply to fresh networks
/// before training, never to restored checkpoints.
pub fn zero_output_layer(net: &mut SplitNetwork) {
    let head = net
        .body
        .iter_mut()
        .rev()
        .chain(std::iter::once(&mut net.first_layer))
        .find_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        });
    if let Some(d) = head {
        for v in d.w.data_mut().iter_mut() {
            *v = 0.0;
        }
        for v in d.b.data_mut().iter_mut() {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn zeroed_head_means_flat_logits_and_flat_energy() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut net = mlp(2, &[8, 8], 3, true, &mut rng).unwrap();
        let first_before: Vec<f64> = net.params()[0].data().to_vec();
        zero_output_layer(&mut net);
        assert_eq!(net.params()[0].data(), first_before, "body init untouched");
        let x = Tensor::from_vec(&[2, 2], vec![0.4, -1.3, 2.0, 0.7]).unwrap();
        let logits = net.forward_logits_batch(&x, BnMode::EvalRunningStats).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        for e in net.energy_batch(&x, BnMode::EvalRunningStats).unwrap() {
            assert_eq!(e, -(3.0f64.ln()));
        }
    }

    #[test]
    fn zeroing_a_bodyless_model_flattens_its_only_layer() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut net = mlp(5, &[], 4, false, &mut rng).unwrap();
        zero_output_layer(&mut net);
        let x = Tensor::from_vec(&[1, 5], vec![1.0, -2.0, 0.5, 3.0, -0.1]).unwrap();
        let logits = net.forward_logits_batch(&x, BnMode::EvalRunningStats).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }
}
