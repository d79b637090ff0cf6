//! Non-linear layer operations as forward/backward pairs.
//!
//! Each forward returns whatever its backward (and the deconv pass) needs:
//! max-pool and SPP return their switches, dropout its mask, batch
//! normalization its normalized activations and statistics. ReLU and LRN
//! backwards recompute from the stored input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Element, Tensor};

/// Whether stochastic and batch-statistics layers behave as in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub fn relu_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Zeroes the gradient wherever the forward input was `<= 0`.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad.shape() {
        return Err(invalid!(
            "relu gradient shape {:?} does not match input {:?}",
            grad.shape(),
            input.shape()
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn new(window: usize, stride: usize) -> Self {
        Self { window, stride }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 {
            return Err(invalid!("degenerate pooling geometry {self:?}"));
        }
        if self.window > h || self.window > w {
            return Err(invalid!("pool window {} larger than input {h}x{w}", self.window));
        }
        Ok(((h - self.window) / self.stride + 1, (w - self.window) / self.stride + 1))
    }
}

/// Argmax locations recorded by a max-pooling pass: for every output
/// element, the flat index of the input element it copied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSwitches {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Max over `[y0, y1) × [x0, x1)` of one plane; first maximum in row-major
/// scan order wins ties.
fn window_argmax<T: Element>(plane: &[T], w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> (usize, T) {
    let mut best_idx = y0 * w + x0;
    let mut best = plane[best_idx];
    for y in y0..y1 {
        for x in x0..x1 {
            let v = plane[y * w + x];
            if v > best {
                best = v;
                best_idx = y * w + x;
            }
        }
    }
    (best_idx, best)
}

pub fn maxpool_forward<T: Element>(x: &Tensor<T>, geom: &PoolGeometry) -> Result<(Tensor<T>, PoolSwitches)> {
    let [n, c, h, w] = x.dims4()?;
    let (oh, ow) = geom.output_size(h, w)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut indices = Vec::with_capacity(n * c * oh * ow);
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * geom.stride, ox * geom.stride);
                let (idx, v) = window_argmax(plane, w, y0, y0 + geom.window, x0, x0 + geom.window);
                out.push(v);
                indices.push(base + idx);
            }
        }
    }
    let shape = [n, c, oh, ow];
    Ok((
        Tensor::new(&shape, out)?,
        PoolSwitches {
            input_shape: x.shape().to_vec(),
            output_shape: shape.to_vec(),
            indices,
        },
    ))
}

/// Routes each output gradient to its recorded switch location. Also serves
/// as the unpooling step of deconv visualization.
pub fn maxpool_backward<T: Element>(switches: &PoolSwitches, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if grad.shape() != switches.output_shape.as_slice() {
        return Err(invalid!(
            "pool gradient shape {:?} does not match pooled output {:?}",
            grad.shape(),
            switches.output_shape
        ));
    }
    let mut out = Tensor::zeros(&switches.input_shape);
    let data = out.data_mut();
    for (&idx, &g) in switches.indices.iter().zip(grad.data()) {
        data[idx] = data[idx] + g;
    }
    Ok(out)
}

/// Local response normalization across channels:
/// `y_c = x_c / (k + (alpha/n)·Σ_{|c'-c| <= n/2} x_{c'}²)^beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrnParams {
    pub size: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            size: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.size == 0 || self.size.is_multiple_of(2) {
            return Err(invalid!("LRN size must be odd, got {}", self.size));
        }
        if self.size > 2 * channels - 1 {
            return Err(invalid!("LRN size {} exceeds 2·C−1 for {channels} channels", self.size));
        }
        Ok(())
    }

    /// Per-element denominators `k + (alpha/n)·Σ x²` (before the power).
    fn scales<T: Element>(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let [n, c, h, w] = x.dims4()?;
        self.validate(c)?;
        let half = self.size / 2;
        let hw = h * w;
        let coeff = self.alpha / self.size as f64;
        let mut scale = vec![0.0f64; x.len()];
        for b in 0..n {
            let img = &x.data()[b * c * hw..(b + 1) * c * hw];
            for ch in 0..c {
                let lo = ch.saturating_sub(half);
                let hi = (ch + half).min(c - 1);
                let dst = &mut scale[b * c * hw + ch * hw..b * c * hw + (ch + 1) * hw];
                for nb in lo..=hi {
                    for (s, &v) in dst.iter_mut().zip(&img[nb * hw..(nb + 1) * hw]) {
                        let v = v.as_f64();
                        *s += v * v;
                    }
                }
                for s in dst.iter_mut() {
                    *s = self.k + coeff * *s;
                }
            }
        }
        Ok(scale)
    }
}

pub fn lrn_forward<T: Element>(x: &Tensor<T>, params: &LrnParams) -> Result<Tensor<T>> {
    let scale = params.scales(x)?;
    let data = x
        .data()
        .iter()
        .zip(&scale)
        .map(|(&v, &s)| T::from_f64(v.as_f64() * s.powf(-params.beta)))
        .collect();
    Tensor::new(x.shape(), data)
}

/// `dL/dx_j = g_j·s_j^(−β) − (2αβ/n)·x_j·Σ_{c ∋ j} g_c·x_c·s_c^(−β−1)`.
pub fn lrn_backward<T: Element>(input: &Tensor<T>, params: &LrnParams, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad.shape() {
        return Err(invalid!(
            "LRN gradient shape {:?} does not match input {:?}",
            grad.shape(),
            input.shape()
        ));
    }
    let [n, c, h, w] = input.dims4()?;
    let scale = params.scales(input)?;
    let hw = h * w;
    let half = params.size / 2;
    let coeff = 2.0 * params.alpha * params.beta / params.size as f64;
    // t_c = g_c · x_c · s_c^(−β−1)
    let t: Vec<f64> = input
        .data()
        .iter()
        .zip(grad.data())
        .zip(&scale)
        .map(|((&x, &g), &s)| g.as_f64() * x.as_f64() * s.powf(-params.beta - 1.0))
        .collect();
    let mut out = vec![T::zero(); input.len()];
    for b in 0..n {
        let base = b * c * hw;
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            for p in 0..hw {
                let i = base + ch * hw + p;
                let mut acc = 0.0;
                for nb in lo..=hi {
                    acc += t[base + nb * hw + p];
                }
                let direct = grad.data()[i].as_f64() * scale[i].powf(-params.beta);
                out[i] = T::from_f64(direct - coeff * input.data()[i].as_f64() * acc);
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Kept-unit mask of an inverted-dropout pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    keep: f64,
    kept: Vec<bool>,
}

impl DropoutMask {
    pub fn new(keep: f64, kept: Vec<bool>) -> Result<Self> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(invalid!("dropout keep probability {keep} outside (0, 1]"));
        }
        Ok(Self { keep, kept })
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept.iter().filter(|&&k| k).count() as f64 / self.kept.len() as f64
    }

    /// `x·mask/keep`; used by both the forward and backward passes.
    pub fn apply<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.len() != self.kept.len() {
            return Err(invalid!(
                "dropout mask of {} elements applied to tensor {:?}",
                self.kept.len(),
                x.shape()
            ));
        }
        let inv = T::from_f64(1.0 / self.keep);
        let data = x
            .data()
            .iter()
            .zip(&self.kept)
            .map(|(&v, &k)| if k { v * inv } else { T::zero() })
            .collect();
        Tensor::new(x.shape(), data)
    }
}

/// Inverted dropout. In eval mode the input is returned unchanged and no
/// mask is produced.
pub fn dropout_forward<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    keep: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<DropoutMask>)> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(invalid!("dropout keep probability {keep} outside (0, 1]"));
    }
    match mode {
        Mode::Eval => Ok((x.clone(), None)),
        Mode::Train => {
            let kept = if keep >= 1.0 {
                vec![true; x.len()]
            } else {
                (0..x.len()).map(|_| rng.random::<f64>() < keep).collect()
            };
            let mask = DropoutMask::new(keep, kept)?;
            Ok((mask.apply(x)?, Some(mask)))
        }
    }
}

pub fn dropout_backward<T: Element>(mask: Option<&DropoutMask>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    match mask {
        Some(m) => m.apply(grad),
        None => Ok(grad.clone()),
    }
}

/// Learnable scale/shift and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(invalid!("batch-norm epsilon must be positive, got {eps}"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(invalid!("batch-norm momentum {momentum} outside [0, 1]"));
        }
        Ok(Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps,
            momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving average update from a train-mode pass:
    /// `running ← momentum·running + (1 − momentum)·batch`, with the
    /// unbiased batch variance.
    pub fn absorb(&mut self, cache: &BatchNormCache<T>) {
        let m = self.momentum;
        let count = cache.count as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = T::from_f64(m * rm.as_f64() + (1.0 - m) * cache.mean[c]);
            let rv = &mut self.running_var.data_mut()[c];
            *rv = T::from_f64((m * rv.as_f64() + (1.0 - m) * cache.var[c] * unbias).max(0.0));
        }
    }
}

/// Saved quantities of a train-mode batch-norm pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormCache<T = f32> {
    pub x_hat: Tensor<T>,
    pub mean: Vec<f64>,
    /// Population (biased) batch variance per channel.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Values per channel statistic (N·H·W).
    pub count: usize,
}

/// `(batch, channels, spatial)` for NCHW or N×F tensors.
fn bn_layout<T: Element>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h * w)),
        [n, f] => Ok((n, f, 1)),
        _ => Err(invalid!("batch norm expects NCHW or N×F, got {:?}", x.shape())),
    }
}

pub fn batchnorm_forward<T: Element>(
    x: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let (n, c, hw) = bn_layout(x)?;
    if c != state.channels() {
        return Err(invalid!(
            "batch norm has {} channels, input {:?}",
            state.channels(),
            x.shape()
        ));
    }
    let idx = |b: usize, ch: usize, p: usize| (b * c + ch) * hw + p;
    let data = x.data();
    let mut out = vec![T::zero(); x.len()];
    match mode {
        Mode::Eval => {
            for ch in 0..c {
                let mean = state.running_mean.data()[ch].as_f64();
                let inv = 1.0 / (state.running_var.data()[ch].as_f64() + state.eps).sqrt();
                let (g, bt) = (state.gamma.data()[ch].as_f64(), state.beta.data()[ch].as_f64());
                for b in 0..n {
                    for p in 0..hw {
                        let i = idx(b, ch, p);
                        out[i] = T::from_f64(g * (data[i].as_f64() - mean) * inv + bt);
                    }
                }
            }
            Ok((Tensor::new(x.shape(), out)?, None))
        }
        Mode::Train => {
            if n < 2 {
                return Err(invalid!("train-mode batch norm needs a batch of at least 2, got {n}"));
            }
            let count = n * hw;
            let mut x_hat = vec![T::zero(); x.len()];
            let mut means = vec![0.0; c];
            let mut vars = vec![0.0; c];
            let mut inv_stds = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    for p in 0..hw {
                        sum += data[idx(b, ch, p)].as_f64();
                    }
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    for p in 0..hw {
                        let d = data[idx(b, ch, p)].as_f64() - mean;
                        sq += d * d;
                    }
                }
                let var = sq / count as f64;
                let inv = 1.0 / (var + state.eps).sqrt();
                let (g, bt) = (state.gamma.data()[ch].as_f64(), state.beta.data()[ch].as_f64());
                for b in 0..n {
                    for p in 0..hw {
                        let i = idx(b, ch, p);
                        let xh = (data[i].as_f64() - mean) * inv;
                        x_hat[i] = T::from_f64(xh);
                        out[i] = T::from_f64(g * xh + bt);
                    }
                }
                means[ch] = mean;
                vars[ch] = var;
                inv_stds[ch] = inv;
            }
            Ok((
                Tensor::new(x.shape(), out)?,
                Some(BatchNormCache {
                    x_hat: Tensor::new(x.shape(), x_hat)?,
                    mean: means,
                    var: vars,
                    inv_std: inv_stds,
                    count,
                }),
            ))
        }
    }
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for a train-mode pass.
pub fn batchnorm_backward<T: Element>(
    cache: &BatchNormCache<T>,
    state: &BatchNormState<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad.shape() != cache.x_hat.shape() {
        return Err(invalid!(
            "batch-norm gradient shape {:?} does not match {:?}",
            grad.shape(),
            cache.x_hat.shape()
        ));
    }
    let (n, c, hw) = bn_layout(grad)?;
    let idx = |b: usize, ch: usize, p: usize| (b * c + ch) * hw + p;
    let m = cache.count as f64;
    let g = grad.data();
    let xh = cache.x_hat.data();
    let mut dx = vec![T::zero(); grad.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            for p in 0..hw {
                let i = idx(b, ch, p);
                sum_g += g[i].as_f64();
                sum_gx += g[i].as_f64() * xh[i].as_f64();
            }
        }
        dgamma[ch] = T::from_f64(sum_gx);
        dbeta[ch] = T::from_f64(sum_g);
        let gamma = state.gamma.data()[ch].as_f64();
        let k = gamma * cache.inv_std[ch] / m;
        for b in 0..n {
            for p in 0..hw {
                let i = idx(b, ch, p);
                let v = k * (m * g[i].as_f64() - sum_g - xh[i].as_f64() * sum_gx);
                dx[i] = T::from_f64(v);
            }
        }
    }
    Ok((
        Tensor::new(grad.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

/// Spatial pyramid max pooling: for each level `l`, an `l×l` grid of bins
/// where bin `i` spans rows `floor(i·H/l) ..= floor((i+1)·H/l) − 1` (columns
/// likewise). Output is `N × (C·Σ l²)`, levels in the given order and
/// channel-major within a level.
pub fn spp_forward<T: Element>(x: &Tensor<T>, levels: &[usize]) -> Result<(Tensor<T>, PoolSwitches)> {
    let [n, c, h, w] = x.dims4()?;
    validate_spp_levels(levels)?;
    let max_level = *levels.iter().max().unwrap_or(&1);
    if h < max_level || w < max_level {
        return Err(invalid!(
            "SPP level {max_level} needs at least {max_level}x{max_level} input, got {h}x{w}"
        ));
    }
    let per_item = spp_output_len(c, levels);
    let mut out = Vec::with_capacity(n * per_item);
    let mut indices = Vec::with_capacity(n * per_item);
    for b in 0..n {
        for &l in levels {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let plane = &x.data()[base..base + h * w];
                for i in 0..l {
                    let (y0, y1) = (i * h / l, (i + 1) * h / l);
                    for j in 0..l {
                        let (x0, x1) = (j * w / l, (j + 1) * w / l);
                        let (idx, v) = window_argmax(plane, w, y0, y1, x0, x1);
                        out.push(v);
                        indices.push(base + idx);
                    }
                }
            }
        }
    }
    let shape = [n, per_item];
    Ok((
        Tensor::new(&shape, out)?,
        PoolSwitches {
            input_shape: x.shape().to_vec(),
            output_shape: shape.to_vec(),
            indices,
        },
    ))
}

pub fn spp_backward<T: Element>(switches: &PoolSwitches, grad: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool_backward(switches, grad)
}

pub fn spp_output_len(channels: usize, levels: &[usize]) -> usize {
    channels * levels.iter().map(|l| l * l).sum::<usize>()
}

pub fn validate_spp_levels(levels: &[usize]) -> Result<()> {
    if levels.is_empty() || levels.contains(&0) {
        return Err(invalid!("SPP levels must be non-empty and each >= 1, got {levels:?}"));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, c] = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::from_f64(e / total)));
    }
    Tensor::new(logits.shape(), out)
}

/// Softmax probabilities, mean cross-entropy loss over the batch, and the
/// gradient of that mean loss: `(probs − onehot(label)) / N`.
pub struct SoftmaxXent<T = f32> {
    pub probs: Tensor<T>,
    pub loss: f64,
    pub grad: Tensor<T>,
}

pub fn softmax_xent<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxXent<T>> {
    let [n, c] = logits.dims2()?;
    if labels.len() != n {
        return Err(invalid!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(invalid!("label {bad} out of range for {c} classes"));
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
    }
    let scale = 1.0 / n as f64;
    let mut grad = probs.clone();
    for (b, &label) in labels.iter().enumerate() {
        for k in 0..c {
            let i = b * c + k;
            let onehot = if k == label { 1.0 } else { 0.0 };
            grad.data_mut()[i] = T::from_f64((probs.data()[i].as_f64() - onehot) * scale);
        }
    }
    Ok(SoftmaxXent {
        probs,
        loss: loss * scale,
        grad,
    })
}
