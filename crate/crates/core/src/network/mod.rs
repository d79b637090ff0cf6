//! Declarative architectures, parameter storage, and whole-network
//! forward/backward passes.

mod alexnet;
mod checkpoint;

pub use alexnet::{
    build_alexnet, build_alexnet_with_geometry, edit_depth, scale_for_input, ArchFlags, InputGeometry, Width,
    BASE_CONV_WIDTHS, BASE_FC_WIDTHS, SUPPORTED_INPUT_SIZES,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::layers::{self, BatchNormCache, BatchNormState, DropoutMask, LrnParams, Mode, PoolGeometry, PoolSwitches};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Fc {
        units: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Lrn(LrnParams),
    Dropout {
        keep: f64,
    },
    BatchNorm {
        eps: f64,
        momentum: f64,
    },
    Spp {
        levels: Vec<usize>,
    },
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerConfig {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn conv_geometry(&self) -> Option<ConvGeometry> {
        match self.kind {
            LayerKind::Conv {
                kernel, stride, pad, ..
            } => Some(ConvGeometry::square(kernel, stride, pad)),
            _ => None,
        }
    }

    pub fn pool_geometry(&self) -> Option<PoolGeometry> {
        match self.kind {
            LayerKind::MaxPool { window, stride } => Some(PoolGeometry::new(window, stride)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Ordered layer list plus the input shape and class count it was
/// designed for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: InputShape,
    pub classes: usize,
    pub layers: Vec<LayerConfig>,
}

impl ArchSpec {
    /// Per-layer output shapes (without batch dim) for an input of `h×w`.
    pub fn shapes_for(&self, h: usize, w: usize) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![self.input.channels, h, w];
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer_output_shape(layer, &shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.shapes_for(self.input.height, self.input.width)
    }

    /// Checks shape propagation at the design input size and the terminal
    /// structure: exactly one softmax, last, fed by an fc of `classes` units.
    pub fn validate(&self) -> Result<()> {
        if self.input.channels == 0 || self.classes == 0 {
            return Err(invalid!("architecture needs positive channels and classes"));
        }
        let softmaxes = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Softmax))
            .count();
        if softmaxes != 1 || !matches!(self.layers.last().map(|l| &l.kind), Some(LayerKind::Softmax)) {
            return Err(invalid!("architecture must end in exactly one softmax layer"));
        }
        match self.layers.iter().rev().nth(1).map(|l| &l.kind) {
            Some(LayerKind::Fc { units }) if *units == self.classes => {}
            _ => {
                return Err(invalid!(
                    "the layer before softmax must be fc with {} units",
                    self.classes
                ))
            }
        }
        self.shapes()?;
        Ok(())
    }

    pub fn uses_spp(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.kind, LayerKind::Spp { .. }))
    }

    pub fn spp_levels(&self) -> Option<&[usize]> {
        self.layers.iter().find_map(|l| match &l.kind {
            LayerKind::Spp { levels } => Some(levels.as_slice()),
            _ => None,
        })
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Number of leading layers operating on spatial maps (everything
    /// before the first fc or SPP layer).
    pub fn conv_stage_len(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Fc { .. } | LayerKind::Spp { .. }))
            .unwrap_or(self.layers.len())
    }

    pub fn conv_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Learnable parameter count, without allocating the parameters.
    pub fn parameter_count(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        let mut input: Vec<usize> = vec![self.input.channels, self.input.height, self.input.width];
        let mut total = 0;
        for (layer, out) in self.layers.iter().zip(&shapes) {
            total += match &layer.kind {
                LayerKind::Conv {
                    out_channels, kernel, ..
                } => out_channels * (input[0] * kernel * kernel + 1),
                LayerKind::Fc { units } => units * (input.iter().product::<usize>() + 1),
                LayerKind::BatchNorm { .. } => 2 * input[0],
                _ => 0,
            };
            input = out.clone();
        }
        Ok(total)
    }

    /// Spatial size of the last map before flattening, at the design input.
    pub fn final_conv_map(&self) -> Result<(usize, usize)> {
        let shapes = self.shapes()?;
        let idx = self.conv_stage_len();
        let shape = if idx == 0 {
            vec![self.input.channels, self.input.height, self.input.width]
        } else {
            shapes[idx - 1].clone()
        };
        match shape[..] {
            [_, h, w] => Ok((h, w)),
            _ => Err(invalid!("conv stage does not end in a spatial map")),
        }
    }
}

fn layer_output_shape(layer: &LayerConfig, shape: &[usize]) -> Result<Vec<usize>> {
    let spatial = |what: &str| -> Result<(usize, usize, usize)> {
        match *shape {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(invalid!(
                "layer {} ({what}) needs a spatial input, got {shape:?}",
                layer.name
            )),
        }
    };
    let ctx = |e: Error| match e {
        Error::InvalidArgument(m) => invalid!("layer {}: {m}", layer.name),
        other => other,
    };
    match &layer.kind {
        LayerKind::Conv { out_channels, .. } => {
            let (_, h, w) = spatial("conv")?;
            if *out_channels == 0 {
                return Err(invalid!("layer {} has zero output channels", layer.name));
            }
            let (oh, ow) = layer.conv_geometry().unwrap().output_size(h, w).map_err(ctx)?;
            Ok(vec![*out_channels, oh, ow])
        }
        LayerKind::Fc { units } => {
            if *units == 0 {
                return Err(invalid!("layer {} has zero units", layer.name));
            }
            Ok(vec![*units])
        }
        LayerKind::MaxPool { .. } => {
            let (c, h, w) = spatial("max pool")?;
            let (oh, ow) = layer.pool_geometry().unwrap().output_size(h, w).map_err(ctx)?;
            Ok(vec![c, oh, ow])
        }
        LayerKind::Lrn(p) => {
            let (c, _, _) = spatial("lrn")?;
            p.validate(c).map_err(ctx)?;
            Ok(shape.to_vec())
        }
        LayerKind::Spp { levels } => {
            let (c, h, w) = spatial("spp")?;
            layers::validate_spp_levels(levels).map_err(ctx)?;
            let max = levels.iter().copied().max().unwrap_or(1);
            if h < max || w < max {
                return Err(invalid!(
                    "layer {}: SPP level {max} needs at least {max}x{max}, map is {h}x{w}",
                    layer.name
                ));
            }
            Ok(vec![layers::spp_output_len(c, levels)])
        }
        LayerKind::Dropout { keep } => {
            if !(*keep > 0.0 && *keep <= 1.0) {
                return Err(invalid!("layer {}: keep probability {keep} outside (0, 1]", layer.name));
            }
            Ok(shape.to_vec())
        }
        LayerKind::BatchNorm { eps, .. } => {
            if *eps <= 0.0 {
                return Err(invalid!("layer {}: epsilon must be positive", layer.name));
            }
            Ok(shape.to_vec())
        }
        LayerKind::Relu | LayerKind::Softmax => Ok(shape.to_vec()),
    }
}

/// Learnable (and running) state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    Affine { weight: Tensor, bias: Tensor },
    Norm(BatchNormState<f32>),
}

/// Gradients for one layer, aligned with [`LayerParams`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads {
    None,
    Affine { weight: Tensor, bias: Tensor },
    Norm { gamma: Tensor, beta: Tensor },
}

impl LayerGrads {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerGrads::None => vec![],
            LayerGrads::Affine { weight, bias } => vec![weight, bias],
            LayerGrads::Norm { gamma, beta } => vec![gamma, beta],
        }
    }

    fn scale_accumulate(&mut self, other: &LayerGrads, s: f32) -> Result<()> {
        let pairs: Vec<(&mut Tensor, &Tensor)> = match (self, other) {
            (LayerGrads::None, LayerGrads::None) => vec![],
            (LayerGrads::Affine { weight, bias }, LayerGrads::Affine { weight: w2, bias: b2 }) => {
                vec![(weight, w2), (bias, b2)]
            }
            (LayerGrads::Norm { gamma, beta }, LayerGrads::Norm { gamma: g2, beta: b2 }) => {
                vec![(gamma, g2), (beta, b2)]
            }
            _ => return Err(invalid!("gradient structure mismatch")),
        };
        for (dst, src) in pairs {
            dst.add_assign(&src.scale(s))?;
        }
        Ok(())
    }
}

/// Gradients for every layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<LayerGrads>);

impl Gradients {
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.0.iter().flat_map(|g| g.tensors()).collect()
    }

    /// `self += s · other`.
    pub fn accumulate(&mut self, other: &Gradients, s: f32) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(invalid!("gradient sets of different length"));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.scale_accumulate(b, s)?;
        }
        Ok(())
    }

    pub fn scaled(&self, s: f32) -> Gradients {
        Gradients(
            self.0
                .iter()
                .map(|g| match g {
                    LayerGrads::None => LayerGrads::None,
                    LayerGrads::Affine { weight, bias } => LayerGrads::Affine {
                        weight: weight.scale(s),
                        bias: bias.scale(s),
                    },
                    LayerGrads::Norm { gamma, beta } => LayerGrads::Norm {
                        gamma: gamma.scale(s),
                        beta: beta.scale(s),
                    },
                })
                .collect(),
        )
    }
}

/// Per-layer state a backward or deconv pass needs.
#[derive(Clone, Debug)]
pub enum LayerCache {
    None,
    Switches(PoolSwitches),
    Dropout(Option<DropoutMask>),
    Norm(Option<BatchNormCache<f32>>),
}

/// Record of one forward pass: the input, every layer's output and cache.
/// A trace may stop early, in which case it only covers `outputs.len()`
/// layers.
#[derive(Clone, Debug)]
pub struct Trace {
    pub mode: Mode,
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    pub caches: Vec<LayerCache>,
}

impl Trace {
    pub fn covers(&self, layer: usize) -> bool {
        layer < self.outputs.len()
    }

    /// Input of layer `i`.
    pub fn layer_input(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }

    pub fn probabilities(&self) -> Option<&Tensor> {
        self.outputs.last()
    }

    /// Output of the layer feeding softmax.
    pub fn logits(&self) -> Option<&Tensor> {
        self.outputs.iter().rev().nth(1)
    }
}

/// An architecture together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchSpec,
    params: Vec<LayerParams>,
}

impl Model {
    /// Fan-in scaled Gaussian weights (`std = √(2/fan_in)`), zero biases,
    /// unit batch-norm scale. Deterministic in `seed`.
    pub fn init(spec: ArchSpec, seed: u64) -> Result<Self> {
        Self::build(spec, Some(&mut ChaCha8Rng::seed_from_u64(seed)))
    }

    /// All-zero weights; batch-norm layers still start at unit scale.
    pub fn zeroed(spec: ArchSpec) -> Result<Self> {
        Self::build(spec, None)
    }

    fn build(spec: ArchSpec, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.shapes()?;
        let mut weights = |shape: &[usize], fan_in: usize| match rng.as_deref_mut() {
            Some(r) => gaussian(shape, fan_in, r),
            None => Tensor::zeros(shape),
        };
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut in_shape = vec![spec.input.channels, spec.input.height, spec.input.width];
        for (layer, out_shape) in spec.layers.iter().zip(&shapes) {
            let p = match &layer.kind {
                LayerKind::Conv {
                    out_channels, kernel, ..
                } => {
                    let fan_in = in_shape[0] * kernel * kernel;
                    LayerParams::Affine {
                        weight: weights(&[*out_channels, in_shape[0], *kernel, *kernel], fan_in),
                        bias: Tensor::zeros(&[*out_channels]),
                    }
                }
                LayerKind::Fc { units } => {
                    let fan_in: usize = in_shape.iter().product();
                    LayerParams::Affine {
                        weight: weights(&[*units, fan_in], fan_in),
                        bias: Tensor::zeros(&[*units]),
                    }
                }
                LayerKind::BatchNorm { eps, momentum } => {
                    LayerParams::Norm(BatchNormState::new(in_shape[0], *eps, *momentum)?)
                }
                _ => LayerParams::None,
            };
            params.push(p);
            in_shape = out_shape.clone();
        }
        Ok(Self { spec, params })
    }

    /// Assemble from explicit parameters, checking every shape.
    pub fn from_parts(spec: ArchSpec, params: Vec<LayerParams>) -> Result<Self> {
        let template = Self::zeroed(spec.clone())?;
        if template.params.len() != params.len() {
            return Err(invalid!("expected {} layer parameter sets", template.params.len()));
        }
        for (i, (t, p)) in template.params.iter().zip(&params).enumerate() {
            let ok = match (t, p) {
                (LayerParams::None, LayerParams::None) => true,
                (LayerParams::Affine { weight, bias }, LayerParams::Affine { weight: w, bias: b }) => {
                    weight.shape() == w.shape() && bias.shape() == b.shape()
                }
                (LayerParams::Norm(a), LayerParams::Norm(b)) => {
                    a.gamma.shape() == b.gamma.shape()
                        && a.beta.shape() == b.beta.shape()
                        && a.running_mean.shape() == b.running_mean.shape()
                        && a.running_var.shape() == b.running_var.shape()
                }
                _ => false,
            };
            if !ok {
                return Err(invalid!(
                    "parameters for layer {} do not match the architecture",
                    spec.layers[i].name
                ));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Learnable tensors in declaration order (weight, bias / gamma, beta).
    pub fn learnable(&self) -> Vec<&Tensor> {
        self.params
            .iter()
            .flat_map(|p| match p {
                LayerParams::None => vec![],
                LayerParams::Affine { weight, bias } => vec![weight, bias],
                LayerParams::Norm(s) => vec![&s.gamma, &s.beta],
            })
            .collect()
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .flat_map(|p| match p {
                LayerParams::None => vec![],
                LayerParams::Affine { weight, bias } => vec![weight, bias],
                LayerParams::Norm(s) => vec![&mut s.gamma, &mut s.beta],
            })
            .collect()
    }

    /// Every stored tensor in checkpoint declaration order: learnable ones
    /// plus batch-norm running statistics.
    pub fn all_tensors(&self) -> Vec<&Tensor> {
        self.params
            .iter()
            .flat_map(|p| match p {
                LayerParams::None => vec![],
                LayerParams::Affine { weight, bias } => vec![weight, bias],
                LayerParams::Norm(s) => vec![&s.gamma, &s.beta, &s.running_mean, &s.running_var],
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if c != self.spec.input.channels {
            return Err(invalid!(
                "model expects {} input channels, got {c}",
                self.spec.input.channels
            ));
        }
        if !self.spec.uses_spp() && (h, w) != (self.spec.input.height, self.spec.input.width) {
            return Err(invalid!(
                "model without SPP expects {}x{} inputs, got {h}x{w}",
                self.spec.input.height,
                self.spec.input.width
            ));
        }
        Ok(())
    }

    /// Full forward pass recording outputs and caches for every layer.
    pub fn trace(&self, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<Trace> {
        self.trace_until(x, self.spec.layers.len() - 1, mode, rng)
    }

    /// Forward pass that stops after layer `last`.
    pub fn trace_until(&self, x: &Tensor, last: usize, mode: Mode, rng: &mut dyn RngCore) -> Result<Trace> {
        self.check_input(x)?;
        if last >= self.spec.layers.len() {
            return Err(invalid!("layer index {last} out of range"));
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(last + 1);
        let mut caches = Vec::with_capacity(last + 1);
        for i in 0..=last {
            let input = if i == 0 { x } else { &outputs[i - 1] };
            let (y, cache) = self.layer_forward(i, input, mode, rng)?;
            outputs.push(y);
            caches.push(cache);
        }
        Ok(Trace {
            mode,
            input: x.clone(),
            outputs,
            caches,
        })
    }

    /// Eval-mode class probabilities for an NCHW batch, keeping no caches.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        // eval mode draws nothing from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cur = x.clone();
        for i in 0..self.spec.layers.len() {
            cur = self.layer_forward(i, &cur, Mode::Eval, &mut rng)?.0;
        }
        Ok(cur)
    }

    /// Fold train-mode batch statistics from `trace` into the running
    /// averages of every batch-norm layer.
    pub fn absorb_batch_stats(&mut self, trace: &Trace) {
        for (p, cache) in self.params.iter_mut().zip(&trace.caches) {
            if let (LayerParams::Norm(state), LayerCache::Norm(Some(c))) = (p, cache) {
                state.absorb(c);
            }
        }
    }

    fn layer_forward(&self, i: usize, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<(Tensor, LayerCache)> {
        let layer = &self.spec.layers[i];
        let ctx = |e: Error| match e {
            Error::InvalidArgument(m) => invalid!("layer {}: {m}", layer.name),
            other => other,
        };
        let out = match (&layer.kind, &self.params[i]) {
            (LayerKind::Conv { .. }, LayerParams::Affine { weight, bias }) => (
                tensor::conv2d(x, weight, bias, &layer.conv_geometry().unwrap()).map_err(ctx)?,
                LayerCache::None,
            ),
            (LayerKind::Fc { .. }, LayerParams::Affine { weight, bias }) => {
                let flat = flatten(x)?;
                (
                    tensor::matmul_affine(&flat, weight, bias).map_err(ctx)?,
                    LayerCache::None,
                )
            }
            (LayerKind::Relu, _) => (layers::relu_forward(x), LayerCache::None),
            (LayerKind::MaxPool { .. }, _) => {
                let (y, sw) = layers::maxpool_forward(x, &layer.pool_geometry().unwrap()).map_err(ctx)?;
                (y, LayerCache::Switches(sw))
            }
            (LayerKind::Lrn(p), _) => (layers::lrn_forward(x, p).map_err(ctx)?, LayerCache::None),
            (LayerKind::Dropout { keep }, _) => {
                let (y, mask) = layers::dropout_forward(x, *keep, mode, rng).map_err(ctx)?;
                (y, LayerCache::Dropout(mask))
            }
            (LayerKind::BatchNorm { .. }, LayerParams::Norm(state)) => {
                let (y, cache) = layers::batchnorm_forward(x, state, mode).map_err(ctx)?;
                (y, LayerCache::Norm(cache))
            }
            (LayerKind::Spp { levels }, _) => {
                let (y, sw) = layers::spp_forward(x, levels).map_err(ctx)?;
                (y, LayerCache::Switches(sw))
            }
            (LayerKind::Softmax, _) => (layers::softmax(&flatten(x)?)?, LayerCache::None),
            _ => return Err(invalid!("layer {} has mismatched parameters", layer.name)),
        };
        Ok(out)
    }

    /// Backpropagate `grad_logits` (gradient w.r.t. the input of the final
    /// softmax layer) through a full train- or eval-mode trace.
    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor) -> Result<Gradients> {
        let n_layers = self.spec.layers.len();
        if trace.outputs.len() != n_layers {
            return Err(Error::Precondition("backward needs a complete forward trace".into()));
        }
        let mut grads = vec![LayerGrads::None; n_layers];
        let mut grad = grad_logits.clone();
        for i in (0..n_layers - 1).rev() {
            let layer = &self.spec.layers[i];
            let input = trace.layer_input(i);
            grad = match (&layer.kind, &self.params[i], &trace.caches[i]) {
                (LayerKind::Conv { .. }, LayerParams::Affine { weight, .. }, _) => {
                    let (gi, gw, gb) = tensor::conv2d_grad(input, weight, &layer.conv_geometry().unwrap(), &grad)?;
                    grads[i] = LayerGrads::Affine { weight: gw, bias: gb };
                    gi
                }
                (LayerKind::Fc { .. }, LayerParams::Affine { weight, .. }, _) => {
                    let flat = flatten(input)?;
                    let (gi, gw, gb) = tensor::matmul_affine_grad(&flat, weight, &grad)?;
                    grads[i] = LayerGrads::Affine { weight: gw, bias: gb };
                    gi.reshape(input.shape())?
                }
                (LayerKind::Relu, _, _) => layers::relu_backward(input, &grad)?,
                (LayerKind::MaxPool { .. }, _, LayerCache::Switches(sw)) => layers::maxpool_backward(sw, &grad)?,
                (LayerKind::Spp { .. }, _, LayerCache::Switches(sw)) => layers::spp_backward(sw, &grad)?,
                (LayerKind::Lrn(p), _, _) => layers::lrn_backward(input, p, &grad)?,
                (LayerKind::Dropout { .. }, _, LayerCache::Dropout(mask)) => {
                    layers::dropout_backward(mask.as_ref(), &grad)?
                }
                (LayerKind::BatchNorm { .. }, LayerParams::Norm(state), LayerCache::Norm(Some(cache))) => {
                    let (gx, gg, gb) = layers::batchnorm_backward(cache, state, &grad)?;
                    grads[i] = LayerGrads::Norm { gamma: gg, beta: gb };
                    gx
                }
                (LayerKind::BatchNorm { .. }, _, _) => {
                    return Err(Error::Precondition(format!(
                        "layer {}: batch-norm backward needs a train-mode trace",
                        layer.name
                    )))
                }
                _ => return Err(invalid!("layer {}: inconsistent trace", layer.name)),
            };
        }
        Ok(Gradients(grads))
    }

    /// Zero gradients shaped like this model's parameters.
    pub fn zero_grads(&self) -> Gradients {
        Gradients(
            self.params
                .iter()
                .map(|p| match p {
                    LayerParams::None => LayerGrads::None,
                    LayerParams::Affine { weight, bias } => LayerGrads::Affine {
                        weight: Tensor::zeros(weight.shape()),
                        bias: Tensor::zeros(bias.shape()),
                    },
                    LayerParams::Norm(s) => LayerGrads::Norm {
                        gamma: Tensor::zeros(s.gamma.shape()),
                        beta: Tensor::zeros(s.beta.shape()),
                    },
                })
                .collect(),
        )
    }
}

fn gaussian(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

/// `[N, ...]` → `[N, F]`.
fn flatten(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let f = x.len() / n;
    x.clone().reshape(&[n, f])
}
