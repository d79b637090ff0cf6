//! Looking inside a trained network: receptive fields, top exciting
//! patches, deconvnet reconstructions and per-filter mean response maps.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imaging::RawImage;
use crate::layers::{maxpool_backward, relu_forward, Mode};
use crate::network::{ArchSpec, LayerCache, LayerKind, LayerParams, Model, Trace};
use crate::tensor::{conv2d_transpose, Tensor};

/// One unit (or one whole channel) of a spatial layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub channel: usize,
    /// `(y, x)` in the layer's output map.
    pub position: Option<(usize, usize)>,
}

impl NeuronRef {
    /// Checks the reference against `spec` at its design input size.
    pub fn validate(&self, spec: &ArchSpec) -> Result<()> {
        let (c, h, w) = spatial_shape(spec, self.layer, spec.input.height, spec.input.width)?;
        if self.channel >= c {
            return Err(invalid!("channel {} out of range for {c} channels", self.channel));
        }
        if let Some((y, x)) = self.position {
            if y >= h || x >= w {
                return Err(invalid!("position ({y}, {x}) outside the {h}x{w} map"));
            }
        }
        Ok(())
    }
}

/// Output shape of spatial layer `layer` for an `h×w` input.
fn spatial_shape(spec: &ArchSpec, layer: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
    if layer >= spec.conv_stage_len() {
        return Err(invalid!("layer {layer} is not a spatial layer"));
    }
    match spec.shapes_for(h, w)?[layer][..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(invalid!("layer {layer} is not a spatial layer")),
    }
}

/// Half-open input-space rectangle `[x0, x1) × [y0, y1)`; may extend past
/// the image before clamping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: isize,
    pub y0: isize,
    pub x1: isize,
    pub y1: isize,
}

impl Rect {
    pub fn width(&self) -> usize {
        (self.x1 - self.x0).max(0) as usize
    }

    pub fn height(&self) -> usize {
        (self.y1 - self.y0).max(0) as usize
    }

    pub fn contains(&self, x: isize, y: isize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn clamp(&self, width: usize, height: usize) -> Rect {
        let (w, h) = (width as isize, height as isize);
        Rect {
            x0: self.x0.clamp(0, w),
            y0: self.y0.clamp(0, h),
            x1: self.x1.clamp(0, w),
            y1: self.y1.clamp(0, h),
        }
    }
}

/// Input pixels that can influence output `(y, x)` of `layer`, composed
/// backwards through every kernel, stride and pad. Not clamped.
pub fn receptive_field(spec: &ArchSpec, layer: usize, (y, x): (usize, usize)) -> Result<Rect> {
    NeuronRef {
        layer,
        channel: 0,
        position: Some((y, x)),
    }
    .validate(spec)?;
    let (mut y0, mut y1, mut x0, mut x1) = (y as isize, y as isize + 1, x as isize, x as isize + 1);
    for l in spec.layers[..=layer].iter().rev() {
        let (k, s, p) = match l.kind {
            LayerKind::Conv {
                kernel, stride, pad, ..
            } => (kernel as isize, stride as isize, pad as isize),
            LayerKind::MaxPool { window, stride } => (window as isize, stride as isize, 0),
            _ => continue,
        };
        (y0, y1) = (y0 * s - p, (y1 - 1) * s - p + k);
        (x0, x1) = (x0 * s - p, (x1 - 1) * s - p + k);
    }
    Ok(Rect { x0, y0, x1, y1 })
}

/// Eval-mode trace of one `[C, H, W]` input up to `layer`.
pub fn trace_to(model: &Model, x: &Tensor, layer: usize) -> Result<Trace> {
    let batch = Tensor::stack(std::slice::from_ref(x))?;
    // eval mode draws nothing from the rng
    model.trace_until(&batch, layer, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub image_id: String,
    /// `(y, x)` of the activation in the layer's output map.
    pub position: (usize, usize),
    pub activation: f32,
    /// Receptive field clamped to the input.
    pub rect: Rect,
    /// Input pixels under `rect`, `[C, h, w]`.
    pub patch: Tensor,
}

/// Crop `rect` (already clamped) out of a `[C, H, W]` tensor.
pub fn crop(x: &Tensor, rect: &Rect) -> Result<Tensor> {
    let [c, h, w] = match *x.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(invalid!("expected a [C, H, W] tensor, got {:?}", x.shape())),
    };
    let r = rect.clamp(w, h);
    let (rh, rw) = (r.height(), r.width());
    let mut out = Vec::with_capacity(c * rh * rw);
    for ch in 0..c {
        for y in r.y0 as usize..r.y1 as usize {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&x.data()[row + r.x0 as usize..row + r.x1 as usize]);
        }
    }
    Tensor::new(&[c, rh, rw], out)
}

/// Strongest activation of `channel` in each input, then the `k` strongest
/// of those: at most one record per input, sorted by descending activation
/// with earlier inputs first on ties.
pub fn top_k_patches(
    model: &Model,
    inputs: &[(String, Tensor)],
    layer: usize,
    channel: usize,
    k: usize,
) -> Result<Vec<PatchRecord>> {
    if k == 0 {
        return Err(invalid!("k must be at least 1"));
    }
    NeuronRef {
        layer,
        channel,
        position: None,
    }
    .validate(model.spec())?;
    let mut best = inputs
        .par_iter()
        .map(|(id, x)| {
            let trace = trace_to(model, x, layer)?;
            let out = &trace.outputs[layer];
            let [_, _, h, w] = out.dims4()?;
            let plane = &out.data()[channel * h * w..(channel + 1) * h * w];
            let mut arg = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[arg] {
                    arg = i;
                }
            }
            let position = (arg / w, arg % w);
            let [_, ih, iw] = match *x.shape() {
                [c, h, w] => [c, h, w],
                _ => return Err(invalid!("inputs must be [C, H, W]")),
            };
            let rect = receptive_field_at(model.spec(), layer, position, ih, iw)?.clamp(iw, ih);
            Ok(PatchRecord {
                image_id: id.clone(),
                position,
                activation: plane[arg],
                rect,
                patch: crop(x, &rect)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    best.sort_by(|a, b| b.activation.partial_cmp(&a.activation).unwrap_or(Ordering::Equal));
    best.truncate(k);
    Ok(best)
}

/// Like [`receptive_field`] but validated for an `h×w` input rather than the
/// design size (SPP models accept any size).
fn receptive_field_at(spec: &ArchSpec, layer: usize, pos: (usize, usize), h: usize, w: usize) -> Result<Rect> {
    let mut s = spec.clone();
    s.input.height = h;
    s.input.width = w;
    // the fc head may not fit a foreign size; only the spatial stage matters
    s.layers.truncate(s.conv_stage_len());
    receptive_field(&s, layer, pos)
}

/// Project `signal` (shaped like the output of `layer` in `trace`) back to
/// input space with the deconvnet rules: transposed convolution with the
/// forward kernels, unpooling through the recorded switches, ReLU on the
/// backward signal, and normalization and dropout passed through.
pub fn deconv_signal(model: &Model, trace: &Trace, layer: usize, signal: Tensor) -> Result<Tensor> {
    if !trace.covers(layer) {
        return Err(Error::Precondition(format!("no forward trace reaching layer {layer}")));
    }
    if layer >= model.spec().conv_stage_len() {
        return Err(invalid!("deconv starts from a spatial layer"));
    }
    if signal.shape() != trace.outputs[layer].shape() {
        return Err(invalid!(
            "signal shape {:?} does not match layer output {:?}",
            signal.shape(),
            trace.outputs[layer].shape()
        ));
    }
    let mut sig = signal;
    for i in (0..=layer).rev() {
        let l = &model.spec().layers[i];
        sig = match (&l.kind, &model.params()[i], &trace.caches[i]) {
            (LayerKind::Conv { .. }, LayerParams::Affine { weight, .. }, _) => {
                let input = trace.layer_input(i);
                let [_, _, h, w] = input.dims4()?;
                conv2d_transpose(&sig, weight, &l.conv_geometry().unwrap(), (h, w))?
            }
            (LayerKind::Relu, _, _) => relu_forward(&sig),
            (LayerKind::MaxPool { .. }, _, LayerCache::Switches(sw)) => maxpool_backward(sw, &sig)?,
            (LayerKind::Lrn(_) | LayerKind::BatchNorm { .. } | LayerKind::Dropout { .. }, _, _) => sig,
            _ => return Err(invalid!("layer {} cannot be inverted", l.name)),
        };
    }
    Ok(sig)
}

/// Deconv reconstruction of one neuron (or its whole channel when no
/// position is given) in the context of the traced input.
pub fn deconv_visualize(model: &Model, trace: Option<&Trace>, neuron: &NeuronRef) -> Result<Tensor> {
    let trace = trace.ok_or_else(|| Error::Precondition("deconv needs a forward trace of the image".into()))?;
    if !trace.covers(neuron.layer) {
        return Err(Error::Precondition(format!(
            "no forward trace reaching layer {}",
            neuron.layer
        )));
    }
    let out = &trace.outputs[neuron.layer];
    let [n, c, h, w] = out.dims4()?;
    if neuron.channel >= c {
        return Err(invalid!("channel {} out of range for {c} channels", neuron.channel));
    }
    let mut signal = Tensor::zeros(out.shape());
    for b in 0..n {
        let base = (b * c + neuron.channel) * h * w;
        let cells: Vec<usize> = match neuron.position {
            Some((y, x)) if y < h && x < w => vec![y * w + x],
            Some((y, x)) => return Err(invalid!("position ({y}, {x}) outside the {h}x{w} map")),
            None => (0..h * w).collect(),
        };
        for i in cells {
            signal.data_mut()[base + i] = out.data()[base + i];
        }
    }
    deconv_signal(model, trace, neuron.layer, signal)
}

/// Elementwise mean over `inputs` of the `[C, h, w]` output of `layer`.
pub fn spatial_response_map(model: &Model, inputs: &[Tensor], layer: usize) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(invalid!("no inputs to average"));
    }
    spatial_shape(model.spec(), layer, model.spec().input.height, model.spec().input.width)?;
    let maps = inputs
        .par_iter()
        .map(|x| {
            let t = trace_to(model, x, layer)?;
            let out = &t.outputs[layer];
            out.clone().reshape(&out.shape()[1..])
        })
        .collect::<Result<Vec<_>>>()?;
    let shape = maps[0].shape().to_vec();
    let mut sum = vec![0f64; maps[0].len()];
    for m in &maps {
        if m.shape() != shape.as_slice() {
            return Err(invalid!("inputs of different sizes give maps of different shapes"));
        }
        sum.iter_mut().zip(m.data()).for_each(|(s, &v)| *s += v as f64);
    }
    let n = maps.len() as f64;
    Tensor::new(&shape, sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// Scale a `[C, h, w]` or `[h, w]` tensor to `[0, 1]` (constant → 0.5).
fn stretch(t: &Tensor) -> Tensor {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        t.map(|v| (v - lo) / (hi - lo))
    } else {
        t.map(|_| 0.5)
    }
}

/// Tile `[C, h, w]` tensors (C of 1 or 3) row-major into a grid with a
/// white one-pixel gutter, each tile contrast-stretched on its own.
pub fn tile_grid(tiles: &[Tensor], cols: usize) -> Result<RawImage> {
    if tiles.is_empty() || cols == 0 {
        return Err(invalid!("a grid needs tiles and at least one column"));
    }
    let channels = tiles[0].shape()[0];
    let (th, tw) = tiles
        .iter()
        .fold((0, 0), |(h, w), t| (h.max(t.shape()[1]), w.max(t.shape()[2])));
    let rows = tiles.len().div_ceil(cols);
    let (gh, gw) = (rows * (th + 1) + 1, cols * (tw + 1) + 1);
    let mut grid = Tensor::full(&[channels, gh, gw], 1.0);
    for (i, t) in tiles.iter().enumerate() {
        if t.shape().len() != 3 || t.shape()[0] != channels {
            return Err(invalid!("tiles must all be [{channels}, h, w]"));
        }
        let s = stretch(t);
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let (oy, ox) = ((i / cols) * (th + 1) + 1, (i % cols) * (tw + 1) + 1);
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    grid.data_mut()[(c * gh + oy + y) * gw + ox + x] = s.data()[(c * h + y) * w + x];
                }
            }
        }
    }
    RawImage::from_tensor(&grid)
}

/// Grayscale magnitude image of a saliency tensor (`[1, C, H, W]` or
/// `[C, H, W]`): absolute values summed over channels.
pub fn saliency_image(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match *t.shape() {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => return Err(invalid!("expected one saliency map, got {:?}", t.shape())),
    };
    let mut out = vec![0f32; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v.abs();
        }
    }
    Tensor::new(&[1, h, w], out)
}
