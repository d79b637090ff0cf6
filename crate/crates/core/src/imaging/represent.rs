//! Rendering images into stacked representation channels at a target size.

use serde::{Deserialize, Serialize};

use super::surf::{SurfImage, SURF_LEN};
use super::{histogram, otsu_threshold, rgb_to_hsv_pixel, RawImage};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// One input representation. `S` is dense SURF, `B` is Otsu binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    G,
    Rgb,
    Hsv,
    B,
    S,
}

impl Channel {
    pub fn depth(self) -> usize {
        match self {
            Channel::G | Channel::B => 1,
            Channel::Rgb | Channel::Hsv => 3,
            Channel::S => SURF_LEN,
        }
    }
}

/// Ordered, duplicate-free list of representations stacked along channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepresentationSpec {
    pub channels: Vec<Channel>,
}

impl Default for RepresentationSpec {
    fn default() -> Self {
        Self {
            channels: vec![Channel::G],
        }
    }
}

impl RepresentationSpec {
    pub fn new(channels: Vec<Channel>) -> Result<Self> {
        let spec = Self { channels };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(invalid!("representation list is empty"));
        }
        for (i, c) in self.channels.iter().enumerate() {
            if self.channels[..i].contains(c) {
                return Err(invalid!("representation {c:?} listed twice"));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.channels.iter().map(|c| c.depth()).sum()
    }
}

/// Axis-aligned map from target pixel `(x, y)` to source coordinates:
/// `src = (dst + 0.5)·scale − 0.5 + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub scale_x: f64,
    pub scale_y: f64,
    pub off_x: f64,
    pub off_y: f64,
}

impl Frame {
    /// Stretch the whole source onto the whole target.
    pub fn warp(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Self {
        Self {
            scale_x: src_w as f64 / dst_w as f64,
            scale_y: src_h as f64 / dst_h as f64,
            off_x: 0.0,
            off_y: 0.0,
        }
    }

    pub fn map(&self, x: usize, y: usize) -> (f64, f64) {
        (
            (x as f64 + 0.5) * self.scale_x - 0.5 + self.off_x,
            (y as f64 + 0.5) * self.scale_y - 0.5 + self.off_y,
        )
    }
}

const SNAP: f64 = 1e-6;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear sample of a `w × h` plane at `(x, y)`. Points within half a
/// pixel of the plane are edge-clamped; anything further out reads `fill`.
/// Coordinates within 1e-6 of an integer snap to it, so integer shifts are
/// exact copies.
pub(crate) fn bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64, fill: f32) -> f32 {
    let (x, y) = (snap(x), snap(y));
    if !(x >= -0.5 && y >= -0.5 && x <= w as f64 - 0.5 && y <= h as f64 - 0.5) {
        return fill;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let at = |xx: usize, yy: usize| plane[yy * w + xx];
    if fx == 0.0 && fy == 0.0 {
        return at(x0, y0);
    }
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let top = at(x0, y0) + (at(x1, y0) - at(x0, y0)) * fx;
    let bottom = at(x0, y1) + (at(x1, y1) - at(x0, y1)) * fx;
    top + (bottom - top) * fy
}

fn resample(plane: &[f32], w: usize, h: usize, frame: &Frame, out_w: usize, out_h: usize, fill: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = frame.map(x, y);
            out.push(bilinear(plane, w, h, sx, sy, fill));
        }
    }
    out
}

/// Render `img` through `frame` into a `[D, out_h, out_w]` tensor with the
/// channels of `spec` in order. Pixel representations sample the source
/// bilinearly (fill outside the source) and derive HSV and the Otsu mask
/// after sampling; the mask uses the threshold of the whole source image.
/// SURF descriptors are computed on the source at the nearest pixel to each
/// mapped point (zero outside) and mapped from `[-1, 1]` to `[0, 1]`.
pub fn render_representation(
    img: &RawImage,
    spec: &RepresentationSpec,
    frame: &Frame,
    out_h: usize,
    out_w: usize,
    fill: f32,
) -> Result<Tensor> {
    spec.validate()?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("target size must be positive, got {out_h}x{out_w}"));
    }
    let (w, h) = (img.width(), img.height());
    let plane = out_h * out_w;
    let mut data = Vec::with_capacity(spec.depth() * plane);
    let rgb_planes = || -> Vec<Vec<f32>> {
        (0..3)
            .map(|c| {
                resample(
                    &img.plane(if img.is_color() { c } else { 0 }),
                    w,
                    h,
                    frame,
                    out_w,
                    out_h,
                    fill,
                )
            })
            .collect()
    };
    for ch in &spec.channels {
        match ch {
            Channel::G => {
                let gray = super::to_grayscale(img);
                data.extend(resample(gray.data(), w, h, frame, out_w, out_h, fill));
            }
            Channel::Rgb => data.extend(rgb_planes().concat()),
            Channel::Hsv => {
                if !img.is_color() {
                    return Err(invalid!("HSV representation needs a color image"));
                }
                let rgb = rgb_planes();
                let mut hsv = vec![0f32; 3 * plane];
                for i in 0..plane {
                    let px = rgb_to_hsv_pixel([rgb[0][i] as f64, rgb[1][i] as f64, rgb[2][i] as f64]);
                    for c in 0..3 {
                        hsv[c * plane + i] = px[c] as f32;
                    }
                }
                data.extend(hsv);
            }
            Channel::B => match otsu_threshold(&histogram(img)) {
                Some(t) => {
                    let luma: Vec<f32> = img.luma_u8().iter().map(|&v| v as f32 / 255.0).collect();
                    let cut = t as f32 + 0.5;
                    data.extend(resample(&luma, w, h, frame, out_w, out_h, fill).into_iter().map(|g| {
                        if g * 255.0 > cut {
                            1.0
                        } else {
                            0.0
                        }
                    }));
                }
                None => data.extend(std::iter::repeat_n(0.0, plane)),
            },
            Channel::S => {
                let surf = SurfImage::new(img);
                let mut s = vec![0f32; SURF_LEN * plane];
                for y in 0..out_h {
                    for x in 0..out_w {
                        let (sx, sy) = frame.map(x, y);
                        let d = surf.descriptor(sx.round() as isize, sy.round() as isize);
                        for (k, v) in d.iter().enumerate() {
                            s[k * plane + y * out_w + x] = (v + 1.0) / 2.0;
                        }
                    }
                }
                data.extend(s);
            }
        }
    }
    Tensor::new(&[spec.depth(), out_h, out_w], data)
}

/// Every representation of `spec`, resized (aspect ratio not kept) to
/// `out_h × out_w` and concatenated along channels.
pub fn stack_representations(img: &RawImage, spec: &RepresentationSpec, out_h: usize, out_w: usize) -> Result<Tensor> {
    let frame = Frame::warp(img.width(), img.height(), out_w, out_h);
    render_representation(img, spec, &frame, out_h, out_w, 1.0)
}

fn channel_axis(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h * w)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(invalid!("expected [C, H, W] or [N, C, H, W], got {:?}", t.shape())),
    }
}

/// Subtract one mean per channel.
pub fn normalize(t: &Tensor, means: &[f64]) -> Result<Tensor> {
    let (n, c, plane) = channel_axis(t)?;
    if means.len() != c {
        return Err(invalid!("{} channel means for a {c}-channel tensor", means.len()));
    }
    let mut out = t.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate().take(n * c) {
        let m = means[i % c] as f32;
        chunk.iter_mut().for_each(|v| *v -= m);
    }
    Ok(out)
}

/// Per-channel mean over every pixel of every tensor, accumulated in f64 in
/// iteration order.
pub fn channel_means<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<Vec<f64>> {
    let mut sums: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for t in tensors {
        let (n, c, plane) = channel_axis(t)?;
        if sums.is_empty() {
            sums = vec![0.0; c];
        } else if sums.len() != c {
            return Err(invalid!("channel count changed from {} to {c}", sums.len()));
        }
        for (i, chunk) in t.data().chunks(plane).enumerate().take(n * c) {
            sums[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        count += n * plane;
    }
    if count == 0 {
        return Err(invalid!("no tensors to average"));
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}
