//! Label-preserving image transforms, aspect-ratio policies and view sets.
//!
//! Transforms act on `[C, H, W]` tensors with values in `[0, 1]`. Geometric
//! kinds map every target pixel back into the source and sample it
//! bilinearly; points that land outside the image read white (1.0).

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::{bilinear, render_representation, Frame, RawImage, RepresentationSpec};
use crate::tensor::Tensor;

pub const GEOMETRIC_FILL: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    None,
    ColorJitter,
    Crop,
    Elastic,
    GaussianBlur,
    GaussianNoise,
    Mirror,
    Perspective,
    Rotation,
    SaltPepper,
    Shear,
}

impl TransformKind {
    pub const ALL: [TransformKind; 11] = [
        TransformKind::None,
        TransformKind::ColorJitter,
        TransformKind::Crop,
        TransformKind::Elastic,
        TransformKind::GaussianBlur,
        TransformKind::GaussianNoise,
        TransformKind::Mirror,
        TransformKind::Perspective,
        TransformKind::Rotation,
        TransformKind::SaltPepper,
        TransformKind::Shear,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShearAxis {
    Horizontal,
    Vertical,
    /// Pick horizontal or vertical with equal probability per draw.
    Both,
}

/// A transform family: the kind plus the ranges its parameters are drawn
/// from. Only the fields for `kind` matter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// Rotation angle range in degrees.
    pub rotation: [f64; 2],
    /// Fraction of each side kept by a crop, range.
    pub crop_fraction: [f64; 2],
    /// Maximum corner displacement as a fraction of the side.
    pub perspective: f64,
    /// Smoothing of the elastic displacement field, pixels.
    pub elastic_sigma: f64,
    /// Largest elastic displacement, pixels.
    pub elastic_alpha: f64,
    pub blur_sigma: [f64; 2],
    pub noise_sigma: f64,
    /// Fraction of pixels replaced by black or white.
    pub salt_pepper: f64,
    /// Brightness and contrast change bound.
    pub jitter: f64,
    /// Shear angle range in degrees.
    pub shear: [f64; 2],
    pub shear_axis: ShearAxis,
    pub mirror_probability: f64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            kind: TransformKind::None,
            rotation: [-10.0, 10.0],
            crop_fraction: [0.9, 0.9],
            perspective: 0.05,
            elastic_sigma: 4.0,
            elastic_alpha: 8.0,
            blur_sigma: [0.5, 1.5],
            noise_sigma: 0.02,
            salt_pepper: 0.02,
            jitter: 0.1,
            shear: [-10.0, 10.0],
            shear_axis: ShearAxis::Both,
            mirror_probability: 0.5,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(invalid!("{name} range {r:?} must be ordered and within [{lo}, {hi}]"));
    }
    Ok(())
}

fn check_value(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(v >= lo && v <= hi) {
        return Err(invalid!("{name} = {v} outside [{lo}, {hi}]"));
    }
    Ok(())
}

impl TransformSpec {
    pub fn of_kind(kind: TransformKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_range("rotation", self.rotation, -45.0, 45.0)?;
        check_range("crop_fraction", self.crop_fraction, f64::MIN_POSITIVE, 1.0)?;
        check_value("perspective", self.perspective, 0.0, 0.25)?;
        check_value("elastic_sigma", self.elastic_sigma, 0.0, 100.0)?;
        check_value("elastic_alpha", self.elastic_alpha, 0.0, 100.0)?;
        check_range("blur_sigma", self.blur_sigma, 0.0, 10.0)?;
        check_value("noise_sigma", self.noise_sigma, 0.0, 1.0)?;
        check_value("salt_pepper", self.salt_pepper, 0.0, 1.0)?;
        check_value("jitter", self.jitter, 0.0, 0.99)?;
        check_range("shear", self.shear, -60.0, 60.0)?;
        check_value("mirror_probability", self.mirror_probability, 0.0, 1.0)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// One fully sampled transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConcreteTransform {
    None,
    ColorJitter {
        brightness: f64,
        contrast: f64,
    },
    /// Keep `fraction` of each side; `x`, `y` in `[0, 1]` place the window.
    Crop {
        fraction: f64,
        x: f64,
        y: f64,
    },
    Elastic {
        sigma: f64,
        alpha: f64,
        seed: u64,
    },
    GaussianBlur {
        sigma: f64,
    },
    GaussianNoise {
        sigma: f64,
        seed: u64,
    },
    Mirror {
        flip: bool,
    },
    /// Corner displacements (fractions of the side) for the top-left,
    /// top-right, bottom-right and bottom-left corners.
    Perspective {
        corners: [[f64; 2]; 4],
    },
    Rotation {
        degrees: f64,
    },
    SaltPepper {
        rate: f64,
        seed: u64,
    },
    Shear {
        degrees: f64,
        axis: Axis,
    },
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn sample_transform<R: Rng + ?Sized>(spec: &TransformSpec, rng: &mut R) -> ConcreteTransform {
    match spec.kind {
        TransformKind::None => ConcreteTransform::None,
        TransformKind::ColorJitter => ConcreteTransform::ColorJitter {
            brightness: uniform(rng, [-spec.jitter, spec.jitter]),
            contrast: uniform(rng, [-spec.jitter, spec.jitter]),
        },
        TransformKind::Crop => ConcreteTransform::Crop {
            fraction: uniform(rng, spec.crop_fraction),
            x: rng.random(),
            y: rng.random(),
        },
        TransformKind::Elastic => ConcreteTransform::Elastic {
            sigma: spec.elastic_sigma,
            alpha: spec.elastic_alpha,
            seed: rng.random(),
        },
        TransformKind::GaussianBlur => ConcreteTransform::GaussianBlur {
            sigma: uniform(rng, spec.blur_sigma),
        },
        TransformKind::GaussianNoise => ConcreteTransform::GaussianNoise {
            sigma: spec.noise_sigma,
            seed: rng.random(),
        },
        TransformKind::Mirror => ConcreteTransform::Mirror {
            flip: rng.random::<f64>() < spec.mirror_probability,
        },
        TransformKind::Perspective => {
            let p = spec.perspective;
            let mut corners = [[0.0; 2]; 4];
            for c in &mut corners {
                *c = [uniform(rng, [-p, p]), uniform(rng, [-p, p])];
            }
            ConcreteTransform::Perspective { corners }
        }
        TransformKind::Rotation => ConcreteTransform::Rotation {
            degrees: uniform(rng, spec.rotation),
        },
        TransformKind::SaltPepper => ConcreteTransform::SaltPepper {
            rate: spec.salt_pepper,
            seed: rng.random(),
        },
        TransformKind::Shear => {
            let degrees = uniform(rng, spec.shear);
            let axis = match spec.shear_axis {
                ShearAxis::Horizontal => Axis::Horizontal,
                ShearAxis::Vertical => Axis::Vertical,
                ShearAxis::Both if rng.random::<bool>() => Axis::Horizontal,
                ShearAxis::Both => Axis::Vertical,
            };
            ConcreteTransform::Shear { degrees, axis }
        }
    }
}

fn dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(invalid!("transforms act on [C, H, W] tensors, got {:?}", t.shape())),
    }
}

/// Resample every channel through `map`, which sends a target pixel to its
/// source position.
fn remap(t: &Tensor, map: impl Fn(usize, usize) -> (f64, f64)) -> Result<Tensor> {
    let (c, h, w) = dims(t)?;
    let coords: Vec<(f64, f64)> = (0..h * w).map(|i| map(i % w, i / w)).collect();
    let plane = h * w;
    let mut out = Vec::with_capacity(c * plane);
    for ch in t.data().chunks(plane) {
        out.extend(coords.iter().map(|&(x, y)| bilinear(ch, w, h, x, y, GEOMETRIC_FILL)));
    }
    Tensor::new(t.shape(), out)
}

fn homography(dst: [[f64; 2]; 4], src: [[f64; 2]; 4]) -> Result<[f64; 9]> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (d, s)) in dst.iter().zip(&src).enumerate() {
        let (x, y) = (d[0], d[1]);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -x * s[0], -y * s[0]]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -x * s[1], -y * s[1]]);
        b[r] = s[0];
        b[r + 1] = s[1];
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| invalid!("degenerate perspective corners"))?;
    Ok([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
}

/// Separable Gaussian blur of one plane with edge replication.
fn blur_plane(plane: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + clamp(x as isize + k as isize - radius, w)] as f64)
                .sum();
            tmp[y * w + x] = s as f32;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x] as f64)
                .sum();
            out[y * w + x] = s as f32;
        }
    }
    out
}

/// Smoothed random displacement field scaled so its largest component has
/// magnitude `alpha`.
fn elastic_field(w: usize, h: usize, sigma: f64, alpha: f64, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = || -> Vec<f32> { (0..w * h).map(|_| rng.random_range(-1.0f32..=1.0)).collect() };
    let (mut dx, mut dy) = (raw(), raw());
    if sigma > 0.0 {
        dx = blur_plane(&dx, w, h, sigma);
        dy = blur_plane(&dy, w, h, sigma);
    }
    let peak = dx.iter().chain(&dy).fold(0f32, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { alpha as f32 / peak } else { 0.0 };
    dx.iter_mut().chain(dy.iter_mut()).for_each(|v| *v *= scale);
    (dx, dy)
}

/// Apply one concrete transform. Deterministic; outputs stay in `[0, 1]`.
pub fn apply_transform(t: &Tensor, ct: &ConcreteTransform) -> Result<Tensor> {
    let (_, h, w) = dims(t)?;
    match *ct {
        ConcreteTransform::None => Ok(t.clone()),
        ConcreteTransform::ColorJitter { brightness, contrast } => {
            let (b, c) = (brightness as f32, contrast as f32);
            Ok(t.map(|v| (v + (v - 0.5) * c + b).clamp(0.0, 1.0)))
        }
        ConcreteTransform::Crop { fraction, x, y } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(invalid!("crop fraction {fraction} outside (0, 1]"));
            }
            let ox = x.clamp(0.0, 1.0) * (1.0 - fraction) * w as f64;
            let oy = y.clamp(0.0, 1.0) * (1.0 - fraction) * h as f64;
            remap(t, |i, j| {
                (
                    (i as f64 + 0.5) * fraction - 0.5 + ox,
                    (j as f64 + 0.5) * fraction - 0.5 + oy,
                )
            })
        }
        ConcreteTransform::Elastic { sigma, alpha, seed } => {
            if alpha == 0.0 {
                return Ok(t.clone());
            }
            let (dx, dy) = elastic_field(w, h, sigma, alpha, seed);
            remap(t, |i, j| {
                let k = j * w + i;
                (i as f64 + dx[k] as f64, j as f64 + dy[k] as f64)
            })
        }
        ConcreteTransform::GaussianBlur { sigma } => {
            if sigma <= 0.0 {
                return Ok(t.clone());
            }
            let plane = h * w;
            let data: Vec<f32> = t
                .data()
                .chunks(plane)
                .flat_map(|ch| blur_plane(ch, w, h, sigma))
                .collect();
            Tensor::new(t.shape(), data)
        }
        ConcreteTransform::GaussianNoise { sigma, seed } => {
            if sigma <= 0.0 {
                return Ok(t.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Normal::new(0.0, sigma).map_err(|e| invalid!("noise sigma: {e}"))?;
            let data = t
                .data()
                .iter()
                .map(|&v| (v + dist.sample(&mut rng) as f32).clamp(0.0, 1.0))
                .collect();
            Tensor::new(t.shape(), data)
        }
        ConcreteTransform::Mirror { flip } => {
            if !flip {
                return Ok(t.clone());
            }
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(w) {
                row.reverse();
            }
            Ok(out)
        }
        ConcreteTransform::Perspective { corners } => {
            if corners.iter().flatten().all(|&v| v == 0.0) {
                return Ok(t.clone());
            }
            let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
            let dst = [[0.0, 0.0], [xm, 0.0], [xm, ym], [0.0, ym]];
            let mut src = dst;
            for (s, c) in src.iter_mut().zip(&corners) {
                s[0] += c[0] * w as f64;
                s[1] += c[1] * h as f64;
            }
            let m = homography(dst, src)?;
            remap(t, |i, j| {
                let (x, y) = (i as f64, j as f64);
                let z = m[6] * x + m[7] * y + m[8];
                ((m[0] * x + m[1] * y + m[2]) / z, (m[3] * x + m[4] * y + m[5]) / z)
            })
        }
        ConcreteTransform::Rotation { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            remap(t, |i, j| {
                let (x, y) = (i as f64 - cx, j as f64 - cy);
                (cx + c * x + s * y, cy - s * x + c * y)
            })
        }
        ConcreteTransform::SaltPepper { rate, seed } => {
            if rate <= 0.0 {
                return Ok(t.clone());
            }
            let (c, plane) = (t.shape()[0], h * w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = t.clone();
            for i in 0..plane {
                if rng.random::<f64>() < rate {
                    let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                    for ch in 0..c {
                        out.data_mut()[ch * plane + i] = v;
                    }
                }
            }
            Ok(out)
        }
        ConcreteTransform::Shear { degrees, axis } => {
            // forward maps (x, y) to (x + y·tanθ, y) or (x, y + x·tanθ)
            let k = degrees.to_radians().tan();
            match axis {
                Axis::Horizontal => remap(t, |i, j| (i as f64 - j as f64 * k, j as f64)),
                Axis::Vertical => remap(t, |i, j| (i as f64, j as f64 - i as f64 * k)),
            }
        }
    }
}

/// How an image of arbitrary aspect ratio becomes network input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ArPolicy {
    /// Stretch to the target size.
    Warp,
    /// Fit inside the target keeping the aspect ratio, centered, rest `fill`.
    Pad { fill: f32 },
    /// Resize the short side to the target and take three crops along the
    /// long side (start, middle, end).
    Crop3,
    /// Keep the aspect ratio with at most `budget` pixels (the target area
    /// when absent). Needs a size-agnostic (SPP) network.
    Variable { budget: Option<usize> },
}

impl ArPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            ArPolicy::Pad { fill } if !(0.0..=1.0).contains(fill) => Err(invalid!("pad fill {fill} outside [0, 1]")),
            ArPolicy::Variable { budget: Some(0) } => Err(invalid!("variable policy budget must be positive")),
            _ => Ok(()),
        }
    }

    pub fn views(&self) -> usize {
        match self {
            ArPolicy::Crop3 => 3,
            _ => 1,
        }
    }
}

/// Where one rendered view comes from and how big it is.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub frame: Frame,
    pub height: usize,
    pub width: usize,
    pub fill: f32,
}

fn round_dim(v: f64) -> usize {
    (v.round() as usize).max(1)
}

/// Largest `(h, w)` with `h·w ≤ budget` whose ratio is closest to `src`.
pub fn variable_size(src_w: usize, src_h: usize, budget: usize) -> (usize, usize) {
    let ratio = src_w as f64 / src_h as f64;
    let mut h = ((budget as f64 / ratio).sqrt().floor() as usize).max(1);
    let width_for = |h: usize| round_dim(h as f64 * ratio);
    while h > 1 && h * width_for(h) > budget {
        h -= 1;
    }
    while (h + 1) * width_for(h + 1) <= budget {
        h += 1;
    }
    let mut w = width_for(h);
    while w > 1 && h * w > budget {
        w -= 1;
    }
    (h, w)
}

/// The views a policy produces for a `src_w × src_h` image and a
/// `target_h × target_w` network input.
pub fn ar_placements(
    src_w: usize,
    src_h: usize,
    policy: &ArPolicy,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<Placement>> {
    policy.validate()?;
    if target_h == 0 || target_w == 0 || src_w == 0 || src_h == 0 {
        return Err(invalid!("image and target sizes must be positive"));
    }
    let (sw, sh) = (src_w as f64, src_h as f64);
    let (tw, th) = (target_w as f64, target_h as f64);
    let warp = |h: usize, w: usize, fill: f32| Placement {
        frame: Frame::warp(src_w, src_h, w, h),
        height: h,
        width: w,
        fill,
    };
    Ok(match policy {
        ArPolicy::Warp => vec![warp(target_h, target_w, GEOMETRIC_FILL)],
        ArPolicy::Pad { fill } => {
            let s = (tw / sw).min(th / sh);
            let (rw, rh) = (round_dim(sw * s).min(target_w), round_dim(sh * s).min(target_h));
            let (px, py) = ((target_w - rw) / 2, (target_h - rh) / 2);
            let (fx, fy) = (sw / rw as f64, sh / rh as f64);
            vec![Placement {
                frame: Frame {
                    scale_x: fx,
                    scale_y: fy,
                    off_x: -(px as f64) * fx,
                    off_y: -(py as f64) * fy,
                },
                height: target_h,
                width: target_w,
                fill: *fill,
            }]
        }
        ArPolicy::Crop3 => {
            let s = (tw / sw).max(th / sh);
            let (rw, rh) = (round_dim(sw * s).max(target_w), round_dim(sh * s).max(target_h));
            let (fx, fy) = (sw / rw as f64, sh / rh as f64);
            let (ex, ey) = (rw - target_w, rh - target_h);
            [0, 1, 2]
                .iter()
                .map(|&k| {
                    let (ox, oy) = (ex * k / 2, ey * k / 2);
                    Placement {
                        frame: Frame {
                            scale_x: fx,
                            scale_y: fy,
                            off_x: ox as f64 * fx,
                            off_y: oy as f64 * fy,
                        },
                        height: target_h,
                        width: target_w,
                        fill: GEOMETRIC_FILL,
                    }
                })
                .collect()
        }
        ArPolicy::Variable { budget } => {
            let (h, w) = variable_size(src_w, src_h, budget.unwrap_or(target_h * target_w));
            vec![warp(h, w, GEOMETRIC_FILL)]
        }
    })
}

/// Render `img` under `policy` into one tensor per view.
pub fn apply_ar_policy(
    img: &RawImage,
    repr: &RepresentationSpec,
    policy: &ArPolicy,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<Tensor>> {
    ar_placements(img.width(), img.height(), policy, target_h, target_w)?
        .iter()
        .map(|p| render_representation(img, repr, &p.frame, p.height, p.width, p.fill))
        .collect()
}

/// Stable 64-bit key for an image identifier (FNV-1a).
pub fn image_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// `n` views of one image: the identity first, then draws from `spec`
/// seeded by the image key.
pub fn make_views(image_id: &str, spec: &TransformSpec, n: usize) -> Result<Vec<ConcreteTransform>> {
    if n == 0 {
        return Err(invalid!("view count must be at least 1"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(image_key(image_id));
    let mut views = vec![ConcreteTransform::None];
    views.extend((1..n).map(|_| sample_transform(spec, &mut rng)));
    Ok(views)
}

pub fn sample_scale<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<usize> {
    if sizes.is_empty() {
        return Err(invalid!("scale range is empty"));
    }
    Ok(sizes[rng.random_range(0..sizes.len())])
}
