//! Dense upright SURF: fixed orientation, single scale, 64 values per point.

use super::{IntegralImage, RawImage};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Sampling scale `s`; the descriptor window spans `20s` pixels.
pub const SURF_SCALE: usize = 2;
pub const SURF_LEN: usize = 64;

const SUBREGIONS: usize = 4;
const SAMPLES: usize = 5;
const HALF_WINDOW: isize = 10 * SURF_SCALE as isize;
const HAAR_HALF: isize = SURF_SCALE as isize;
const MARGIN: usize = (HALF_WINDOW + 2 * HAAR_HALF) as usize;
const GAUSS_SIGMA: f64 = 3.3 * SURF_SCALE as f64;

/// Integral image of the gray values, padded by edge replication so every
/// sample of a descriptor centered inside the image is readable.
pub(crate) struct SurfImage {
    width: usize,
    height: usize,
    integral: IntegralImage,
    weights: Vec<f64>,
}

impl SurfImage {
    pub(crate) fn new(img: &RawImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let gray = img.luma_u8();
        let (pw, ph) = (w + 2 * MARGIN, h + 2 * MARGIN);
        let mut padded = vec![0.0; pw * ph];
        for y in 0..ph {
            let sy = y.saturating_sub(MARGIN).min(h - 1);
            for x in 0..pw {
                let sx = x.saturating_sub(MARGIN).min(w - 1);
                padded[y * pw + x] = gray[sy * w + sx] as f64;
            }
        }
        let side = SUBREGIONS * SAMPLES;
        let weights = (0..side * side)
            .map(|k| {
                let (dx, dy) = (offset(k % side), offset(k / side));
                (-(dx * dx + dy * dy) as f64 / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp()
            })
            .collect();
        Self {
            width: w,
            height: h,
            integral: IntegralImage::new(&padded, pw, ph).expect("padded size"),
            weights,
        }
    }

    fn block(&self, x0: isize, y0: isize, x1: isize, y1: isize) -> f64 {
        let m = MARGIN as isize;
        self.integral.box_sum(
            (x0 + m) as usize,
            (y0 + m) as usize,
            (x1 + m) as usize,
            (y1 + m) as usize,
        )
    }

    /// Descriptor at pixel `(cx, cy)`; zero when the point lies outside the
    /// image or the window has no gradient.
    pub(crate) fn descriptor(&self, cx: isize, cy: isize) -> [f32; SURF_LEN] {
        let mut out = [0f32; SURF_LEN];
        if cx < 0 || cy < 0 || cx >= self.width as isize || cy >= self.height as isize {
            return out;
        }
        let side = SUBREGIONS * SAMPLES;
        let mut acc = [0f64; SURF_LEN];
        for sy in 0..side {
            let py = cy + offset(sy);
            for sx in 0..side {
                let px = cx + offset(sx);
                let (h0, h1) = (HAAR_HALF, HAAR_HALF - 1);
                let right = self.block(px, py - h0, px + h1, py + h1);
                let left = self.block(px - h0, py - h0, px - 1, py + h1);
                let bottom = self.block(px - h0, py, px + h1, py + h1);
                let top = self.block(px - h0, py - h0, px + h1, py - 1);
                let wgt = self.weights[sy * side + sx];
                let (dx, dy) = ((right - left) * wgt, (bottom - top) * wgt);
                let cell = 4 * ((sy / SAMPLES) * SUBREGIONS + sx / SAMPLES);
                acc[cell] += dx;
                acc[cell + 1] += dx.abs();
                acc[cell + 2] += dy;
                acc[cell + 3] += dy.abs();
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for (o, a) in out.iter_mut().zip(acc) {
                *o = (a / norm) as f32;
            }
        }
        out
    }
}

/// Offset of sample `i` from the window center, in pixels.
fn offset(i: usize) -> isize {
    -HALF_WINDOW + (i * SURF_SCALE + SURF_SCALE / 2) as isize
}

/// Single descriptor at an integer pixel position.
pub fn surf_descriptor(img: &RawImage, x: usize, y: usize) -> [f32; SURF_LEN] {
    SurfImage::new(img).descriptor(x as isize, y as isize)
}

/// Descriptors on an `n × n` grid spread evenly over the full image,
/// as a `[64, n, n]` tensor. Values are L2-normalized per grid point.
pub fn dense_surf_grid(img: &RawImage, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(invalid!("SURF grid size must be positive"));
    }
    let surf = SurfImage::new(img);
    let sx = img.width() as f64 / n as f64;
    let sy = img.height() as f64 / n as f64;
    let plane = n * n;
    let mut data = vec![0f32; SURF_LEN * plane];
    for gy in 0..n {
        let cy = ((gy as f64 + 0.5) * sy - 0.5).round() as isize;
        for gx in 0..n {
            let cx = ((gx as f64 + 0.5) * sx - 0.5).round() as isize;
            let d = surf.descriptor(cx, cy);
            for (k, v) in d.iter().enumerate() {
                data[k * plane + gy * n + gx] = *v;
            }
        }
    }
    Tensor::new(&[SURF_LEN, n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> RawImage {
        let s = (0..w * h).map(|i| f(i % w, i / w)).collect();
        RawImage::new(w, h, 1, s).unwrap()
    }

    #[test]
    fn constant_image_gives_zero_descriptors() {
        let t = dense_surf_grid(&gray(30, 20, |_, _| 77), 8).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_edge_is_horizontal_gradient() {
        let img = gray(64, 64, |x, _| if x < 32 { 20 } else { 220 });
        let d = surf_descriptor(&img, 32, 32);
        let (mut sdx, mut sdy, mut adx) = (0.0, 0.0, 0.0);
        for c in 0..16 {
            sdx += d[4 * c];
            adx += d[4 * c + 1];
            sdy += d[4 * c + 2];
        }
        assert!(sdx > 0.5);
        assert!((sdx - adx).abs() < 1e-6);
        assert!(sdy.abs() < 1e-6);
    }

    #[test]
    fn norms_are_zero_or_one() {
        let img = gray(50, 40, |x, y| ((x * 31 + y * 17) % 256) as u8);
        let t = dense_surf_grid(&img, 9).unwrap();
        for p in 0..81 {
            let n: f64 = (0..64)
                .map(|k| (t.data()[k * 81 + p] as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-4, "norm {n}");
        }
    }

    #[test]
    fn tiny_image_is_not_an_error() {
        let img = gray(3, 2, |x, y| (x * 50 + y * 9) as u8);
        assert_eq!(dense_surf_grid(&img, 4).unwrap().shape(), &[64, 4, 4]);
    }

    #[test]
    fn outside_point_is_zero() {
        let img = gray(10, 10, |x, _| (x * 20) as u8);
        let s = SurfImage::new(&img);
        assert_eq!(s.descriptor(-1, 3), [0.0; SURF_LEN]);
        assert_ne!(s.descriptor(5, 5), [0.0; SURF_LEN]);
    }
}
