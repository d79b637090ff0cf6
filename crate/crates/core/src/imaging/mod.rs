//! Image ingestion and the input representations: grayscale, RGB, HSV,
//! Otsu binary and dense upright SURF.

mod represent;
mod surf;

pub(crate) use represent::bilinear;
pub use represent::{
    channel_means, normalize, render_representation, stack_representations, Channel, Frame, RepresentationSpec,
};
pub use surf::{dense_surf_grid, surf_descriptor, SURF_LEN, SURF_SCALE};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// 8-bit image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid!("image dimensions must be positive, got {width}x{height}"));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid!("images have 1 or 3 channels, got {channels}"));
        }
        if samples.len() != width * height * channels {
            return Err(invalid!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                samples.len()
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn is_color(&self) -> bool {
        self.channels == 3
    }

    /// Quantize a `[C, H, W]` tensor with values in `[0, 1]` (clamped).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => return Err(invalid!("expected a [C, H, W] tensor, got {:?}", t.shape())),
        };
        let plane = h * w;
        let mut samples = vec![0u8; c * plane];
        for ch in 0..c {
            for i in 0..plane {
                samples[i * c + ch] = quantize(t.data()[ch * plane + i]);
            }
        }
        Self::new(w, h, c, samples)
    }

    /// Channel `c` as floats in `[0, 1]`.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.samples
            .iter()
            .skip(c)
            .step_by(self.channels)
            .map(|&v| v as f32 / 255.0)
            .collect()
    }

    /// Integer luma per pixel (601 weights, rounded).
    pub fn luma_u8(&self) -> Vec<u8> {
        if self.channels == 1 {
            return self.samples.clone();
        }
        self.samples
            .chunks_exact(3)
            .map(|p| luma(p[0] as f64, p[1] as f64, p[2] as f64).round() as u8)
            .collect()
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn decode_image(bytes: &[u8]) -> Result<RawImage> {
    match bytes.get(..2) {
        Some(b"P5") | Some(b"P6") => decode_pnm(bytes),
        _ if bytes.starts_with(b"\x89PNG") => decode_png(bytes),
        _ => Err(Error::Decode(
            "unrecognized image format (expected P5, P6 or PNG)".into(),
        )),
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    decode_image(&fs::read(path)?).map_err(|e| match e {
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decode_pnm(bytes: &[u8]) -> Result<RawImage> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode("malformed PNM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode("malformed PNM header".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Decode(format!("unsupported PNM maxval {maxval}")));
    }
    let n = width * height * channels;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Decode("truncated PNM pixel data".into()))?;
    let samples = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter()
            .map(|&v| ((v.min(maxval as u8) as usize * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    RawImage::new(width, height, channels, samples).map_err(|e| Error::Decode(e.to_string()))
}

fn decode_png(bytes: &[u8]) -> Result<RawImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        RawImage::new(w, h, 3, img.into_rgb8().into_raw())
    } else {
        RawImage::new(w, h, 1, img.into_luma8().into_raw())
    }
}

/// Binary PGM (1 channel) or PPM (3 channels).
pub fn encode_pnm(img: &RawImage) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.samples);
    out
}

/// Writes PNG for a `.png` extension, PGM/PPM otherwise.
pub fn write_image(path: impl AsRef<Path>, img: &RawImage) -> Result<()> {
    let path = path.as_ref();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        fs::write(path, encode_pnm(img))?;
        return Ok(());
    }
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &img.samples,
        img.width as u32,
        img.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Decode(other.to_string()),
    })
}

/// Single-channel `[1, H, W]` tensor in `[0, 1]`; 601 luma for color.
pub fn to_grayscale(img: &RawImage) -> Tensor {
    let data = if img.channels == 1 {
        img.plane(0)
    } else {
        img.samples
            .chunks_exact(3)
            .map(|p| (luma(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0) as f32)
            .collect()
    };
    Tensor::new(&[1, img.height, img.width], data).expect("plane size")
}

/// `[3, H, W]` tensor in `[0, 1]`; gray input is replicated.
pub fn to_rgb(img: &RawImage) -> Tensor {
    let mut data = Vec::with_capacity(3 * img.width * img.height);
    for c in 0..3 {
        data.extend(img.plane(if img.channels == 1 { 0 } else { c }));
    }
    Tensor::new(&[3, img.height, img.width], data).expect("plane size")
}

/// Hexcone HSV of one RGB pixel, all components in `[0, 1]`. Hue is the
/// angle divided by 360 and is 0 for achromatic pixels.
pub fn rgb_to_hsv_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    [(h / 6.0).rem_euclid(1.0), s, max]
}

pub fn hsv_to_rgb_pixel([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Convert a `[3, H, W]` RGB tensor to HSV planes.
pub fn rgb_tensor_to_hsv(rgb: &Tensor) -> Result<Tensor> {
    map_pixels3(rgb, rgb_to_hsv_pixel)
}

pub fn hsv_tensor_to_rgb(hsv: &Tensor) -> Result<Tensor> {
    map_pixels3(hsv, hsv_to_rgb_pixel)
}

fn map_pixels3(t: &Tensor, f: fn([f64; 3]) -> [f64; 3]) -> Result<Tensor> {
    let [h, w] = match *t.shape() {
        [3, h, w] => [h, w],
        _ => return Err(invalid!("expected a 3-channel [3, H, W] tensor, got {:?}", t.shape())),
    };
    let plane = h * w;
    let src = t.data();
    let mut out = vec![0f32; 3 * plane];
    for i in 0..plane {
        let px = f([src[i] as f64, src[plane + i] as f64, src[2 * plane + i] as f64]);
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32;
        }
    }
    Tensor::new(&[3, h, w], out)
}

pub fn rgb_to_hsv(img: &RawImage) -> Result<Tensor> {
    if img.channels != 3 {
        return Err(invalid!("HSV conversion needs a 3-channel image, got {}", img.channels));
    }
    rgb_tensor_to_hsv(&to_rgb(img))
}

pub fn histogram(img: &RawImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for v in img.luma_u8() {
        hist[v as usize] += 1;
    }
    hist
}

/// Threshold maximizing the between-class variance `(S·n0 − N·s0)² / (n0·n1)`
/// over splits `{≤ t}` / `{> t}`; the smallest `t` wins ties. `None` when
/// fewer than two bins are occupied.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let n: u64 = hist.iter().sum();
    let total: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best: Option<(u8, f64)> = None;
    for (t, &count) in hist.iter().enumerate().take(255) {
        n0 += count;
        s0 += t as u128 * count as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (total * n0 as u128) as i128 - (s0 * n as u128) as i128;
        let objective = (diff as f64).powi(2) / (n0 as f64 * n1 as f64);
        if best.is_none_or(|(_, b)| objective > b) {
            best = Some((t as u8, objective));
        }
    }
    best.map(|(t, _)| t)
}

/// `[1, H, W]` indicator of luma above the Otsu threshold; all zeros for a
/// constant image.
pub fn otsu_binarize(img: &RawImage) -> Tensor {
    let gray = img.luma_u8();
    let data = match otsu_threshold(&histogram(img)) {
        Some(t) => gray.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect(),
        None => vec![0.0; gray.len()],
    };
    Tensor::new(&[1, img.height, img.width], data).expect("plane size")
}

/// Summed-area table with a zero border row and column, so
/// `at(x, y) = Σ_{i ≤ x, j ≤ y} v(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    pub fn new(values: &[f64], width: usize, height: usize) -> Result<Self> {
        if values.len() != width * height {
            return Err(invalid!(
                "{width}x{height} integral image needs {} values",
                width * height
            ));
        }
        let stride = width + 1;
        let mut sums = vec![0.0; stride * (height + 1)];
        for y in 0..height {
            let mut row = 0.0;
            for x in 0..width {
                row += values[y * width + x];
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Ok(Self { width, height, sums })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.sums[(y + 1) * (self.width + 1) + x + 1]
    }

    /// Sum over the inclusive rectangle `[x0, x1] × [y0, y1]`.
    pub fn box_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.width + 1;
        let (a, b) = (y0 * s, (y1 + 1) * s);
        self.sums[b + x1 + 1] - self.sums[a + x1 + 1] - self.sums[b + x0] + self.sums[a + x0]
    }
}

/// Summed-area table of a single-channel `[1, H, W]` or `[H, W]` tensor.
pub fn integral_image(gray: &Tensor) -> Result<IntegralImage> {
    let (h, w) = match *gray.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => return Err(invalid!("integral image needs one channel, got {:?}", gray.shape())),
    };
    let values: Vec<f64> = gray.data().iter().map(|&v| v as f64).collect();
    IntegralImage::new(&values, w, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest row; `path` is resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: usize,
    split: Split,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        invalid!("{}: {e}", path.display())
    }
}

/// Reads a `path,label,split` CSV manifest.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?;
    if headers != vec!["path", "label", "split"] {
        return Err(invalid!("{}: manifest header must be path,label,split", path.display()));
    }
    reader
        .deserialize::<ManifestRow>()
        .map(|row| {
            let row = row.map_err(|e| csv_error(path, e))?;
            Ok(ManifestEntry {
                path: base.join(row.path),
                label: row.label,
                split: row.split,
            })
        })
        .collect()
}

/// Writes entries with paths relative to the manifest's directory when
/// possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for e in entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        writer
            .serialize(ManifestRow {
                path: rel.to_string_lossy().into_owned(),
                label: e.label,
                split: e.split,
            })
            .map_err(|err| csv_error(path, err))?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn color(pixels: &[[u8; 3]]) -> RawImage {
        RawImage::new(pixels.len(), 1, 3, pixels.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn grayscale_examples() {
        let g = to_grayscale(&color(&[[255, 255, 255], [255, 0, 0]]));
        assert!((g.data()[0] - 1.0).abs() < 1e-6);
        assert!((g.data()[1] - 0.299).abs() < 1e-6);
        let gray = RawImage::new(2, 1, 1, vec![0, 51]).unwrap();
        assert_eq!(to_grayscale(&gray).data(), &[0.0, 0.2]);
    }

    #[test]
    fn hsv_examples() {
        let hsv = rgb_to_hsv(&color(&[[255, 0, 0], [100, 100, 100]])).unwrap();
        let d = hsv.data();
        assert_eq!([d[0], d[2], d[4]], [0.0, 1.0, 1.0]);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[3], 0.0);
        assert!((d[5] - 100.0 / 255.0).abs() < 1e-6);
        let gray = RawImage::new(1, 1, 1, vec![3]).unwrap();
        assert!(matches!(rgb_to_hsv(&gray), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn otsu_bimodal_and_constant() {
        let img = RawImage::new(4, 1, 1, vec![0, 255, 0, 255]).unwrap();
        assert_eq!(otsu_binarize(&img).data(), &[0.0, 1.0, 0.0, 1.0]);
        let flat = RawImage::new(3, 1, 1, vec![200; 3]).unwrap();
        assert_eq!(otsu_threshold(&histogram(&flat)), None);
        assert_eq!(otsu_binarize(&flat).data(), &[0.0; 3]);
    }

    #[test]
    fn integral_examples() {
        let ones = Tensor::full(&[1, 3, 3], 1.0);
        let ii = integral_image(&ones).unwrap();
        assert_eq!(ii.at(2, 2), 9.0);
        assert_eq!(ii.box_sum(1, 1, 2, 2), 4.0);
        let one = integral_image(&Tensor::full(&[1, 1], 0.5)).unwrap();
        assert_eq!(one.at(0, 0), 0.5);
    }

    #[test]
    fn pnm_round_trip_with_comments() {
        let img = RawImage::new(3, 2, 3, (0..18).map(|v| v * 10).collect()).unwrap();
        assert_eq!(decode_image(&encode_pnm(&img)).unwrap(), img);
        let bytes = b"P5\n# made by hand\n2 1\n# max\n15\n\x00\x0f";
        let g = decode_image(bytes).unwrap();
        assert_eq!(g.samples(), &[0, 255]);
        assert!(matches!(decode_image(b"P5\n2 2\n255\n\x00"), Err(Error::Decode(_))));
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::Decode(_))));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for channels in [1, 3] {
            let img = RawImage::new(5, 4, channels, (0..20 * channels).map(|v| (v * 7) as u8).collect()).unwrap();
            let p = dir.path().join(format!("x{channels}.png"));
            write_image(&p, &img).unwrap();
            assert_eq!(read_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.csv");
        let entries = vec![
            ManifestEntry {
                path: dir.path().join("a.pgm"),
                label: 0,
                split: Split::Train,
            },
            ManifestEntry {
                path: dir.path().join("sub/b.pgm"),
                label: 3,
                split: Split::Test,
            },
        ];
        write_manifest(&m, &entries).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        assert_eq!(text, "path,label,split\na.pgm,0,train\nsub/b.pgm,3,test\n");
        assert_eq!(read_manifest(&m).unwrap(), entries);
    }

    #[test]
    fn tensor_quantization() {
        let t = Tensor::new(&[1, 1, 3], vec![-0.5, 0.5, 2.0]).unwrap();
        assert_eq!(RawImage::from_tensor(&t).unwrap().samples(), &[0, 128, 255]);
    }
}
