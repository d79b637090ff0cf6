//! Seeded generator of synthetic document pages in four layout archetypes.
//!
//! Pages are white with dark "ink" primitives: text lines drawn as runs of
//! dashes, header blocks, ruled lines and a signature squiggle. Layout
//! positions are jittered heavily so that class identity lives in local
//! structure rather than in fixed pixel locations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::{encode_pnm, write_manifest, ManifestEntry, RawImage, Split};
use crate::pipeline::{Dataset, Sample};
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 32;
const NOISE_SIGMA: f64 = 0.04;
/// Largest whole-page shift, layout units.
const PAGE_SHIFT: f64 = 14.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutClass {
    Letter,
    Memo,
    Form,
    Email,
}

impl LayoutClass {
    pub const ALL: [LayoutClass; 4] = [
        LayoutClass::Letter,
        LayoutClass::Memo,
        LayoutClass::Form,
        LayoutClass::Email,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayoutClass::Letter => "letter",
            LayoutClass::Memo => "memo",
            LayoutClass::Form => "form",
            LayoutClass::Email => "email",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| invalid!("unknown layout class {name:?}"))
    }
}

/// One rendered page.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[1, size, size]`, values in `[0, 1]`.
    pub image: Tensor,
    pub class: LayoutClass,
    pub seed: u64,
}

impl SynthSample {
    pub fn to_raw(&self) -> RawImage {
        RawImage::from_tensor(&self.image).expect("single-channel page")
    }

    /// Color version with ink of the given RGB color on a white page.
    pub fn tinted(&self, ink: [f32; 3]) -> RawImage {
        let size = self.image.shape()[1];
        let mut t = Vec::with_capacity(3 * size * size);
        for c in ink {
            t.extend(self.image.data().iter().map(|&v| v + (1.0 - v) * c));
        }
        RawImage::from_tensor(&Tensor::new(&[3, size, size], t).expect("plane size")).expect("color page")
    }
}

struct Canvas {
    size: usize,
    px: Vec<f32>,
    /// Pixels per layout unit; layouts are designed on a 64-unit page.
    u: f64,
    /// Whole-page shift in layout units.
    dx: f64,
    dy: f64,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            px: vec![1.0; size * size],
            u: size as f64 / 64.0,
            dx: 0.0,
            dy: 0.0,
        }
    }

    /// Darken the rectangle `[x0, x1) × [y0, y1)` given in layout units.
    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, ink: f32) {
        let (x0, x1, y0, y1) = (x0 + self.dx, x1 + self.dx, y0 + self.dy, y1 + self.dy);
        self.fill(x0, y0, x1, y1, ink);
    }

    /// Full-width horizontal rule, shifted only vertically.
    fn rule(&mut self, y0: f64, y1: f64, ink: f32) {
        self.fill(0.0, y0 + self.dy, 64.0, y1 + self.dy, ink);
    }

    fn fill(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, ink: f32) {
        let n = self.size as f64;
        let to_px = |v: f64| (v * self.u).round().clamp(0.0, n) as usize;
        let (a, b) = (to_px(x0), to_px(x1).max(to_px(x0) + 1).min(self.size));
        let (c, d) = (to_px(y0), to_px(y1).max(to_px(y0) + 1).min(self.size));
        for y in c..d {
            for x in a..b {
                let p = &mut self.px[y * self.size + x];
                *p = p.min(ink);
            }
        }
    }

    fn dot(&mut self, x: f64, y: f64, ink: f32) {
        let (px, py) = (((x + self.dx) * self.u) as isize, ((y + self.dy) * self.u) as isize);
        let r = (self.u * 0.6).ceil() as isize;
        for dy in 0..r.max(1) {
            for dx in 0..r.max(1) {
                let (xx, yy) = (px + dx, py + dy);
                if xx >= 0 && yy >= 0 && (xx as usize) < self.size && (yy as usize) < self.size {
                    let p = &mut self.px[yy as usize * self.size + xx as usize];
                    *p = p.min(ink);
                }
            }
        }
    }
}

fn ink<R: Rng>(rng: &mut R) -> f32 {
    rng.random_range(0.05..0.3)
}

/// Text line starting at `x0` with a length drawn from `len`.
fn text_line<R: Rng>(c: &mut Canvas, rng: &mut R, x0: f64, len: std::ops::Range<f64>, y: f64) {
    let x1 = x0 + rng.random_range(len);
    text_span(c, rng, x0, x1, y);
}

/// Words as dark dashes between `x0` and `x1` on row `y`.
fn text_span<R: Rng>(c: &mut Canvas, rng: &mut R, x0: f64, x1: f64, y: f64) {
    let tone = ink(rng);
    let mut x = x0;
    while x < x1 - 1.0 {
        let word = rng.random_range(2.0..6.0f64).min(x1 - x);
        let baseline = y + rng.random_range(-0.3..0.3);
        c.rect(x, baseline, x + word, baseline + 1.0, tone);
        x += word + rng.random_range(1.0..2.0);
    }
}

fn squiggle<R: Rng>(c: &mut Canvas, rng: &mut R, x0: f64, y0: f64, len: f64) {
    let tone = ink(rng);
    let (amp, freq) = (rng.random_range(1.5..3.0), rng.random_range(0.5..0.9));
    let slope = rng.random_range(-0.15..0.15);
    let mut t = 0.0;
    while t < len {
        c.dot(x0 + t, y0 + amp * (freq * t).sin() + slope * t, tone);
        t += 0.25;
    }
}

fn letter<R: Rng>(c: &mut Canvas, rng: &mut R) {
    // sender address block, right-aligned
    let ax = rng.random_range(34.0..44.0);
    let mut y = rng.random_range(2.0..10.0);
    for _ in 0..3 {
        text_line(c, rng, ax, 10.0..18.0, y);
        y += 3.0;
    }
    let m = rng.random_range(3.0..10.0);
    y += rng.random_range(3.0..7.0);
    text_line(c, rng, m, 8.0..14.0, y);
    y += 5.0;
    let width = rng.random_range(36.0..48.0);
    let lines = rng.random_range(5..8);
    for i in 0..lines {
        let short = if i + 1 == lines {
            rng.random_range(0.3..0.7)
        } else {
            1.0
        };
        text_span(c, rng, m, m + width * short, y);
        y += rng.random_range(3.5..4.5);
    }
    let (sx, len) = (m + rng.random_range(0.0..6.0), rng.random_range(12.0..20.0));
    squiggle(c, rng, sx, (y + 3.0).min(58.0), len);
}

fn memo<R: Rng>(c: &mut Canvas, rng: &mut R) {
    let m = rng.random_range(3.0..12.0);
    let mut y = rng.random_range(2.0..10.0);
    let title_w = rng.random_range(14.0..26.0);
    c.rect(m, y, m + title_w, y + rng.random_range(3.0..5.0), ink(rng));
    y += 8.0;
    for _ in 0..rng.random_range(3..5) {
        let key = rng.random_range(4.0..7.0);
        c.rect(m, y, m + key, y + 1.0, ink(rng));
        text_line(c, rng, m + key + 3.0, 10.0..24.0, y);
        y += 3.5;
    }
    double_rule(c, rng, y);
    y += 7.0;
    for _ in 0..rng.random_range(3..6) {
        text_line(c, rng, m, 28.0..46.0, y);
        y += 4.0;
    }
    if rng.random_bool(0.5) {
        double_rule(c, rng, y + 1.0);
    }
}

fn double_rule<R: Rng>(c: &mut Canvas, rng: &mut R, y: f64) {
    let thick = rng.random_range(1.0..2.0);
    c.rule(y, y + thick, ink(rng));
    c.rule(y + 2.5, y + 2.5 + thick, ink(rng));
}

fn form<R: Rng>(c: &mut Canvas, rng: &mut R) {
    let mut y = rng.random_range(2.0..10.0);
    let tx = rng.random_range(8.0..30.0);
    text_line(c, rng, tx, 12.0..20.0, y);
    y += rng.random_range(4.0..8.0);
    let rows = rng.random_range(3..6);
    let gap = rng.random_range(6.0..9.0);
    let tone = ink(rng);
    let top = y;
    let mut cols: Vec<f64> = (0..rng.random_range(1..3))
        .map(|_| rng.random_range(14.0..50.0))
        .collect();
    cols.sort_by(f64::total_cmp);
    for r in 0..rows {
        let ry = y + r as f64 * gap;
        c.rule(ry, ry + 1.0, tone);
        if r + 1 < rows {
            let mut x = 2.0;
            for &cx in cols.iter().chain(std::iter::once(&64.0)) {
                if cx - x > 6.0 {
                    text_line(c, rng, x + 1.0, 2.0..(cx - x - 2.0), ry + gap / 2.0);
                }
                x = cx;
            }
        }
    }
    let bottom = y + (rows - 1) as f64 * gap;
    for cx in cols {
        c.rect(cx, top, cx + 1.0, bottom + 1.0, tone);
    }
}

fn email<R: Rng>(c: &mut Canvas, rng: &mut R) {
    let m = rng.random_range(3.0..12.0);
    let mut y = rng.random_range(2.0..10.0);
    for _ in 0..rng.random_range(4..6) {
        let key = rng.random_range(3.0..5.0);
        c.rect(m, y, m + key, y + 1.0, ink(rng));
        c.dot(m + key + 1.0, y, 0.1);
        text_line(c, rng, m + key + 3.0, 8.0..26.0, y);
        y += 3.0;
    }
    y += rng.random_range(3.0..6.0);
    for _ in 0..rng.random_range(2..4) {
        text_line(c, rng, m, 24.0..44.0, y);
        y += 4.0;
    }
    // quoted reply: a vertical bar in front of indented lines
    let quoted = rng.random_range(2..4);
    c.rect(m, y - 1.0, m + 1.0, y + 4.0 * quoted as f64 - 1.0, ink(rng));
    for _ in 0..quoted {
        text_line(c, rng, m + 3.0, 20.0..36.0, y);
        y += 4.0;
    }
}

/// Render one page. Deterministic in `(class, seed, size)`.
pub fn generate_sample(class: LayoutClass, seed: u64, size: usize) -> Result<SynthSample> {
    if size < MIN_SIZE {
        return Err(invalid!("page size must be at least {MIN_SIZE}, got {size}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = Canvas::new(size);
    canvas.dx = rng.random_range(-PAGE_SHIFT..PAGE_SHIFT);
    canvas.dy = rng.random_range(-PAGE_SHIFT..PAGE_SHIFT);
    match class {
        LayoutClass::Letter => letter(&mut canvas, &mut rng),
        LayoutClass::Memo => memo(&mut canvas, &mut rng),
        LayoutClass::Form => form(&mut canvas, &mut rng),
        LayoutClass::Email => email(&mut canvas, &mut rng),
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    for p in &mut canvas.px {
        *p = (*p + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
    }
    Ok(SynthSample {
        image: Tensor::new(&[1, size, size], canvas.px).expect("page size"),
        class,
        seed,
    })
}

/// Seed of sample `idx` of class number `class` in a dataset built from
/// `base`; distinct for every `(class, idx)` pair.
pub fn sample_seed(base: u64, class: usize, idx: usize, per_class: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((class * per_class + idx) as u64)
}

/// Split of sample `idx` among `n` of its class: the first `⌊0.8n⌋` train,
/// the next `⌊0.1n⌋` validation, the rest test.
pub fn split_for(idx: usize, n: usize) -> Split {
    let train = n * 8 / 10;
    let val = n / 10;
    if idx < train {
        Split::Train
    } else if idx < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// The pages [`generate_dataset`] would write, held in memory. Ids follow
/// the file names without the extension.
pub fn synthetic_dataset(per_class: usize, classes: &[LayoutClass], seed: u64, size: usize) -> Result<Dataset> {
    if per_class == 0 || classes.is_empty() {
        return Err(invalid!("need at least one class and one sample per class"));
    }
    let jobs: Vec<(usize, usize)> = (0..classes.len())
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(c, i)| -> Result<Sample> {
            let class = classes[c];
            let page = generate_sample(class, sample_seed(seed, c, i, per_class), size)?;
            Ok(Sample {
                id: format!("{}_{i:05}", class.name()),
                label: c,
                split: split_for(i, per_class),
                image: page.to_raw(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples))
}

/// Write `per_class` PGM pages for each class plus `manifest.csv` into
/// `out_dir`; labels are positions in `classes`.
pub fn generate_dataset(
    per_class: usize,
    classes: &[LayoutClass],
    seed: u64,
    size: usize,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    if per_class == 0 || classes.is_empty() {
        return Err(invalid!("need at least one class and one sample per class"));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let jobs: Vec<(usize, usize)> = (0..classes.len())
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(c, i)| -> Result<ManifestEntry> {
            let class = classes[c];
            let sample = generate_sample(class, sample_seed(seed, c, i, per_class), size)?;
            let path = out_dir.join(format!("{}_{i:05}.pgm", class.name()));
            fs::write(&path, encode_pnm(&sample.to_raw()))?;
            Ok(ManifestEntry {
                path,
                label: c,
                split: split_for(i, per_class),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
