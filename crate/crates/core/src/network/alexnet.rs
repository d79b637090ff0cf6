//! AlexNet-style architectures and the three editing axes: conv depth,
//! layer width, and input size.
//!
//! Input-size geometry table (conv3–5 are 3×3/pad 1 throughout, pool1 and
//! pool2 are 3×3/stride 2, widths are multiplied by `width_scale`):
//!
//! | input | conv1 k/s/p | conv2 k/p | pool5 w/s | width scale | conv stage |
//! |------:|:-----------:|:---------:|:---------:|:-----------:|:-----------|
//! |  32   |   5/1/2     |   3/1     |   2/1     |   0.5       | 32→15→7→6  |
//! |  64   |   7/2/3     |   3/1     |   2/1     |   0.5       | 32→15→7→6  |
//! | 100   |   9/3/0     |   5/2     |   2/1     |   0.75      | 31→15→7→6  |
//! | 150   |  11/4/0     |   5/2     |   3/1     |   0.75      | 35→17→8→6  |
//! | 227   |  11/4/0     |   5/2     |   3/2     |   1.0       | 55→27→13→6 |
//! | 256   |  13/4/0     |   5/2     |   3/2     |   1.0       | 61→30→14→6 |
//! | 320   |  15/5/0     |   5/2     |   3/2     |   1.25      | 62→30→14→6 |
//! | 384   |  17/6/0     |   5/2     |   3/2     |   1.25      | 62→30→14→6 |
//! | 512   |  19/8/0     |   7/3     |   3/2     |   1.5       | 62→30→14→6 |
//!
//! Sizes outside the table borrow the kernels and width of the nearest
//! smaller entry and search conv1 stride/kernel/pad and the pool5 shape for
//! a 6×6 final map.

use serde::{Deserialize, Serialize};

use super::{ArchSpec, InputShape, LayerConfig, LayerKind};
use crate::error::{invalid, Error, Result};
use crate::layers::{LrnParams, PoolGeometry};
use crate::tensor::ConvGeometry;

pub const BASE_CONV_WIDTHS: [usize; 5] = [96, 256, 384, 384, 256];
pub const BASE_FC_WIDTHS: [usize; 2] = [4096, 4096];
pub const SUPPORTED_INPUT_SIZES: [usize; 9] = [32, 64, 100, 150, 227, 256, 320, 384, 512];

const FINAL_MAP: usize = 6;
const POOL12: PoolGeometry = PoolGeometry { window: 3, stride: 2 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub size: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub conv1_pad: usize,
    pub conv2_kernel: usize,
    pub pool5: PoolGeometry,
    pub width_scale: f64,
}

const fn row(
    size: usize,
    k1: usize,
    s1: usize,
    p1: usize,
    k2: usize,
    pool5: (usize, usize),
    width_scale: f64,
) -> InputGeometry {
    InputGeometry {
        size,
        conv1_kernel: k1,
        conv1_stride: s1,
        conv1_pad: p1,
        conv2_kernel: k2,
        pool5: PoolGeometry {
            window: pool5.0,
            stride: pool5.1,
        },
        width_scale,
    }
}

const TABLE: [InputGeometry; 9] = [
    row(32, 5, 1, 2, 3, (2, 1), 0.5),
    row(64, 7, 2, 3, 3, (2, 1), 0.5),
    row(100, 9, 3, 0, 5, (2, 1), 0.75),
    row(150, 11, 4, 0, 5, (3, 1), 0.75),
    row(227, 11, 4, 0, 5, (3, 2), 1.0),
    row(256, 13, 4, 0, 5, (3, 2), 1.0),
    row(320, 15, 5, 0, 5, (3, 2), 1.25),
    row(384, 17, 6, 0, 5, (3, 2), 1.25),
    row(512, 19, 8, 0, 7, (3, 2), 1.5),
];

impl InputGeometry {
    /// Table entry for a supported size, otherwise a searched geometry.
    pub fn for_size(n: usize) -> Result<Self> {
        if let Some(g) = TABLE.iter().find(|g| g.size == n) {
            return Ok(g.clone());
        }
        let idx = TABLE.iter().rposition(|g| g.size < n).unwrap_or(0);
        let template = &TABLE[idx];
        let k_hi = TABLE.get(idx + 1).map_or(template.conv1_kernel, |g| g.conv1_kernel);
        let pool5_options = [(3, 2), (2, 1), (3, 1), (2, 2)];
        for (w5, s5) in pool5_options {
            for stride in 1..=8 {
                for k in (template.conv1_kernel..=k_hi).step_by(2) {
                    for pad in [0, k / 2] {
                        let candidate = InputGeometry {
                            size: n,
                            conv1_kernel: k,
                            conv1_stride: stride,
                            conv1_pad: pad,
                            pool5: PoolGeometry::new(w5, s5),
                            ..template.clone()
                        };
                        if candidate.final_map().ok() == Some(FINAL_MAP) {
                            return Ok(candidate);
                        }
                    }
                }
            }
        }
        Err(Error::UnsupportedSize(n))
    }

    pub fn table() -> &'static [InputGeometry] {
        &TABLE
    }

    fn conv2_pad(&self) -> usize {
        self.conv2_kernel / 2
    }

    /// Side of the map after pool5 for a square input of `self.size`.
    pub fn final_map(&self) -> Result<usize> {
        let c1 = ConvGeometry::square(self.conv1_kernel, self.conv1_stride, self.conv1_pad);
        let (s, _) = c1.output_size(self.size, self.size)?;
        let (s, _) = POOL12.output_size(s, s)?;
        let (s, _) = ConvGeometry::square(self.conv2_kernel, 1, self.conv2_pad()).output_size(s, s)?;
        let (s, _) = POOL12.output_size(s, s)?;
        let (s, _) = self.pool5.output_size(s, s)?;
        Ok(s)
    }
}

/// Width multipliers for the conv and fc stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Width {
    pub conv: f64,
    pub fc: f64,
}

impl From<f64> for Width {
    fn from(f: f64) -> Self {
        Self { conv: f, fc: f }
    }
}

/// Everything about an AlexNet variant besides geometry, width and depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchFlags {
    pub input_channels: usize,
    pub classes: usize,
    pub lrn: bool,
    pub batch_norm: bool,
    pub dropout: bool,
    pub dropout_keep: f64,
    /// Replaces pool5 with spatial pyramid pooling when set.
    pub spp_levels: Option<Vec<usize>>,
}

impl Default for ArchFlags {
    fn default() -> Self {
        Self {
            input_channels: 1,
            classes: 16,
            lrn: true,
            batch_norm: false,
            dropout: true,
            dropout_keep: 0.5,
            spp_levels: None,
        }
    }
}

fn scaled(base: usize, factor: f64) -> usize {
    ((base as f64 * factor).round() as usize).max(1)
}

fn conv_block(tag: &str, idx: usize, out_channels: usize, geom: &InputGeometry, flags: &ArchFlags) -> Vec<LayerConfig> {
    let (kernel, stride, pad) = match idx {
        0 => (geom.conv1_kernel, geom.conv1_stride, geom.conv1_pad),
        1 => (geom.conv2_kernel, 1, geom.conv2_pad()),
        _ => (3, 1, 1),
    };
    let mut block = vec![LayerConfig::new(
        format!("conv{tag}"),
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        },
    )];
    if flags.batch_norm {
        block.push(LayerConfig::new(
            format!("bn{tag}"),
            LayerKind::BatchNorm {
                eps: 1e-5,
                momentum: 0.9,
            },
        ));
    }
    block.push(LayerConfig::new(format!("relu{tag}"), LayerKind::Relu));
    if idx < 2 {
        if flags.lrn {
            // Narrow layers cannot hold a 5-channel window.
            let size = LrnParams::default().size.min(2 * out_channels - 1);
            block.push(LayerConfig::new(
                format!("norm{tag}"),
                LayerKind::Lrn(LrnParams {
                    size,
                    ..LrnParams::default()
                }),
            ));
        }
        block.push(LayerConfig::new(
            format!("pool{tag}"),
            LayerKind::MaxPool {
                window: POOL12.window,
                stride: POOL12.stride,
            },
        ));
    }
    block
}

/// AlexNet variant for `input_size`, with widths scaled and conv depth
/// edited. Depth < 5 removes conv3, conv4, conv5 in that order; depth > 5
/// inserts copies of conv3 after conv3.
pub fn build_alexnet(
    input_size: usize,
    width: impl Into<Width>,
    conv_depth: usize,
    flags: &ArchFlags,
) -> Result<ArchSpec> {
    let geom = InputGeometry::for_size(input_size)?;
    build_alexnet_with_geometry(&geom, width, conv_depth, flags)
}

pub fn build_alexnet_with_geometry(
    geom: &InputGeometry,
    width: impl Into<Width>,
    conv_depth: usize,
    flags: &ArchFlags,
) -> Result<ArchSpec> {
    let width = width.into();
    if conv_depth < 2 {
        return Err(invalid!("conv depth must be at least 2, got {conv_depth}"));
    }
    if !(width.conv > 0.0 && width.fc > 0.0) {
        return Err(invalid!("width factors must be positive, got {width:?}"));
    }
    let mut layers = Vec::new();
    for (i, &base) in BASE_CONV_WIDTHS.iter().enumerate() {
        let tag = (i + 1).to_string();
        let out = scaled(base, geom.width_scale * width.conv);
        layers.extend(conv_block(&tag, i, out, geom, flags));
    }
    layers.push(match &flags.spp_levels {
        Some(levels) => LayerConfig::new("spp5", LayerKind::Spp { levels: levels.clone() }),
        None => LayerConfig::new(
            "pool5",
            LayerKind::MaxPool {
                window: geom.pool5.window,
                stride: geom.pool5.stride,
            },
        ),
    });
    for (i, &base) in BASE_FC_WIDTHS.iter().enumerate() {
        let tag = (i + 6).to_string();
        layers.push(LayerConfig::new(
            format!("fc{tag}"),
            LayerKind::Fc {
                units: scaled(base, geom.width_scale * width.fc),
            },
        ));
        if flags.batch_norm {
            layers.push(LayerConfig::new(
                format!("bn{tag}"),
                LayerKind::BatchNorm {
                    eps: 1e-5,
                    momentum: 0.9,
                },
            ));
        }
        layers.push(LayerConfig::new(format!("relu{tag}"), LayerKind::Relu));
        if flags.dropout {
            layers.push(LayerConfig::new(
                format!("drop{tag}"),
                LayerKind::Dropout {
                    keep: flags.dropout_keep,
                },
            ));
        }
    }
    layers.push(LayerConfig::new("fc8", LayerKind::Fc { units: flags.classes }));
    layers.push(LayerConfig::new("prob", LayerKind::Softmax));

    let spec = ArchSpec {
        input: InputShape {
            channels: flags.input_channels,
            height: geom.size,
            width: geom.size,
        },
        classes: flags.classes,
        layers,
    };
    let spec = edit_depth(&spec, conv_depth)?;
    spec.validate()?;
    Ok(spec)
}

/// Full-width, depth-5 network for input size `n`.
pub fn scale_for_input(n: usize, flags: &ArchFlags) -> Result<ArchSpec> {
    build_alexnet(n, 1.0, 5, flags)
}

/// `(tag, start, end)` layer range of one conv block.
type Block = (String, usize, usize);

/// Conv blocks of the conv stage. The final pooling layer (pool5 or SPP)
/// belongs to no block.
fn conv_blocks(spec: &ArchSpec) -> Result<(Vec<Block>, usize)> {
    let stage = spec.conv_stage_len();
    let head = if stage > 0 && matches!(spec.layers.get(stage).map(|l| &l.kind), Some(LayerKind::Spp { .. })) {
        stage
    } else if stage > 0 && matches!(spec.layers[stage - 1].kind, LayerKind::MaxPool { .. }) {
        stage - 1
    } else {
        return Err(invalid!("architecture has no final pooling layer before the fc stage"));
    };
    let starts: Vec<usize> = (0..head)
        .filter(|&i| matches!(spec.layers[i].kind, LayerKind::Conv { .. }))
        .collect();
    if starts.first() != Some(&0) {
        return Err(invalid!("conv stage must start with a conv layer"));
    }
    let blocks = starts
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let end = starts.get(j + 1).copied().unwrap_or(head);
            let tag = spec.layers[s].name.trim_start_matches("conv").to_string();
            (tag, s, end)
        })
        .collect();
    Ok((blocks, head))
}

/// Remove or insert conv blocks until the conv stage has `depth` convs.
///
/// Removal order: inserted conv3 copies (newest first), then conv3, conv4,
/// conv5. Insertion appends fresh copies of the conv3 block configuration
/// after the last conv3 block. conv1 and conv2 are never touched.
pub fn edit_depth(spec: &ArchSpec, depth: usize) -> Result<ArchSpec> {
    if depth < 2 {
        return Err(invalid!("conv depth must be at least 2, got {depth}"));
    }
    let mut spec = spec.clone();
    loop {
        let (blocks, _) = conv_blocks(&spec)?;
        let current = blocks.len();
        if current == depth {
            break;
        }
        if current > depth {
            let copies: Vec<&(String, usize, usize)> = blocks.iter().filter(|b| b.0.starts_with("3_")).collect();
            let victim = copies
                .last()
                .copied()
                .or_else(|| ["3", "4", "5"].iter().find_map(|t| blocks.iter().find(|b| b.0 == *t)))
                .ok_or_else(|| invalid!("no removable conv layer left for depth {depth}"))?;
            spec.layers.drain(victim.1..victim.2);
        } else {
            let conv3 = blocks
                .iter()
                .find(|b| b.0 == "3")
                .ok_or_else(|| invalid!("cannot deepen a network without conv3"))?;
            let last3 = blocks.iter().rfind(|b| b.0 == "3" || b.0.starts_with("3_")).unwrap();
            let copy_idx = blocks.iter().filter(|b| b.0.starts_with("3_")).count() + 1;
            let new_tag = format!("3_{copy_idx}");
            let copy: Vec<LayerConfig> = spec.layers[conv3.1..conv3.2]
                .iter()
                .map(|l| LayerConfig {
                    name: format!("{}{new_tag}", l.name.trim_end_matches('3')),
                    kind: l.kind.clone(),
                })
                .collect();
            let at = last3.2;
            spec.layers.splice(at..at, copy);
        }
    }
    Ok(spec)
}
