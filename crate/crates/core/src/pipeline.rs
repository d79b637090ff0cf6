//! Datasets in memory and the preprocessing that turns a raw image into
//! network input: aspect-ratio policy, representation, normalization.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{ar_placements, ArPolicy, Placement};
use crate::error::{invalid, Result};
use crate::imaging::{
    channel_means, normalize, read_image, read_manifest, render_representation, RawImage, RepresentationSpec, Split,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Identifier used for seeding views; the image path for loaded data.
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub image: RawImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Decode every image listed in a manifest, keeping manifest order.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        let samples = entries
            .par_iter()
            .map(|e| {
                Ok(Sample {
                    id: e.path.to_string_lossy().into_owned(),
                    label: e.label,
                    split: e.split,
                    image: read_image(&e.path)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// One more than the largest label.
    pub fn classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }
}

/// Everything needed to turn a raw image into network input. Stored with
/// checkpoints so evaluation repeats training-time preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub representation: RepresentationSpec,
    pub ar_policy: ArPolicy,
    pub input_size: usize,
    /// Per-channel means from the training split; empty means none.
    #[serde(default)]
    pub means: Vec<f64>,
}

impl Preprocessing {
    pub fn new(representation: RepresentationSpec, ar_policy: ArPolicy, input_size: usize) -> Self {
        Self {
            representation,
            ar_policy,
            input_size,
            means: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.representation.depth()
    }

    pub fn placements(&self, img: &RawImage, size: usize) -> Result<Vec<Placement>> {
        ar_placements(img.width(), img.height(), &self.ar_policy, size, size)
    }

    /// Render one placement into `[0, 1]` channels, before normalization.
    pub fn render(&self, img: &RawImage, p: &Placement) -> Result<Tensor> {
        render_representation(img, &self.representation, &p.frame, p.height, p.width, p.fill)
    }

    /// Every view of `img` at `size`, rendered but not normalized.
    pub fn render_all(&self, img: &RawImage, size: usize) -> Result<Vec<Tensor>> {
        self.placements(img, size)?
            .iter()
            .map(|p| self.render(img, p))
            .collect()
    }

    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        if self.means.is_empty() {
            Ok(t.clone())
        } else {
            normalize(t, &self.means)
        }
    }

    /// Set channel means from the views of `train` at the base input size,
    /// accumulated in sample order.
    pub fn fit_means(&mut self, train: &[&Sample]) -> Result<()> {
        if train.is_empty() {
            return Err(invalid!("cannot compute channel means of an empty split"));
        }
        let rendered = train
            .par_iter()
            .map(|s| self.render_all(&s.image, self.input_size))
            .collect::<Result<Vec<_>>>()?;
        self.means = channel_means(rendered.iter().flatten())?;
        Ok(())
    }
}
