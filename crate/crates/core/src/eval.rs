//! Single-view, multi-view and multi-scale prediction, and accuracy /
//! confusion reporting.
//!
//! View predictions are averaged as probabilities in f64, so averaging
//! identical views reproduces the single-view vector exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_transform, make_views, ConcreteTransform, TransformSpec};
use crate::error::{invalid, Error, Result};
use crate::imaging::RawImage;
use crate::network::Model;
use crate::pipeline::{Preprocessing, Sample};
use crate::tensor::Tensor;

/// Anything that maps an NCHW batch to `[N, classes]` probabilities.
pub trait ProbabilityModel: Sync {
    fn probabilities(&self, x: &Tensor) -> Result<Tensor>;
    fn classes(&self) -> usize;
    /// Whether inputs of any spatial size are accepted (SPP).
    fn size_agnostic(&self) -> bool;
}

impl ProbabilityModel for Model {
    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_eval(x)
    }

    fn classes(&self) -> usize {
        Model::classes(self)
    }

    fn size_agnostic(&self) -> bool {
        self.spec().uses_spp()
    }
}

impl<M: ProbabilityModel + ?Sized> ProbabilityModel for &M {
    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        (**self).probabilities(x)
    }

    fn classes(&self) -> usize {
        (**self).classes()
    }

    fn size_agnostic(&self) -> bool {
        (**self).size_agnostic()
    }
}

/// Index of the largest probability; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode probabilities for one preprocessed `[C, H, W]` input.
pub fn predict<M: ProbabilityModel + ?Sized>(model: &M, x: &Tensor) -> Result<Vec<f64>> {
    let batch = Tensor::stack(std::slice::from_ref(x))?;
    let p = model.probabilities(&batch)?;
    Ok(p.data().iter().map(|&v| v as f64).collect())
}

/// Elementwise arithmetic mean of probability vectors.
pub fn average_probabilities(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| invalid!("nothing to average"))?;
    let mut sum = vec![0.0; first.len()];
    for r in rows {
        if r.len() != sum.len() {
            return Err(invalid!("probability vectors of different length"));
        }
        sum.iter_mut().zip(r).for_each(|(s, v)| *s += v);
    }
    Ok(sum.into_iter().map(|s| s / rows.len() as f64).collect())
}

/// How test images are turned into one prediction each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EvalMode {
    Single,
    MultiView { views: usize, transform: TransformSpec },
    MultiScale { sizes: Vec<usize> },
}

impl EvalMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            EvalMode::Single => Ok(()),
            EvalMode::MultiView { views, transform } => {
                if *views == 0 {
                    return Err(invalid!("multi-view evaluation needs at least one view"));
                }
                transform.validate()
            }
            EvalMode::MultiScale { sizes } if sizes.is_empty() || sizes.contains(&0) => {
                Err(invalid!("multi-scale evaluation needs positive sizes"))
            }
            EvalMode::MultiScale { .. } => Ok(()),
        }
    }
}

/// A model together with the preprocessing it was trained with.
pub struct Classifier<M> {
    pub model: M,
    pub prep: Preprocessing,
}

impl<M: ProbabilityModel> Classifier<M> {
    pub fn new(model: M, prep: Preprocessing) -> Self {
        Self { model, prep }
    }

    /// Mean prediction over every aspect-ratio view at `size` and every
    /// transform in `views`.
    fn predict_views(&self, img: &RawImage, size: usize, views: &[ConcreteTransform]) -> Result<Vec<f64>> {
        let mut rows = Vec::new();
        for base in self.prep.render_all(img, size)? {
            for v in views {
                let x = self.prep.normalize(&apply_transform(&base, v)?)?;
                rows.push(predict(&self.model, &x)?);
            }
        }
        average_probabilities(&rows)
    }

    pub fn predict(&self, img: &RawImage) -> Result<Vec<f64>> {
        self.predict_views(img, self.prep.input_size, &[ConcreteTransform::None])
    }

    /// Average over `n` views from [`make_views`], the first untransformed.
    pub fn predict_multiview(&self, img: &RawImage, id: &str, spec: &TransformSpec, n: usize) -> Result<Vec<f64>> {
        self.predict_views(img, self.prep.input_size, &make_views(id, spec, n)?)
    }

    /// Average of the predictions at each input size. Needs SPP.
    pub fn predict_multiscale(&self, img: &RawImage, sizes: &[usize]) -> Result<Vec<f64>> {
        if !self.model.size_agnostic() {
            return Err(Error::Config("multi-scale prediction needs a model with SPP".into()));
        }
        let rows = sizes
            .iter()
            .map(|&s| self.predict_views(img, s, &[ConcreteTransform::None]))
            .collect::<Result<Vec<_>>>()?;
        average_probabilities(&rows)
    }

    pub fn predict_mode(&self, sample: &Sample, mode: &EvalMode) -> Result<Vec<f64>> {
        match mode {
            EvalMode::Single => self.predict(&sample.image),
            EvalMode::MultiView { views, transform } => {
                self.predict_multiview(&sample.image, &sample.id, transform, *views)
            }
            EvalMode::MultiScale { sizes } => self.predict_multiscale(&sample.image, sizes),
        }
    }

    /// Predict every sample (in parallel) and tabulate the results.
    pub fn evaluate(&self, samples: &[&Sample], mode: &EvalMode) -> Result<PredictionReport> {
        if samples.is_empty() {
            return Err(invalid!("cannot evaluate an empty split"));
        }
        mode.validate()?;
        if matches!(mode, EvalMode::MultiScale { .. }) && !self.model.size_agnostic() {
            return Err(Error::Config("multi-scale evaluation needs a model with SPP".into()));
        }
        let probs = samples
            .par_iter()
            .map(|s| self.predict_mode(s, mode))
            .collect::<Result<Vec<_>>>()?;
        let views = self.prep.ar_policy.views()
            * match mode {
                EvalMode::Single => 1,
                EvalMode::MultiView { views, .. } => *views,
                EvalMode::MultiScale { sizes } => sizes.len(),
            };
        PredictionReport::new(
            samples.iter().map(|s| s.id.clone()).collect(),
            samples.iter().map(|s| s.label).collect(),
            probs,
            self.model.classes(),
            views,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionReport {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub views_per_image: usize,
}

impl PredictionReport {
    pub fn new(
        ids: Vec<String>,
        labels: Vec<usize>,
        probabilities: Vec<Vec<f64>>,
        classes: usize,
        views_per_image: usize,
    ) -> Result<Self> {
        if ids.len() != labels.len() || labels.len() != probabilities.len() {
            return Err(invalid!("ids, labels and probabilities differ in length"));
        }
        if labels.is_empty() {
            return Err(invalid!("empty prediction report"));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        let mut predictions = Vec::with_capacity(labels.len());
        for (&label, p) in labels.iter().zip(&probabilities) {
            if label >= classes || p.len() != classes {
                return Err(invalid!(
                    "label {label} or probability length {} outside {classes} classes",
                    p.len()
                ));
            }
            let pred = argmax(p);
            confusion[label][pred] += 1;
            predictions.push(pred);
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            ids,
            labels,
            probabilities,
            predictions,
            confusion,
            views_per_image,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "images={}\nviews_per_image={}\naccuracy={:.6}\n",
            self.labels.len(),
            self.views_per_image,
            self.accuracy
        )
    }

    /// `predictions.csv`, `confusion.csv` and `summary.txt` in `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut rows = String::from("path,label,pred,prob_max\n");
        for i in 0..self.labels.len() {
            let pmax = self.probabilities[i][self.predictions[i]];
            writeln!(
                rows,
                "{},{},{},{pmax:.6}",
                self.ids[i], self.labels[i], self.predictions[i]
            )
            .unwrap();
        }
        fs::write(dir.join("predictions.csv"), rows)?;
        let mut conf = String::new();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(conf, "{}", cells.join(",")).unwrap();
        }
        fs::write(dir.join("confusion.csv"), conf)?;
        fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::ArPolicy;
    use crate::imaging::{RepresentationSpec, Split};

    /// Returns fixed rows in call order, ignoring the input.
    struct Scripted {
        rows: std::sync::Mutex<Vec<Vec<f32>>>,
    }

    impl ProbabilityModel for Scripted {
        fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
            let row = self.rows.lock().unwrap().remove(0);
            Tensor::new(&[x.shape()[0], row.len()], row)
        }
        fn classes(&self) -> usize {
            2
        }
        fn size_agnostic(&self) -> bool {
            true
        }
    }

    fn image() -> RawImage {
        RawImage::new(4, 4, 1, (0..16).map(|v| v * 15).collect()).unwrap()
    }

    #[test]
    fn two_view_average() {
        let c = Classifier::new(
            Scripted {
                rows: std::sync::Mutex::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            },
            Preprocessing::new(RepresentationSpec::default(), ArPolicy::Warp, 4),
        );
        let spec = TransformSpec::of_kind(crate::augment::TransformKind::Rotation);
        assert_eq!(c.predict_multiview(&image(), "a", &spec, 2).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn report_counts() {
        let r = PredictionReport::new(
            vec!["a".into(), "b".into()],
            vec![0, 1],
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            2,
            1,
        )
        .unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0], vec![0, 1]]);
        assert!(r.summary().contains("accuracy=1.000000"));
    }

    #[test]
    fn empty_split_rejected() {
        let c = Classifier::new(
            Scripted {
                rows: std::sync::Mutex::new(vec![]),
            },
            Preprocessing::new(RepresentationSpec::default(), ArPolicy::Warp, 4),
        );
        assert!(c.evaluate(&[], &EvalMode::Single).is_err());
        let s = Sample {
            id: "x".into(),
            label: 0,
            split: Split::Test,
            image: image(),
        };
        let bad = EvalMode::MultiView {
            views: 0,
            transform: TransformSpec::default(),
        };
        assert!(c.evaluate(&[&s], &bad).is_err());
    }
}
