//! Prediction averaging and report aggregation, with stub models standing
//! in for trained networks.

use docgrid::augment::{ArPolicy, TransformKind, TransformSpec};
use docgrid::eval::{average_probabilities, Classifier, EvalMode, ProbabilityModel};
use docgrid::imaging::{RawImage, RepresentationSpec, Split};
use docgrid::network::{build_alexnet, ArchFlags, Model};
use docgrid::pipeline::{Preprocessing, Sample};
use docgrid::Result;
use docgrid::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Probabilities drawn from a generator seeded by the input's bytes.
struct HashStub {
    classes: usize,
}

impl ProbabilityModel for HashStub {
    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let per = x.len() / n;
        let mut out = Vec::with_capacity(n * self.classes);
        for item in x.data().chunks(per) {
            let key = item.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
                (h ^ v.to_bits() as u64).wrapping_mul(0x100_0000_01b3)
            });
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let raw: Vec<f32> = (0..self.classes).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f32 = raw.iter().sum();
            out.extend(raw.iter().map(|v| v / s));
        }
        Tensor::new(&[n, self.classes], out)
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn size_agnostic(&self) -> bool {
        true
    }
}

fn samples(n: usize, classes: usize, seed: u64, size: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Sample {
            id: format!("img{i:05}"),
            label: rng.random_range(0..classes),
            split: Split::Test,
            image: RawImage::new(size, size, 1, (0..size * size).map(|_| rng.random()).collect()).unwrap(),
        })
        .collect()
}

fn prep(size: usize) -> Preprocessing {
    Preprocessing::new(RepresentationSpec::default(), ArPolicy::Warp, size)
}

#[test]
fn random_stub_scores_chance() {
    let classes = 16;
    let data = samples(10_000, classes, 1, 6);
    let refs: Vec<&Sample> = data.iter().collect();
    let clf = Classifier::new(HashStub { classes }, prep(6));
    let report = clf.evaluate(&refs, &EvalMode::Single).unwrap();
    // five standard errors of a 1/16 Bernoulli mean over 10^4 draws
    let se = (1.0 / 16.0 * 15.0 / 16.0 / 10_000f64).sqrt();
    assert!((report.accuracy - 1.0 / 16.0).abs() < 5.0 * se, "{}", report.accuracy);
    let trace: usize = (0..classes).map(|c| report.confusion[c][c]).sum();
    assert_eq!(report.accuracy, trace as f64 / 10_000.0);
    for p in &report.probabilities {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn identity_views_reproduce_single_view_bitwise() {
    let flags = ArchFlags {
        classes: 4,
        ..ArchFlags::default()
    };
    let model = Model::init(build_alexnet(32, 0.1, 2, &flags).unwrap(), 2).unwrap();
    let clf = Classifier::new(model, prep(32));
    let identity = TransformSpec::of_kind(TransformKind::None);
    for s in samples(5, 4, 3, 40) {
        let single = clf.predict(&s.image).unwrap();
        assert_eq!(clf.predict_multiview(&s.image, &s.id, &identity, 10).unwrap(), single);
    }
}

#[test]
fn multiview_is_the_arithmetic_mean_of_views() {
    let clf = Classifier::new(HashStub { classes: 5 }, prep(12));
    let spec = TransformSpec::of_kind(TransformKind::Shear);
    for s in samples(5, 5, 4, 12) {
        let views = docgrid::augment::make_views(&s.id, &spec, 10).unwrap();
        let base = clf.prep.render_all(&s.image, 12).unwrap().remove(0);
        let rows: Vec<Vec<f64>> = views
            .iter()
            .map(|v| {
                let x = docgrid::augment::apply_transform(&base, v).unwrap();
                docgrid::eval::predict(&clf.model, &x).unwrap()
            })
            .collect();
        let mut mean = [0.0; 5];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / 10.0).collect();
        assert_eq!(clf.predict_multiview(&s.image, &s.id, &spec, 10).unwrap(), mean);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn averaging_preserves_the_simplex(seed in any::<u64>(), rows in 1usize..12, classes in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum::<f64>().max(1e-12);
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let avg = average_probabilities(&data).unwrap();
        prop_assert!((avg.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(avg.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn evaluation_ignores_sample_order(seed in any::<u64>()) {
        let data = samples(40, 3, seed, 5);
        let clf = Classifier::new(HashStub { classes: 3 }, prep(5));
        let mut refs: Vec<&Sample> = data.iter().collect();
        let a = clf.evaluate(&refs, &EvalMode::Single).unwrap();
        refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 7));
        let b = clf.evaluate(&refs, &EvalMode::Single).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert_eq!(&a.confusion, &b.confusion);
        prop_assert_eq!(a.views_per_image, b.views_per_image);
        let pairs = |r: &docgrid::eval::PredictionReport| {
            let mut v: Vec<(String, usize)> = r.ids.iter().cloned().zip(r.predictions.iter().copied()).collect();
            v.sort();
            v
        };
        prop_assert_eq!(pairs(&a), pairs(&b));
    }
}
