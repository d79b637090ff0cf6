//! Criteria that train networks on the synthetic corpus.

use std::time::Instant;

use docgrid::augment::{TransformKind, TransformSpec};
use docgrid::eval::{Classifier, EvalMode};
use docgrid::imaging::Split;
use docgrid::network::{build_alexnet, ArchFlags, Model};
use docgrid::synthdoc::{synthetic_dataset, LayoutClass};
use docgrid::train::{train, train_multiscale, TrainConfig};
use serde::Deserialize;

use crate::{ensure, median, ok, Outcome};

#[derive(Deserialize)]
struct Recorded {
    seeds: Vec<u64>,
    val_accuracy: Vec<f64>,
}

#[derive(Deserialize)]
struct Fixture {
    training_sanity: Recorded,
}

fn fixture() -> Fixture {
    serde_json::from_str(include_str!("../fixtures/acceptance.json")).expect("acceptance fixture parses")
}

fn flags(spp: Option<Vec<usize>>) -> ArchFlags {
    ArchFlags {
        classes: 4,
        spp_levels: spp,
        ..ArchFlags::default()
    }
}

fn small_model(size: usize, seed: u64, spp: Option<Vec<usize>>) -> Result<Model, String> {
    ok(Model::init(ok(build_alexnet(size, 0.1, 2, &flags(spp)))?, seed))
}

fn schedule(seed: u64, updates: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        updates,
        base_lr: 0.01,
        lr_step: 100_000,
        seed,
        val_interval: 100,
        ..TrainConfig::default()
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|a| format!("{a:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

/// 125 pages per class leave 100 per class for training, 400 in all.
pub fn training_sanity() -> Outcome {
    let start = Instant::now();
    let recorded = fixture().training_sanity;
    let mut accs = Vec::new();
    for &seed in &recorded.seeds {
        let data = ok(synthetic_dataset(125, &LayoutClass::ALL, seed, 64))?;
        ensure!(
            data.split(Split::Train).len() == 400,
            "{} training pages",
            data.split(Split::Train).len()
        );
        let out = ok(train(
            small_model(64, seed, None)?,
            &data,
            &schedule(seed, 1000),
            &mut |_| {},
        ))?;
        accs.push(out.log.best_accuracy().ok_or("no validation record")?);
    }
    let secs = start.elapsed().as_secs_f64();
    let m = median(accs.clone());
    ensure!(m >= 0.90, "median validation accuracy {m:.3} over {}", fmt(&accs));
    ensure!(secs <= 600.0, "took {secs:.0}s");
    let drift = accs
        .iter()
        .zip(&recorded.val_accuracy)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure!(
        drift <= 0.05,
        "accuracies {} drifted from recorded {}",
        fmt(&accs),
        fmt(&recorded.val_accuracy)
    );
    Ok(format!("median {m:.3} over {} within 1000 updates", fmt(&accs)))
}

/// 200 training pages per class cut to a tenth leaves 80 images; both arms
/// see the same subset and the same 100 validation pages.
pub fn shear_beats_none() -> Outcome {
    let mut diffs = Vec::new();
    let mut pairs = Vec::new();
    for seed in 1..=5u64 {
        let data = ok(synthetic_dataset(250, &LayoutClass::ALL, seed, 64))?;
        let run = |kind: TransformKind| -> Result<f64, String> {
            let cfg = TrainConfig {
                fraction: 0.1,
                val_interval: 50,
                transform: TransformSpec::of_kind(kind),
                ..schedule(seed, 400)
            };
            let out = ok(train(small_model(64, seed, None)?, &data, &cfg, &mut |_| {}))?;
            out.log
                .best_accuracy()
                .ok_or_else(|| "no validation record".to_string())
        };
        let (none, shear) = (run(TransformKind::None)?, run(TransformKind::Shear)?);
        pairs.push((none, shear));
        diffs.push(shear - none);
    }
    let m = median(diffs.clone());
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let detail: Vec<String> = pairs.iter().map(|(n, s)| format!("{n:.2}->{s:.2}")).collect();
    ensure!(
        m >= 0.0,
        "median shear - none {m:+.3}; none->shear {}",
        detail.join(" ")
    );
    Ok(format!(
        "median shear - none {m:+.3}, shear ahead in {wins}/5 seeds; none->shear {}",
        detail.join(" ")
    ))
}

pub fn multiscale() -> Outcome {
    let sizes = [48, 64, 96];
    let mut margins = Vec::new();
    for seed in 1..=3u64 {
        let data = ok(synthetic_dataset(125, &LayoutClass::ALL, seed, 96))?;
        let cfg = TrainConfig {
            batch_size: 16,
            ..schedule(seed, 600)
        };
        let model = small_model(64, seed, Some(vec![1, 2, 4]))?;
        let out = ok(train_multiscale(model, &data, &cfg, &sizes, &mut |_| {}))?;
        let clf = Classifier::new(out.best.model, out.preprocessing);
        let test = data.split(Split::Test);
        let multi = ok(clf.evaluate(&test, &EvalMode::MultiScale { sizes: sizes.to_vec() }))?;
        for p in &multi.probabilities {
            let s: f64 = p.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-5, "seed {seed}: averaged prediction sums to {s}");
        }
        let mut best_single: f64 = 0.0;
        for n in sizes {
            let r = ok(clf.evaluate(&test, &EvalMode::MultiScale { sizes: vec![n] }))?;
            best_single = best_single.max(r.accuracy);
        }
        margins.push(multi.accuracy - best_single);
    }
    let m = median(margins.clone());
    ensure!(m >= -0.02, "median multi - best single {m:+.3} over {}", fmt(&margins));
    Ok(format!(
        "sums within 1e-5; median multi - best single {m:+.3} over {}",
        fmt(&margins)
    ))
}
