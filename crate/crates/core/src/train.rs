//! SGD with momentum, step learning-rate decay, validation-monitored
//! checkpoint selection, training-set subsampling and multi-scale training.
//!
//! Every random draw is seeded from `(seed, update, position)`, and batch
//! chunks are fixed independently of the thread pool, so a run is a pure
//! function of its inputs whatever the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_transform, sample_scale, sample_transform, ArPolicy, TransformSpec};
use crate::error::{invalid, Error, Result};
use crate::eval::{Classifier, EvalMode};
use crate::imaging::{RepresentationSpec, Split};
use crate::layers::{softmax_xent, Mode};
use crate::network::{Checkpoint, CheckpointMeta, Gradients, LayerKind, Model};
use crate::pipeline::{Dataset, Preprocessing, Sample};
use crate::tensor::Tensor;

/// Largest group of same-shaped samples forwarded together when the network
/// has no batch norm.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub updates: usize,
    pub base_lr: f64,
    /// Updates between learning-rate decays.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub transform: TransformSpec,
    pub ar_policy: ArPolicy,
    pub representation: RepresentationSpec,
    /// Input sizes drawn per image for multi-scale training.
    pub scales: Option<Vec<usize>>,
    /// Fraction of the training split used, in `(0, 1]`.
    pub fraction: f64,
    pub val_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            updates: 500_000,
            base_lr: 0.003,
            lr_step: 150_000,
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            transform: TransformSpec::default(),
            ar_policy: ArPolicy::Warp,
            representation: RepresentationSpec::default(),
            scales: None,
            fraction: 1.0,
            val_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("updates", self.updates),
            ("lr_step", self.lr_step),
            ("val_interval", self.val_interval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid!("{name} must be positive"));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(invalid!("base_lr must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid!("lr_decay must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid!("weight_decay must be non-negative"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(invalid!("fraction must be in (0, 1]"));
        }
        if let Some(s) = &self.scales {
            if s.is_empty() || s.contains(&0) {
                return Err(invalid!("scales must be a non-empty list of positive sizes"));
            }
        }
        self.transform.validate()?;
        self.ar_policy.validate()?;
        self.representation.validate()
    }
}

/// `base · decay^⌊update / step⌋`.
pub fn lr_at(update: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.lr_decay.powi((update / cfg.lr_step) as i32)
}

/// Momentum buffers for every learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: model.learnable().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// `v ← μv − lr·(g + λw)`, `w ← w + v`.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &Gradients,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let g = grads.tensors();
        let mut w = model.learnable_mut();
        if g.len() != w.len() || w.len() != self.velocity.len() {
            return Err(invalid!(
                "gradient count {} does not match {} parameters",
                g.len(),
                w.len()
            ));
        }
        if let Some(i) =
            (0..g.len()).find(|&i| g[i].shape() != w[i].shape() || self.velocity[i].shape() != w[i].shape())
        {
            return Err(invalid!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g[i].shape(),
                w[i].shape()
            ));
        }
        let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
        for ((w, g), v) in w.iter_mut().zip(&g).zip(&mut self.velocity) {
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi - lr * (gi + wd * *wi);
                *wi += *vi;
            }
        }
        Ok(())
    }
}

/// `⌈fraction · N⌉` samples chosen by a seeded shuffle, in original order.
pub fn subsample<'a>(items: &[&'a Sample], fraction: f64, seed: u64) -> Result<Vec<&'a Sample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid!("fraction {fraction} outside (0, 1]"));
    }
    // tolerate representation error: 0.1 · 30 is 3.0000000000000004
    let keep = ((fraction * items.len() as f64 - 1e-9).ceil() as usize).clamp(1.min(items.len()), items.len());
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| items[i]).collect())
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed;
    for v in [a, b] {
        x = (x ^ v.wrapping_add(0x9e37_79b9_7f4a_7c15)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

/// Sample indices in reshuffled epochs.
struct EpochSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            u64::MAX,
            self.epoch,
        )));
        self.pos = 0;
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.n {
                    self.epoch += 1;
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Updates completed.
    pub update: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Update count of the retained checkpoint.
    pub best_update: usize,
}

impl TrainLog {
    pub fn best_accuracy(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_accuracy).reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("update,loss,val_accuracy\n");
        for r in &self.records {
            writeln!(out, "{},{:.6},{:.6}", r.update, r.loss, r.val_accuracy).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_csv())?)
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    /// Best validation parameters, with preprocessing in the metadata.
    pub best: Checkpoint,
    pub preprocessing: Preprocessing,
}

fn uses_batchnorm(model: &Model) -> bool {
    model
        .spec()
        .layers
        .iter()
        .any(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
}

/// One augmented, normalized training input.
fn training_view(prep: &Preprocessing, cfg: &TrainConfig, s: &Sample, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let size = match &cfg.scales {
        Some(sizes) => sample_scale(sizes, rng)?,
        None => prep.input_size,
    };
    let placements = prep.placements(&s.image, size)?;
    let p = &placements[rng.random_range(0..placements.len())];
    let base = prep.render(&s.image, p)?;
    let ct = sample_transform(&cfg.transform, rng);
    prep.normalize(&apply_transform(&base, &ct)?)
}

struct ChunkResult {
    grads: Gradients,
    loss: f64,
    n: usize,
    trace: Option<crate::network::Trace>,
}

fn run_chunk(model: &Model, xs: &[Tensor], labels: &[usize], seed: u64, keep_trace: bool) -> Result<ChunkResult> {
    let x = Tensor::stack(xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = model.trace(&x, Mode::Train, &mut rng)?;
    let logits = trace.logits().ok_or_else(|| invalid!("model has no logits"))?;
    let out = softmax_xent(logits, labels)?;
    let grads = model.backward(&trace, &out.grad)?;
    Ok(ChunkResult {
        grads,
        loss: out.loss,
        n: xs.len(),
        trace: keep_trace.then_some(trace),
    })
}

/// Train `model` on the train split of `data`, validating on the val split.
/// `progress` sees each log record as it is produced.
pub fn train(
    mut model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spp = model.spec().uses_spp();
    let bn = uses_batchnorm(&model);
    if cfg.scales.is_some() && !spp {
        return Err(Error::Config("multi-scale training needs a model with SPP".into()));
    }
    let variable_ar = matches!(cfg.ar_policy, ArPolicy::Variable { .. });
    if variable_ar && !spp {
        return Err(Error::Config(
            "variable aspect-ratio inputs need a model with SPP".into(),
        ));
    }
    if bn && (cfg.scales.is_some() || variable_ar) {
        return Err(Error::Config(
            "batch norm cannot be combined with mixed input sizes in one batch".into(),
        ));
    }
    if bn && cfg.batch_size < 2 {
        return Err(Error::Config("batch norm needs a batch size of at least 2".into()));
    }
    let train_all = data.split(Split::Train);
    let val = data.split(Split::Val);
    if train_all.is_empty() || val.is_empty() {
        return Err(invalid!("training needs non-empty train and val splits"));
    }
    let train = subsample(&train_all, cfg.fraction, derive_seed(cfg.seed, 1, 0))?;
    if let Some(s) = train.iter().chain(&val).find(|s| s.label >= model.classes()) {
        return Err(invalid!(
            "label {} of {} exceeds the model's {} classes",
            s.label,
            s.id,
            model.classes()
        ));
    }

    let input = &model.spec().input;
    if input.height != input.width {
        return Err(invalid!("training expects a square network input"));
    }
    let mut prep = Preprocessing::new(cfg.representation.clone(), cfg.ar_policy.clone(), input.height);
    if prep.depth() != input.channels {
        return Err(invalid!(
            "representation has {} channels but the network expects {}",
            prep.depth(),
            input.channels
        ));
    }
    prep.fit_means(&train)?;
    let prep_json = serde_json::to_value(&prep).map_err(|e| invalid!("{e}"))?;

    let mut sgd = Sgd::new(&model);
    let mut sampler = EpochSampler::new(train.len(), derive_seed(cfg.seed, 2, 0));
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Model)> = None;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for update in 0..cfg.updates {
        let picks = sampler.batch(cfg.batch_size);
        let views = picks
            .par_iter()
            .enumerate()
            .map(|(pos, &i)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, update as u64 + 3, pos as u64));
                training_view(&prep, cfg, train[i], &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;

        // group by shape in first-appearance order, then cut into chunks
        let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for (pos, v) in views.iter().enumerate() {
            match groups.iter_mut().find(|(shape, _)| shape.as_slice() == v.shape()) {
                Some((_, members)) => members.push(pos),
                None => groups.push((v.shape().to_vec(), vec![pos])),
            }
        }
        let chunk = if bn { usize::MAX } else { CHUNK };
        let chunks: Vec<&[usize]> = groups.iter().flat_map(|(_, m)| m.chunks(chunk.min(m.len()))).collect();
        let results = chunks
            .par_iter()
            .enumerate()
            .map(|(ci, members)| {
                let xs: Vec<Tensor> = members.iter().map(|&p| views[p].clone()).collect();
                let labels: Vec<usize> = members.iter().map(|&p| train[picks[p]].label).collect();
                run_chunk(
                    &model,
                    &xs,
                    &labels,
                    derive_seed(cfg.seed, update as u64 + 3, (1 << 32) + ci as u64),
                    bn,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let total = cfg.batch_size as f64;
        let mut grads = model.zero_grads();
        let mut loss = 0.0;
        for r in &results {
            grads.accumulate(&r.grads, (r.n as f64 / total) as f32)?;
            loss += r.loss * r.n as f64 / total;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { update, loss });
        }
        for r in &results {
            if let Some(t) = &r.trace {
                model.absorb_batch_stats(t);
            }
        }
        sgd.step(&mut model, &grads, lr_at(update, cfg), cfg.momentum, cfg.weight_decay)?;
        loss_sum += loss;
        loss_count += 1;

        let done = update + 1;
        if done % cfg.val_interval == 0 || done == cfg.updates {
            let acc = Classifier::new(&model, prep.clone())
                .evaluate(&val, &EvalMode::Single)?
                .accuracy;
            let record = LogRecord {
                update: done,
                loss: loss_sum / loss_count as f64,
                val_accuracy: acc,
            };
            progress(&record);
            log.records.push(record);
            (loss_sum, loss_count) = (0.0, 0);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, done, model.clone()));
            }
        }
    }

    let (acc, at, best_model) = best.expect("the final update always validates");
    log.best_update = at;
    Ok(TrainOutcome {
        log,
        best: Checkpoint {
            model: best_model,
            meta: CheckpointMeta {
                updates: at,
                val_accuracy: Some(acc),
                seed: cfg.seed,
                preprocessing: prep_json,
            },
        },
        preprocessing: prep,
    })
}

/// [`train`] with each training image resized to a size drawn from `sizes`.
pub fn train_multiscale(
    model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    sizes: &[usize],
    progress: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    if !model.spec().uses_spp() {
        return Err(Error::Config("multi-scale training needs a model with SPP".into()));
    }
    let cfg = TrainConfig {
        scales: Some(sizes.to_vec()),
        ..cfg.clone()
    };
    train(model, data, &cfg, progress)
}
