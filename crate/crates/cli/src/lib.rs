//! Command implementations behind the `docgrid` binary.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use docgrid::augment::{apply_transform, sample_transform, ShearAxis, TransformKind, TransformSpec};
use docgrid::eval::{Classifier, EvalMode};
use docgrid::imaging::{
    read_image, render_representation, write_image, Channel, Frame, RawImage, RepresentationSpec, Split,
};
use docgrid::introspect::{
    deconv_visualize, saliency_image, spatial_response_map, tile_grid, top_k_patches, trace_to, NeuronRef,
};
use docgrid::network::{build_alexnet, load_checkpoint, save_checkpoint, ArchFlags, LayerKind, Model, Width};
use docgrid::pipeline::{Dataset, Preprocessing};
use docgrid::synthdoc::{generate_dataset, LayoutClass};
use docgrid::train::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },

    #[error(transparent)]
    Core(#[from] docgrid::Error),
}

impl CliError {
    /// 2 usage or configuration, 3 I/O and file formats, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        use docgrid::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Core(E::Diverged { .. }) => 4,
            CliError::Core(E::Io(_) | E::Decode(_) | E::Format(_) | E::CorruptCheckpoint(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "docgrid", version, about = "Document image classification experiments")]
pub struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "DOCGRID_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled document dataset.
    GenData(GenDataArgs),
    /// Train a network from an experiment config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Write augmented copies of an image for inspection.
    AugmentPreview(PreviewArgs),
    /// Top patches, deconv reconstructions and response maps for a neuron.
    Introspect(IntrospectArgs),
    /// Print the layer table of an architecture.
    ArchShow(ArchShowArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of layout classes (letter, memo, form, email in order).
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Overrides the config output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    pub dump_config: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "1x")]
    Single,
    #[value(name = "10x")]
    MultiView,
    #[value(name = "multiscale")]
    MultiScale,
}

fn parse_kind(s: &str) -> std::result::Result<TransformKind, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| {
        let names: Vec<String> = TransformKind::ALL
            .iter()
            .map(|k| serde_json::to_value(k).unwrap().as_str().unwrap().to_string())
            .collect();
        format!("unknown transform {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value = "1x")]
    pub mode: ModeArg,
    /// Views per image in 10x mode.
    #[arg(long, default_value_t = 10)]
    pub views: usize,
    /// Transform family for 10x views.
    #[arg(long, value_parser = parse_kind, default_value = "none")]
    pub kind: TransformKind,
    /// Input sizes for multiscale mode.
    #[arg(long, value_delimiter = ',', default_values_t = [320, 384, 512])]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    pub input: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    pub kind: TransformKind,
    /// Fixed angle in degrees for rotation or shear.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, value_enum)]
    pub axis: Option<AxisArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of samples; more than one are tiled into a grid.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Horizontal,
    Vertical,
    Both,
}

#[derive(Debug, Args)]
pub struct IntrospectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// `layer:channel`, e.g. `conv5:12`; conv layers read their ReLU output.
    #[arg(long)]
    pub neuron: String,
    #[arg(long, default_value_t = 9)]
    pub topk: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ArchShowArgs {
    #[arg(long)]
    pub input: usize,
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    #[arg(long, default_value_t = 16)]
    pub classes: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long)]
    pub batch_norm: bool,
    /// SPP levels replacing pool5, e.g. `1,2,3,6`.
    #[arg(long, value_delimiter = ',')]
    pub spp: Option<Vec<usize>>,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // fails only if a pool already exists, in which case it is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::AugmentPreview(a) => cmd_augment_preview(&a),
        Command::Introspect(a) => cmd_introspect(&a),
        Command::ArchShow(a) => cmd_arch_show(&a),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    if a.classes == 0 || a.classes > LayoutClass::ALL.len() {
        return Err(CliError::Usage(format!(
            "--classes must be between 1 and {}",
            LayoutClass::ALL.len()
        )));
    }
    let manifest = generate_dataset(a.per_class, &LayoutClass::ALL[..a.classes], a.seed, a.size, &a.out)?;
    println!("manifest={}", manifest.display());
    Ok(())
}

/// Resolve overrides and validate.
pub fn resolve_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = &a.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    if a.dump_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let data = Dataset::load(&cfg.manifest)?;
    let model = Model::init(cfg.arch_spec()?, cfg.seed)?;
    let quiet = a.quiet;
    let mut stdout = std::io::stdout();
    let outcome = train(model, &data, &cfg.train_config(), &mut |r| {
        if !quiet {
            let _ = writeln!(
                stdout,
                "update={} loss={:.6} val_accuracy={:.6}",
                r.update, r.loss, r.val_accuracy
            );
        }
    })?;
    fs::create_dir_all(&cfg.output_dir)?;
    save_checkpoint(&outcome.best, cfg.output_dir.join("best.ckpt"))?;
    outcome.log.write_csv(cfg.output_dir.join("train.csv"))?;
    fs::write(cfg.output_dir.join("config.json"), cfg.to_json())?;
    println!(
        "best_update={} val_accuracy={:.6}",
        outcome.log.best_update,
        outcome.best.meta.val_accuracy.unwrap_or(0.0)
    );
    let test = data.split(Split::Test);
    if !test.is_empty() {
        let report = Classifier::new(&outcome.best.model, outcome.preprocessing).evaluate(&test, &cfg.eval)?;
        report.write(cfg.output_dir.join("test"))?;
        print!("{}", report.summary());
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown split {s:?}; expected train, val or test")))
}

fn load_classifier(path: &Path) -> Result<Classifier<Model>> {
    let ckpt = load_checkpoint(path)?;
    let prep: Preprocessing = serde_json::from_value(ckpt.meta.preprocessing.clone())
        .map_err(|e| docgrid::Error::Format(format!("checkpoint preprocessing: {e}")))?;
    Ok(Classifier::new(ckpt.model, prep))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let classifier = load_classifier(&a.checkpoint)?;
    let mode = match a.mode {
        ModeArg::Single => EvalMode::Single,
        ModeArg::MultiView => EvalMode::MultiView {
            views: a.views,
            transform: TransformSpec::of_kind(a.kind),
        },
        ModeArg::MultiScale => EvalMode::MultiScale { sizes: a.sizes.clone() },
    };
    if matches!(mode, EvalMode::MultiScale { .. }) && !classifier.model.spec().uses_spp() {
        return Err(CliError::Config {
            path: "--mode".into(),
            msg: "multiscale evaluation needs a checkpoint with SPP".into(),
        });
    }
    let data = Dataset::load(&a.manifest)?;
    let samples = data.split(split);
    let report = classifier.evaluate(&samples, &mode)?;
    report.write(&a.out)?;
    print!("{}", report.summary());
    Ok(())
}

/// A raw image as `[C, H, W]` in `[0, 1]`, gray or RGB as stored.
fn as_tensor(img: &RawImage) -> Result<docgrid::Tensor> {
    let channel = if img.is_color() { Channel::Rgb } else { Channel::G };
    let (w, h) = (img.width(), img.height());
    Ok(render_representation(
        img,
        &RepresentationSpec::new(vec![channel])?,
        &Frame::warp(w, h, w, h),
        h,
        w,
        1.0,
    )?)
}

pub fn cmd_augment_preview(a: &PreviewArgs) -> Result<()> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let img = read_image(&a.input)?;
    let base = as_tensor(&img)?;
    let mut spec = TransformSpec::of_kind(a.kind);
    if let Some(t) = a.theta {
        spec.rotation = [t, t];
        spec.shear = [t, t];
    }
    if let Some(axis) = a.axis {
        spec.shear_axis = match axis {
            AxisArg::Horizontal => ShearAxis::Horizontal,
            AxisArg::Vertical => ShearAxis::Vertical,
            AxisArg::Both => ShearAxis::Both,
        };
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let outs = (0..a.count)
        .map(|_| apply_transform(&base, &sample_transform(&spec, &mut rng)))
        .collect::<docgrid::Result<Vec<_>>>()?;
    let image = if outs.len() == 1 {
        RawImage::from_tensor(&outs[0])?
    } else {
        tile_grid(&outs, (outs.len() as f64).sqrt().ceil() as usize)?
    };
    write_image(&a.out, &image)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// `conv5:12` → (layer index, channel); conv layers map to their ReLU.
fn parse_neuron(spec: &docgrid::network::ArchSpec, s: &str) -> Result<(usize, usize)> {
    let (name, channel) = s
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("neuron {s:?} is not layer:channel")))?;
    let channel: usize = channel
        .parse()
        .map_err(|_| CliError::Usage(format!("bad channel in {s:?}")))?;
    let relu = name.strip_prefix("conv").map(|tag| format!("relu{tag}"));
    let layer = relu
        .and_then(|r| spec.layer_index(&r))
        .or_else(|| spec.layer_index(name))
        .ok_or_else(|| CliError::Usage(format!("no layer named {name:?}")))?;
    Ok((layer, channel))
}

pub fn cmd_introspect(a: &IntrospectArgs) -> Result<()> {
    if a.topk == 0 {
        return Err(CliError::Usage("--topk must be at least 1".into()));
    }
    let split = parse_split(&a.split)?;
    let classifier = load_classifier(&a.checkpoint)?;
    let (model, prep) = (&classifier.model, &classifier.prep);
    let (layer, channel) = parse_neuron(model.spec(), &a.neuron)?;
    let data = Dataset::load(&a.manifest)?;
    let inputs = data
        .split(split)
        .iter()
        .map(|s| {
            let view = prep.render_all(&s.image, prep.input_size)?.swap_remove(0);
            Ok((s.id.clone(), prep.normalize(&view)?))
        })
        .collect::<docgrid::Result<Vec<_>>>()?;
    if inputs.is_empty() {
        return Err(CliError::Usage(format!("split {} is empty", a.split)));
    }
    fs::create_dir_all(&a.out)?;

    let records = top_k_patches(model, &inputs, layer, channel, a.topk)?;
    let cols = (a.topk as f64).sqrt().ceil() as usize;
    let patches: Vec<_> = records.iter().map(|r| r.patch.clone()).collect();
    write_image(a.out.join("patches.png"), &tile_grid(&patches, cols)?)?;
    let mut csv = String::from("rank,image,y,x,activation,x0,y0,x1,y1\n");
    for (i, r) in records.iter().enumerate() {
        writeln!(
            csv,
            "{},{},{},{},{:.6},{},{},{},{}",
            i + 1,
            r.image_id,
            r.position.0,
            r.position.1,
            r.activation,
            r.rect.x0,
            r.rect.y0,
            r.rect.x1,
            r.rect.y1
        )
        .unwrap();
    }
    fs::write(a.out.join("patches.csv"), csv)?;

    let mut deconvs = Vec::new();
    for r in &records {
        let x = &inputs
            .iter()
            .find(|(id, _)| *id == r.image_id)
            .expect("record from inputs")
            .1;
        let trace = trace_to(model, x, layer)?;
        let neuron = NeuronRef {
            layer,
            channel,
            position: Some(r.position),
        };
        let rec = deconv_visualize(model, Some(&trace), &neuron)?;
        deconvs.push(saliency_image(&rec)?);
    }
    write_image(a.out.join("deconv.png"), &tile_grid(&deconvs, cols)?)?;

    let tensors: Vec<_> = inputs.into_iter().map(|(_, t)| t).collect();
    let maps = spatial_response_map(model, &tensors, layer)?;
    let [c, h, w] = [maps.shape()[0], maps.shape()[1], maps.shape()[2]];
    let tiles = (0..c.min(36))
        .map(|i| docgrid::Tensor::new(&[1, h, w], maps.data()[i * h * w..(i + 1) * h * w].to_vec()))
        .collect::<docgrid::Result<Vec<_>>>()?;
    write_image(a.out.join("spatial.png"), &tile_grid(&tiles, 6)?)?;
    println!("records={} out={}", records.len(), a.out.display());
    Ok(())
}

fn describe(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        } => format!("conv {out_channels} {kernel}x{kernel}/{stride} pad {pad}"),
        LayerKind::Fc { units } => format!("fc {units}"),
        LayerKind::Relu => "relu".into(),
        LayerKind::MaxPool { window, stride } => format!("max pool {window}x{window}/{stride}"),
        LayerKind::Lrn(p) => format!("lrn size {}", p.size),
        LayerKind::Dropout { keep } => format!("dropout keep {keep}"),
        LayerKind::BatchNorm { .. } => "batch norm".into(),
        LayerKind::Spp { levels } => format!("spp {levels:?}"),
        LayerKind::Softmax => "softmax".into(),
    }
}

pub fn arch_table(a: &ArchShowArgs) -> Result<String> {
    let flags = ArchFlags {
        input_channels: a.channels,
        classes: a.classes,
        batch_norm: a.batch_norm,
        spp_levels: a.spp.clone(),
        ..ArchFlags::default()
    };
    let spec = build_alexnet(a.input, Width::from(a.width), a.depth, &flags)?;
    let shapes = spec.shapes()?;
    let mut out = String::new();
    writeln!(out, "{:<10} {:<28} output", "layer", "kind").unwrap();
    writeln!(out, "{:<10} {:<28} {:?}", "input", "", [a.channels, a.input, a.input]).unwrap();
    for (l, s) in spec.layers.iter().zip(&shapes) {
        writeln!(out, "{:<10} {:<28} {s:?}", l.name, describe(&l.kind)).unwrap();
    }
    let (h, w) = spec.final_conv_map()?;
    let params = spec.parameter_count()?;
    writeln!(out, "final conv map: {h}x{w}").unwrap();
    writeln!(out, "parameters: {params}").unwrap();
    Ok(out)
}

pub fn cmd_arch_show(a: &ArchShowArgs) -> Result<()> {
    print!("{}", arch_table(a)?);
    Ok(())
}
