//! Architecture grid, prediction averaging, batch norm and deconv checks.

use docgrid::augment::{apply_transform, make_views, ArPolicy, TransformKind, TransformSpec};
use docgrid::eval::{predict, Classifier, ProbabilityModel};
use docgrid::imaging::{RawImage, RepresentationSpec};
use docgrid::introspect::{crop, deconv_visualize, receptive_field, trace_to, NeuronRef};
use docgrid::layers::{batchnorm_forward, BatchNormState, Mode};
use docgrid::network::{build_alexnet, scale_for_input, ArchFlags, LayerParams, Model, SUPPORTED_INPUT_SIZES};
use docgrid::pipeline::Preprocessing;
use docgrid::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, ok, rng, Outcome};

pub fn architecture_grid() -> Outcome {
    const WIDTHS: [f64; 8] = [0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0];
    let flags = ArchFlags {
        classes: 16,
        ..ArchFlags::default()
    };
    let mut specs = 0;
    for n in SUPPORTED_INPUT_SIZES {
        let base = ok(scale_for_input(n, &flags))?;
        ensure!(
            ok(base.final_conv_map())? == (6, 6),
            "scale_for_input({n}) ends at {:?}",
            base.final_conv_map()
        );
        for depth in 2..=8 {
            for w in WIDTHS {
                let spec = ok(build_alexnet(n, w, depth, &flags))?;
                let map = ok(spec.final_conv_map())?;
                ensure!(map == (6, 6), "size {n} depth {depth} width {w}: final map {map:?}");
                let shapes = ok(spec.shapes())?;
                ensure!(
                    shapes.last() == Some(&vec![16]),
                    "size {n} depth {depth} width {w}: output {:?}",
                    shapes.last()
                );
                specs += 1;
            }
        }
    }
    Ok(format!("{specs} specs over 9 sizes x 7 depths x 8 widths end at 6x6"))
}

/// Probabilities drawn from a generator seeded by the input's bytes.
struct HashStub {
    classes: usize,
}

impl ProbabilityModel for HashStub {
    fn probabilities(&self, x: &Tensor) -> docgrid::Result<Tensor> {
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

fn noise_image(rng: &mut ChaCha8Rng, size: usize) -> RawImage {
    RawImage::new(size, size, 1, (0..size * size).map(|_| rng.random()).collect()).unwrap()
}

pub fn multiview_exactness() -> Outcome {
    let prep = |size| Preprocessing::new(RepresentationSpec::default(), ArPolicy::Warp, size);
    let mut rng = rng(31);
    let flags = ArchFlags {
        classes: 4,
        ..ArchFlags::default()
    };
    let model = ok(Model::init(ok(build_alexnet(32, 0.1, 2, &flags))?, 2))?;
    let clf = Classifier::new(model, prep(32));
    let identity = TransformSpec::of_kind(TransformKind::None);
    for i in 0..5 {
        let img = noise_image(&mut rng, 40);
        let single = ok(clf.predict(&img))?;
        let multi = ok(clf.predict_multiview(&img, &format!("img{i}"), &identity, 10))?;
        ensure!(multi == single, "image {i}: identity views differ from the single view");
    }

    let stub = Classifier::new(HashStub { classes: 5 }, prep(12));
    let shear = TransformSpec::of_kind(TransformKind::Shear);
    for i in 0..5 {
        let id = format!("img{i}");
        let img = noise_image(&mut rng, 12);
        let base = ok(stub.prep.render_all(&img, 12))?.remove(0);
        let mut mean = [0.0; 5];
        for v in ok(make_views(&id, &shear, 10))? {
            let x = ok(stub.prep.normalize(&ok(apply_transform(&base, &v))?))?;
            for (m, p) in mean.iter_mut().zip(ok(predict(&stub.model, &x))?) {
                *m += p;
            }
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / 10.0).collect();
        let got = ok(stub.predict_multiview(&img, &id, &shear, 10))?;
        ensure!(got == mean, "image {i}: {got:?} is not the mean {mean:?}");
    }
    Ok("identity views bitwise equal to single view; shear views average to the exact mean".into())
}

pub fn batchnorm_semantics() -> Outcome {
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    for seed in 0..10u64 {
        let mut rng = rng(seed);
        let (n, c, h, w) = (
            rng.random_range(2..6),
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let shift: Vec<f32> = (0..c).map(|_| rng.random_range(-20.0..20.0)).collect();
        let scale: Vec<f32> = (0..c).map(|_| rng.random_range(0.5..10.0)).collect();
        let x = Tensor::from_fn(&[n, c, h, w], |i| {
            let ch = (i / (h * w)) % c;
            shift[ch] + scale[ch] * rng.random_range(-1.0f32..1.0)
        });
        let mut state = ok(BatchNormState::new(c, 1e-5, 0.9))?;
        state.gamma = Tensor::from_fn(&[c], |_| rng.random_range(0.5..2.0));
        state.beta = Tensor::from_fn(&[c], |_| rng.random_range(-1.0..1.0));
        let (_, cache) = ok(batchnorm_forward(&x, &state, Mode::Train))?;
        let x_hat = cache.ok_or("train mode kept no cache")?.x_hat;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| (0..h * w).map(move |p| (b * c + ch) * h * w + p))
                .map(|i| x_hat.data()[i] as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            ensure!(mean.abs() <= 1e-5, "seed {seed} channel {ch}: mean {mean:e}");
            ensure!((var - 1.0).abs() <= 1e-3, "seed {seed} channel {ch}: variance {var}");
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - 1.0).abs());
        }
    }

    let flags = ArchFlags {
        classes: 5,
        batch_norm: true,
        ..ArchFlags::default()
    };
    let model = ok(Model::init(ok(build_alexnet(32, 0.1, 3, &flags))?, 4))?;
    let mut rng = rng(40);
    let input = Tensor::from_fn(&[2, 1, 32, 32], |_| rng.random_range(0.0..1.0));
    let a = ok(model.forward_eval(&input))?;
    let b = ok(model.trace(&input, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(99)))?;
    ensure!(
        b.outputs.last() == Some(&a),
        "eval output depends on the dropout generator"
    );
    ensure!(ok(model.forward_eval(&input))? == a, "eval mode is not repeatable");
    Ok(format!(
        "worst |mean| {worst_mean:.1e}, worst |var - 1| {worst_var:.1e}; eval mode bit-repeatable"
    ))
}

const SIZE: usize = 64;

fn activation(m: &Model, x: &Tensor, l: usize, ch: usize, (y, xx): (usize, usize)) -> f32 {
    let t = trace_to(m, x, l).unwrap();
    let out = &t.outputs[l];
    let [_, _, h, w] = out.dims4().unwrap();
    out.data()[(ch * h + y) * w + xx]
}

pub fn deconv() -> Outcome {
    let flags = ArchFlags {
        classes: 4,
        ..ArchFlags::default()
    };
    let m = ok(Model::init(ok(build_alexnet(SIZE, 0.1, 3, &flags))?, 1))?;
    let mut rng = rng(41);
    let x = Tensor::from_fn(&[1, SIZE, SIZE], |_| rng.random_range(-1.0..1.0));
    let layer = |name: &str| m.spec().layer_index(name).ok_or(format!("no layer {name}"));

    let conv1 = layer("conv1")?;
    let LayerParams::Affine { weight, .. } = &m.params()[conv1] else {
        return Err("conv1 has no kernel".into());
    };
    let k = weight.shape()[2];
    let trace = ok(trace_to(&m, &x, conv1))?;
    for (ch, pos) in [(0, (10, 12)), (3, (20, 5)), (4, (2, 28))] {
        let neuron = NeuronRef {
            layer: conv1,
            channel: ch,
            position: Some(pos),
        };
        let recon = ok(ok(deconv_visualize(&m, Some(&trace), &neuron))?.reshape(&[1, SIZE, SIZE]))?;
        let rect = ok(receptive_field(m.spec(), conv1, pos))?;
        let a = activation(&m, &x, conv1, ch, pos);
        let kernel = ok(Tensor::new(
            &[1, k, k],
            weight.data()[ch * k * k..(ch + 1) * k * k].to_vec(),
        ))?;
        let d = ok(crop(&recon, &rect))?.max_abs_diff(&kernel.scale(a));
        ensure!(
            d <= 1e-6,
            "conv1 channel {ch}: reconstruction differs from the kernel by {d:e}"
        );
        let outside = (0..SIZE * SIZE)
            .filter(|i| !rect.contains((i % SIZE) as isize, (i / SIZE) as isize))
            .any(|i| recon.data()[i] != 0.0);
        ensure!(
            !outside,
            "conv1 channel {ch}: reconstruction leaks outside the kernel footprint"
        );
    }

    let mut probed = 0;
    for (name, pos) in [("relu2", (3, 4)), ("pool1", (7, 7))] {
        let l = layer(name)?;
        let rect = ok(receptive_field(m.spec(), l, pos))?;
        let channels = ok(trace_to(&m, &x, l))?.outputs[l].shape()[1];
        let ch = (0..channels)
            .max_by(|&a, &b| activation(&m, &x, l, a, pos).total_cmp(&activation(&m, &x, l, b, pos)))
            .unwrap();
        let base = activation(&m, &x, l, ch, pos);
        let mut inside_moves = false;
        for i in 0..SIZE * SIZE {
            let (px, py) = ((i % SIZE) as isize, (i / SIZE) as isize);
            let mut bumped = x.clone();
            bumped.data_mut()[i] += 5.0;
            let moved = activation(&m, &bumped, l, ch, pos) != base;
            if rect.contains(px, py) {
                inside_moves |= moved;
            } else {
                ensure!(
                    !moved,
                    "{name}: pixel ({px}, {py}) outside {rect:?} moved the activation"
                );
            }
            probed += 1;
        }
        ensure!(inside_moves, "{name}: no pixel inside {rect:?} moved the activation");
        let trace = ok(trace_to(&m, &x, l))?;
        let neuron = NeuronRef {
            layer: l,
            channel: ch,
            position: Some(pos),
        };
        let recon = ok(deconv_visualize(&m, Some(&trace), &neuron))?;
        let leak = recon
            .data()
            .iter()
            .enumerate()
            .any(|(i, v)| *v != 0.0 && !rect.contains((i % SIZE) as isize, (i / SIZE) as isize));
        ensure!(!leak, "{name}: deconv support leaves {rect:?}");
    }
    Ok(format!(
        "conv1 reconstructions equal kernel x activation; {probed} perturbations respect the fields"
    ))
}
