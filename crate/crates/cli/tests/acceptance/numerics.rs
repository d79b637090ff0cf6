//! Backward passes against finite differences, fast kernels against naive
//! loops, and the SPP size contract.

use std::time::Instant;

use docgrid::imaging::otsu_threshold;
use docgrid::layers::{
    batchnorm_backward, batchnorm_forward, dropout_backward, lrn_backward, lrn_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, softmax_xent, spp_backward, spp_forward, spp_output_len,
    BatchNormState, DropoutMask, LrnParams, Mode, PoolGeometry,
};
use docgrid::network::{build_alexnet, ArchFlags, Model};
use docgrid::tensor::{conv2d, conv2d_grad, matmul_affine, matmul_affine_grad, ConvGeometry, Tensor};
use rand::Rng;

use crate::{ensure, ok, random, random64, rng, Outcome};

type T64 = Tensor<f64>;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Worst relative error between `analytic` and central differences of `loss`.
fn fd(x: &T64, analytic: &T64, loss: impl Fn(&T64) -> f64) -> f64 {
    const H: f64 = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += H;
            let mut minus = x.clone();
            minus.data_mut()[i] -= H;
            rel_err(analytic.data()[i], (loss(&plus) - loss(&minus)) / (2.0 * H))
        })
        .fold(0.0, f64::max)
}

/// `Σ r ⊙ y`, whose gradient with respect to `y` is `r`.
fn project(y: &T64, r: &T64) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst error over every gradient of one layer kind at one seed.
fn layer_error(kind: &str, seed: u64) -> f64 {
    let mut rng = rng(seed);
    match kind {
        "conv" => {
            let (k, s) = (rng.random_range(1..4), rng.random_range(1..3));
            let g = ConvGeometry::square(k, s, rng.random_range(0..k));
            let x = random64(&[2, 2, 6, 5], &mut rng);
            let w = random64(&[3, 2, k, k], &mut rng);
            let b = random64(&[3], &mut rng);
            let r = random64(conv2d(&x, &w, &b, &g).unwrap().shape(), &mut rng);
            let (gx, gw, gb) = conv2d_grad(&x, &w, &g, &r).unwrap();
            fd(&x, &gx, |x| project(&conv2d(x, &w, &b, &g).unwrap(), &r))
                .max(fd(&w, &gw, |w| project(&conv2d(&x, w, &b, &g).unwrap(), &r)))
                .max(fd(&b, &gb, |b| project(&conv2d(&x, &w, b, &g).unwrap(), &r)))
        }
        "fc" => {
            let x = random64(&[3, 7], &mut rng);
            let w = random64(&[4, 7], &mut rng);
            let b = random64(&[4], &mut rng);
            let r = random64(&[3, 4], &mut rng);
            let (gx, gw, gb) = matmul_affine_grad(&x, &w, &r).unwrap();
            fd(&x, &gx, |x| project(&matmul_affine(x, &w, &b).unwrap(), &r))
                .max(fd(&w, &gw, |w| project(&matmul_affine(&x, w, &b).unwrap(), &r)))
                .max(fd(&b, &gb, |b| project(&matmul_affine(&x, &w, b).unwrap(), &r)))
        }
        "relu" => {
            let x = random64(&[2, 3, 4, 4], &mut rng);
            let r = random64(x.shape(), &mut rng);
            fd(&x, &relu_backward(&x, &r).unwrap(), |x| project(&relu_forward(x), &r))
        }
        "maxpool" => {
            let g = PoolGeometry::new(rng.random_range(2..4), rng.random_range(1..3));
            let x = random64(&[2, 2, 7, 6], &mut rng);
            let (y, sw) = maxpool_forward(&x, &g).unwrap();
            let r = random64(y.shape(), &mut rng);
            fd(&x, &maxpool_backward(&sw, &r).unwrap(), |x| {
                project(&maxpool_forward(x, &g).unwrap().0, &r)
            })
        }
        "lrn" => {
            let p = LrnParams {
                size: 3,
                k: 2.0,
                alpha: 0.5,
                beta: 0.75,
            };
            let x = random64(&[2, 5, 3, 3], &mut rng);
            let r = random64(x.shape(), &mut rng);
            fd(&x, &lrn_backward(&x, &p, &r).unwrap(), |x| {
                project(&lrn_forward(x, &p).unwrap(), &r)
            })
        }
        "dropout" => {
            let x = random64(&[2, 3, 4, 4], &mut rng);
            let mask = DropoutMask::new(0.5, (0..x.len()).map(|_| rng.random_bool(0.5)).collect()).unwrap();
            let r = random64(x.shape(), &mut rng);
            fd(&x, &dropout_backward(Some(&mask), &r).unwrap(), |x| {
                project(&mask.apply(x).unwrap(), &r)
            })
        }
        "batchnorm" => {
            let shape: &[usize] = if seed.is_multiple_of(2) { &[4, 3, 2, 2] } else { &[5, 3] };
            let x = random64(shape, &mut rng);
            let mut state = BatchNormState::<f64>::new(3, 1e-5, 0.9).unwrap();
            state.gamma = random64(&[3], &mut rng);
            state.beta = random64(&[3], &mut rng);
            let (y, cache) = batchnorm_forward(&x, &state, Mode::Train).unwrap();
            let r = random64(y.shape(), &mut rng);
            let (gx, gg, gb) = batchnorm_backward(&cache.unwrap(), &state, &r).unwrap();
            let fwd = |x: &T64, s: &BatchNormState<f64>| project(&batchnorm_forward(x, s, Mode::Train).unwrap().0, &r);
            let with = |gamma: Option<&T64>, beta: Option<&T64>| {
                let mut s = state.clone();
                if let Some(g) = gamma {
                    s.gamma = g.clone();
                }
                if let Some(b) = beta {
                    s.beta = b.clone();
                }
                fwd(&x, &s)
            };
            fd(&x, &gx, |x| fwd(x, &state))
                .max(fd(&state.gamma, &gg, |g| with(Some(g), None)))
                .max(fd(&state.beta, &gb, |b| with(None, Some(b))))
        }
        "spp" => {
            let (h, w) = (rng.random_range(6..10), rng.random_range(6..10));
            let levels = [1, 2, 3];
            let x = random64(&[2, 2, h, w], &mut rng);
            let (y, sw) = spp_forward(&x, &levels).unwrap();
            let r = random64(y.shape(), &mut rng);
            fd(&x, &spp_backward(&sw, &r).unwrap(), |x| {
                project(&spp_forward(x, &levels).unwrap().0, &r)
            })
        }
        "softmax-xent" => {
            let z = random64(&[4, 5], &mut rng).scale(3.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let grad = softmax_xent(&z, &labels).unwrap().grad;
            fd(&z, &grad, |z| softmax_xent(z, &labels).unwrap().loss)
        }
        other => panic!("unknown layer kind {other}"),
    }
}

pub fn gradients() -> Outcome {
    const KINDS: [&str; 9] = [
        "conv",
        "fc",
        "relu",
        "maxpool",
        "lrn",
        "dropout",
        "batchnorm",
        "spp",
        "softmax-xent",
    ];
    let start = Instant::now();
    let mut worst = (0.0, "");
    for kind in KINDS {
        for seed in SEEDS {
            let e = layer_error(kind, seed);
            ensure!(e <= 1e-3, "{kind} seed {seed}: relative error {e:e}");
            if e > worst.0 {
                worst = (e, kind);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!(
        "{} kinds x {} seeds, worst {:.1e} ({})",
        KINDS.len(),
        SEEDS.len(),
        worst.0,
        worst.1
    ))
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeometry) -> Vec<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let o = w.shape()[0];
    let oh = (h + 2 * g.pad - g.kernel_h) / g.stride + 1;
    let ow = (wd + 2 * g.pad - g.kernel_w) / g.stride + 1;
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc] as f64;
                    for ic in 0..c {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * g.kernel_h + ky) * g.kernel_w + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn max_diff(got: &[f32], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| (*g as f64 - w).abs())
        .fold(0.0, f64::max)
}

/// Largest between-class variance by exact rational comparison over every
/// threshold, smallest threshold on ties.
fn exhaustive_otsu(hist: &[u64; 256]) -> Option<u8> {
    let mut best: Option<(usize, u128, u128)> = None;
    for t in 0..255 {
        let n0: u128 = hist[..=t].iter().map(|&c| c as u128).sum();
        let n1: u128 = hist[t + 1..].iter().map(|&c| c as u128).sum();
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u128 = (0..=t).map(|i| i as u128 * hist[i] as u128).sum();
        let s1: u128 = (t + 1..256).map(|i| i as u128 * hist[i] as u128).sum();
        let d = (s0 * n1).abs_diff(s1 * n0);
        let (num, den) = (d * d, n0 * n1);
        if best.is_none_or(|(_, bn, bd)| num * bd > bn * den) {
            best = Some((t, num, den));
        }
    }
    best.map(|(t, _, _)| t as u8)
}

pub fn oracles() -> Outcome {
    let mut rng = rng(21);
    let mut conv_worst: f64 = 0.0;
    for case in 0..200 {
        let (kh, kw) = (rng.random_range(1..6), rng.random_range(1..6));
        let g = ConvGeometry {
            kernel_h: kh,
            kernel_w: kw,
            stride: rng.random_range(1..4),
            pad: rng.random_range(0..3),
        };
        let c = rng.random_range(1..4);
        let (h, w) = (rng.random_range(kh..12), rng.random_range(kw..12));
        let x = random(&[rng.random_range(1..3), c, h, w], &mut rng);
        let k = random(&[rng.random_range(1..5), c, kh, kw], &mut rng);
        let b = random(&[k.shape()[0]], &mut rng);
        let y = ok(conv2d(&x, &k, &b, &g))?;
        let want = naive_conv(&x, &k, &b, &g);
        ensure!(
            y.len() == want.len(),
            "conv case {case}: {} outputs, want {}",
            y.len(),
            want.len()
        );
        let d = max_diff(y.data(), &want);
        ensure!(d <= 1e-5, "conv case {case} {g:?}: max diff {d:e}");
        conv_worst = conv_worst.max(d);
    }
    let mut mm_worst: f64 = 0.0;
    for case in 0..100 {
        let (n, i, o) = (rng.random_range(1..6), rng.random_range(1..40), rng.random_range(1..20));
        let x = random(&[n, i], &mut rng);
        let w = random(&[o, i], &mut rng);
        let b = random(&[o], &mut rng);
        let y = ok(matmul_affine(&x, &w, &b))?;
        let want: Vec<f64> = (0..n * o)
            .map(|rc| {
                let (r, c) = (rc / o, rc % o);
                let dot: f64 = (0..i)
                    .map(|j| x.data()[r * i + j] as f64 * w.data()[c * i + j] as f64)
                    .sum();
                dot + b.data()[c] as f64
            })
            .collect();
        let d = max_diff(y.data(), &want);
        ensure!(d <= 1e-5, "matmul case {case}: max diff {d:e}");
        mm_worst = mm_worst.max(d);
    }
    for case in 0..100 {
        let mut hist = [0u64; 256];
        for _ in 0..rng.random_range(1..40) {
            hist[rng.random_range(0..256)] += rng.random_range(1..200);
        }
        let (got, want) = (otsu_threshold(&hist), exhaustive_otsu(&hist));
        ensure!(got == want, "otsu histogram {case}: {got:?} vs {want:?}");
    }
    Ok(format!(
        "conv 200 cases (worst {conv_worst:.1e}), matmul 100 (worst {mm_worst:.1e}), otsu 100 exact"
    ))
}

pub fn spp_contract() -> Outcome {
    let mut rng = rng(22);
    let levels = [1, 2, 3, 6];
    let c = 3;
    for case in 0..50 {
        let (h, w) = (rng.random_range(8..33), rng.random_range(8..33));
        let x = random(&[2, c, h, w], &mut rng);
        let (y, _) = ok(spp_forward(&x, &levels))?;
        ensure!(
            y.shape() == [2, spp_output_len(c, &levels)],
            "{h}x{w}: shape {:?}",
            y.shape()
        );
        let mut want = Vec::new();
        for b in 0..2 {
            for &l in &levels {
                for ch in 0..c {
                    for i in 0..l {
                        for j in 0..l {
                            let mut m = f32::NEG_INFINITY;
                            for yy in i * h / l..(i + 1) * h / l {
                                for xx in j * w / l..(j + 1) * w / l {
                                    m = m.max(x.data()[((b * c + ch) * h + yy) * w + xx]);
                                }
                            }
                            want.push(m);
                        }
                    }
                }
            }
        }
        ensure!(
            y.data() == &want[..],
            "case {case} ({h}x{w}): bins differ from brute force"
        );
    }

    let flags = ArchFlags {
        spp_levels: Some(levels.to_vec()),
        classes: 4,
        ..ArchFlags::default()
    };
    let spec = ok(build_alexnet(227, 0.05, 5, &flags))?;
    let fc_in = |n: usize| ok(spec.shapes_for(n, n)).map(|s| s[spec.conv_stage_len()].clone());
    let (a, b) = (fc_in(227)?, fc_in(384)?);
    ensure!(a == b, "fc input {a:?} at 227 vs {b:?} at 384");
    let model = ok(Model::init(spec.clone(), 3))?;
    for n in [227, 384] {
        let p = ok(model.forward_eval(&random(&[1, 1, n, n], &mut rng)))?;
        ensure!(p.shape() == [1, 4], "{n}: output {:?}", p.shape());
    }
    Ok(format!(
        "50 random sizes in [8, 32] match brute force; 227 and 384 both feed fc {a:?}"
    ))
}
