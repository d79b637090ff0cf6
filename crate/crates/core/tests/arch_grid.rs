//! Shape propagation over the full depth × width × input-size grid.

use docgrid::network::{build_alexnet, edit_depth, scale_for_input, ArchFlags, Model, SUPPORTED_INPUT_SIZES};
use docgrid::tensor::Tensor;

const DEPTHS: std::ops::RangeInclusive<usize> = 2..=8;
const WIDTHS: [f64; 8] = [0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0];

fn flags() -> ArchFlags {
    ArchFlags {
        classes: 16,
        ..ArchFlags::default()
    }
}

#[test]
fn every_grid_spec_propagates_to_six_by_six() {
    let flags = flags();
    for n in SUPPORTED_INPUT_SIZES {
        assert_eq!(
            scale_for_input(n, &flags).unwrap().final_conv_map().unwrap(),
            (6, 6),
            "size {n}"
        );
        for depth in DEPTHS {
            for w in WIDTHS {
                let spec = build_alexnet(n, w, depth, &flags).unwrap();
                assert_eq!(spec.conv_names().len(), depth);
                assert_eq!(
                    spec.final_conv_map().unwrap(),
                    (6, 6),
                    "size {n} depth {depth} width {w}"
                );
                let shapes = spec.shapes().unwrap();
                assert_eq!(shapes.last().unwrap(), &vec![16]);
                assert!(spec.parameter_count().unwrap() > 0);
            }
        }
    }
}

/// Allocating and running every grid point would need several GB for the
/// widest fc layers, so forwards run at the narrowest width everywhere and
/// at every width for the smallest input.
#[test]
fn grid_forward_passes_yield_distributions() {
    let flags = flags();
    let run = |n: usize, depth: usize, w: f64| {
        let spec = build_alexnet(n, w, depth, &flags).unwrap();
        let model = Model::init(spec, 1).unwrap();
        let x = Tensor::from_fn(&[2, 1, n, n], |i| ((i * 7919) % 256) as f32 / 255.0 - 0.5);
        let p = model.forward_eval(&x).unwrap();
        assert_eq!(p.shape(), &[2, 16]);
        for row in p.data().chunks(16) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5 && row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    };
    for n in SUPPORTED_INPUT_SIZES {
        for depth in DEPTHS {
            run(n, depth, 0.1);
        }
    }
    for depth in DEPTHS {
        for w in WIDTHS {
            run(32, depth, w);
        }
    }
}

#[test]
fn depth_editing_is_reversible_bookkeeping() {
    let flags = flags();
    for n in [32, 227] {
        let names = |s: &docgrid::network::ArchSpec| s.layers.iter().map(|l| l.name.clone()).collect::<Vec<_>>();
        let five = build_alexnet(n, 1.0, 5, &flags).unwrap();
        for depth in DEPTHS {
            let direct = build_alexnet(n, 1.0, depth, &flags).unwrap();
            let edited = edit_depth(&five, depth).unwrap();
            assert_eq!(names(&edited), names(&direct), "size {n} depth {depth}");
            assert_eq!(edited, direct);
        }
        let deep = edit_depth(&five, 8).unwrap();
        assert_eq!(
            names(&edit_depth(&deep, 3).unwrap()),
            names(&build_alexnet(n, 1.0, 3, &flags).unwrap())
        );
    }
}
