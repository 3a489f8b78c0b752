mod common;

use common::{random_document, random_scene, rng};
use proptest::prelude::*;
use rand::Rng;
use vgloop::document::{RegionNode, VectorDocument};
use vgloop::edit::{apply_edit, EditOp};
use vgloop::rasterizer::{
    backward, ellipse_path, numeric_gradient, region_coverages, render, render_region_stack,
    RegionRenderParams,
};
use vgloop::{Point2, RasterImage, Rgb};

fn params() -> RegionRenderParams {
    RegionRenderParams::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn values_stay_in_unit_range(seed in 0u64..1_000_000) {
        let d = random_document(seed);
        let size = (d.width, d.height);
        let img = render(&d, &params(), size).unwrap();
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for c in region_coverages(&d, &params(), size).unwrap() {
            prop_assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn layer_stack_matches_preorder(seed in 0u64..1_000_000) {
        let d = random_document(seed);
        let size = (d.width, d.height);
        let all = region_coverages(&d, &params(), size).unwrap();
        for k in 1..=d.depth() {
            let stack = render_region_stack(&d, k, &params(), size).unwrap();
            let want: Vec<&RasterImage> = d
                .preorder()
                .iter()
                .zip(&all)
                .filter(|(n, _)| n.layer == k)
                .map(|(_, c)| c)
                .collect();
            prop_assert_eq!(stack.len(), want.len());
            for (a, b) in stack.iter().zip(want) {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn integer_shift_commutes(seed in 0u64..1_000_000, dx in -6i32..=6, dy in -6i32..=6) {
        let d = random_scene(seed, 40, 4);
        let size = (40, 40);
        let a = render(&d, &params(), size).unwrap();
        let mut moved = d.clone();
        for id in d.roots.iter().map(|n| n.id.clone()) {
            let op = EditOp::Translate { target: id, dx: dx as f64, dy: dy as f64, shallow: false };
            moved = apply_edit(&moved, &op).unwrap();
        }
        let b = render(&moved, &params(), size).unwrap();
        // Pixels where every region is fully in or out on both sides.
        let crisp = |doc: &VectorDocument| {
            let covs = region_coverages(doc, &params(), size).unwrap();
            move |x: usize, y: usize| covs.iter().all(|c| {
                let v = c.get(x, y, 0);
                v == 0.0 || v == 1.0
            })
        };
        let (ca, cb) = (crisp(&d), crisp(&moved));
        for y in 0..40i32 {
            for x in 0..40i32 {
                let (sx, sy) = (x - dx, y - dy);
                if !(0..40).contains(&sx) || !(0..40).contains(&sy) {
                    continue;
                }
                let (p, q) = ((sx as usize, sy as usize), (x as usize, y as usize));
                if !ca(p.0, p.1) || !cb(q.0, q.1) {
                    continue;
                }
                for c in 0..3 {
                    let gap = (a.get(p.0, p.1, c) - b.get(q.0, q.1, c)).abs();
                    prop_assert!(gap <= 2.0 / 255.0, "pixel {:?} channel {} gap {}", q, c, gap);
                }
            }
        }
    }
}

/// The top-most region decides the colour deep inside it, whatever lies
/// below.
#[test]
fn top_region_is_opaque() {
    let mut r = rng(11);
    for _ in 0..30 {
        let mut roots = Vec::new();
        for i in 0..r.random_range(1..5) {
            let c = Point2::new(r.random_range(8.0..40.0), r.random_range(8.0..40.0));
            let fill = Rgb::new(r.random(), r.random(), r.random());
            roots.push(RegionNode::new(
                format!("r1_{i}"),
                1,
                vec![ellipse_path(c, 8.0, 6.0)],
                fill,
            ));
        }
        let top_fill = Rgb::new(r.random(), r.random(), r.random());
        roots.push(RegionNode::new(
            "top",
            1,
            vec![ellipse_path(Point2::new(24.0, 24.0), 10.0, 10.0)],
            top_fill,
        ));
        let doc = VectorDocument::with_roots(48, 48, roots);
        let img = render(&doc, &params(), (48, 48)).unwrap();
        for y in 20..28 {
            for x in 20..28 {
                let px = img.pixel_rgb(x, y);
                for c in 0..3 {
                    assert!((px.0[c] - top_fill.0[c]).abs() < 1e-12, "({x},{y})");
                }
            }
        }
    }
}

#[test]
fn background_outside_everything() {
    let d = random_scene(5, 32, 3);
    let p = RegionRenderParams {
        background: Rgb::new(0.1, 0.2, 0.3),
        ..params()
    };
    let img = render(&VectorDocument::new(32, 32), &p, (32, 32)).unwrap();
    assert!(img.data().chunks(3).all(|c| c == [0.1, 0.2, 0.3]));
    assert!(render(&d, &p, (0, 32)).is_err());
}

#[test]
fn invalid_params_rejected() {
    let d = random_scene(1, 16, 2);
    for p in [
        RegionRenderParams {
            soft_bandwidth: 0.0,
            ..params()
        },
        RegionRenderParams {
            supersample: 0,
            ..params()
        },
        RegionRenderParams {
            flatten_tolerance: -1.0,
            ..params()
        },
    ] {
        assert!(render(&d, &p, (16, 16)).is_err());
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let d = random_scene(21, 64, 5);
    let size = (96, 96);
    let g = {
        let mut r = rng(4);
        let data = (0..96 * 96 * 3)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        RasterImage::from_vec(96, 96, 3, data).unwrap()
    };
    let run = |n: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap();
        pool.install(|| {
            (
                render(&d, &params(), size).unwrap(),
                backward(&d, &params(), size, &g).unwrap().to_flat(),
            )
        })
    };
    let (a, ga) = run(1);
    for n in [2, 4] {
        let (b, gb) = run(n);
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..4 {
        let d = random_scene(100 + seed, 24, 3);
        let size = (24, 24);
        let mut r = rng(seed);
        let data: Vec<f64> = (0..24 * 24 * 3)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        let g = RasterImage::from_vec(24, 24, 3, data.clone()).unwrap();
        let analytic = backward(&d, &params(), size, &g).unwrap().to_flat();
        let loss = |img: &RasterImage| {
            img.data()
                .iter()
                .zip(&data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let numeric = numeric_gradient(&d, &params(), size, loss, 1e-4)
            .unwrap()
            .to_flat();
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
            assert!(rel < 1e-3, "seed {seed}: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn large_document_renders() {
    let mut r = rng(500);
    let roots = (0..500)
        .map(|i| {
            let c = Point2::new(r.random_range(0.0..512.0), r.random_range(0.0..512.0));
            let rad = r.random_range(4.0..40.0);
            let fill = Rgb::new(r.random(), r.random(), r.random());
            RegionNode::new(
                format!("r1_{i}"),
                1,
                vec![ellipse_path(c, rad, rad * 0.7)],
                fill,
            )
        })
        .collect();
    let d = VectorDocument::with_roots(512, 512, roots);
    let start = std::time::Instant::now();
    let img = render(&d, &params(), (512, 512)).unwrap();
    let elapsed = start.elapsed();
    eprintln!(
        "500 regions at 512x512: {elapsed:?} on {} threads",
        rayon::current_num_threads()
    );
    assert_eq!(img.dims(), (512, 512));
    // Loose smoke bound; the 100 ms target assumes four cores.
    assert!(elapsed.as_secs_f64() < 0.4 * 4.0 / rayon::current_num_threads().min(4) as f64);
}
