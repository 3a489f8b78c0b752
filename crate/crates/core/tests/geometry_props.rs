mod common;

use proptest::prelude::*;
use vgloop::geometry::{
    densify, douglas_peucker, eval_cubic_bezier, fit_bezier_chain, flatten_cubic,
    split_at_longest_diagonal, CubicBezier, FitOptions, Point2, Polyline, MAX_SEGMENTS_PER_SIDE,
};

fn point() -> impl Strategy<Value = Point2> {
    (-50.0f64..50.0, -50.0f64..50.0).prop_map(|(x, y)| Point2::new(x, y))
}

fn cubic() -> impl Strategy<Value = CubicBezier> {
    (point(), point(), point(), point()).prop_map(|(a, b, c, d)| CubicBezier::new(a, b, c, d))
}

fn seg_dist(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let l = ab.norm_sq();
    let t = if l == 0.0 {
        0.0
    } else {
        ((p - a).dot(ab) / l).clamp(0.0, 1.0)
    };
    p.distance(a + ab * t)
}

/// Distance from `p` to the chain through `pts` (closing it when asked).
fn chain_dist(p: Point2, pts: &[Point2], closed: bool) -> f64 {
    let mut best = f64::INFINITY;
    for w in pts.windows(2) {
        best = best.min(seg_dist(p, w[0], w[1]));
    }
    if closed && pts.len() > 1 {
        best = best.min(seg_dist(p, pts[pts.len() - 1], pts[0]));
    }
    if pts.len() == 1 {
        best = p.distance(pts[0]);
    }
    best
}

fn is_subsequence(sub: &[Point2], all: &[Point2]) -> bool {
    let mut it = all.iter();
    sub.iter().all(|s| it.any(|a| a == s))
}

proptest! {
    #[test]
    fn dp_keeps_endpoints_and_bounds_error(pts in prop::collection::vec(point(), 2..60), eps in 0.0f64..10.0) {
        let line = Polyline::open(pts.clone()).unwrap();
        let out = douglas_peucker(&line, eps).unwrap();
        let kept = out.points();
        prop_assert_eq!(kept.first(), pts.first());
        prop_assert_eq!(kept.last(), pts.last());
        prop_assert!(is_subsequence(kept, &pts));
        for p in &pts {
            prop_assert!(chain_dist(*p, kept, false) <= eps + 1e-9);
        }
    }

    #[test]
    fn dp_closed_bounds_error(pts in prop::collection::vec(point(), 4..40), eps in 0.0f64..10.0) {
        let line = Polyline::closed(pts.clone()).unwrap();
        let out = douglas_peucker(&line, eps).unwrap();
        prop_assert!(out.is_closed());
        prop_assert!(out.len() >= 2);
        prop_assert!(is_subsequence(out.points(), &pts));
        for p in &pts {
            prop_assert!(chain_dist(*p, out.points(), true) <= eps + 1e-9);
        }
    }

    #[test]
    fn dp_zero_eps_only_drops_collinear(pts in prop::collection::vec(point(), 3..30)) {
        let out = douglas_peucker(&Polyline::open(pts.clone()).unwrap(), 0.0).unwrap();
        for p in &pts {
            prop_assert!(chain_dist(*p, out.points(), false) <= 1e-9);
        }
    }

    #[test]
    fn split_covers_all_vertices(pts in prop::collection::vec(point(), 4..40)) {
        let n = pts.len();
        let (a, b) = split_at_longest_diagonal(&Polyline::closed(pts.clone()).unwrap()).unwrap();
        let (a, b) = (a.points(), b.points());
        prop_assert_eq!(a.first(), b.last());
        prop_assert_eq!(a.last(), b.first());
        prop_assert_eq!(a.len() + b.len(), n + 2);
        prop_assert!(a.len() >= 3 && b.len() >= 3);
        let d = a[0].distance(*a.last().unwrap());
        for i in 0..n {
            for j in i + 2..n {
                if !(i == 0 && j == n - 1) {
                    prop_assert!(pts[i].distance(pts[j]) <= d + 1e-12);
                }
            }
        }
    }

    #[test]
    fn cubic_endpoints_and_convex_hull(c in cubic(), t in 0.0f64..=1.0) {
        prop_assert_eq!(eval_cubic_bezier(&c, 0.0).unwrap(), c.p0);
        prop_assert_eq!(eval_cubic_bezier(&c, 1.0).unwrap(), c.p3);
        let p = eval_cubic_bezier(&c, t).unwrap();
        let xs = [c.p0.x, c.p1.x, c.p2.x, c.p3.x];
        let ys = [c.p0.y, c.p1.y, c.p2.y, c.p3.y];
        let lo = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
        let hi = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
        prop_assert!(p.x >= lo(&xs) && p.x <= hi(&xs) && p.y >= lo(&ys) && p.y <= hi(&ys));
        prop_assert!(eval_cubic_bezier(&c, 1.5).is_err());
    }

    #[test]
    fn split_halves_trace_the_same_curve(c in cubic(), s in 0.05f64..0.95, u in 0.0f64..=1.0) {
        let (l, r) = c.split(s);
        let a = l.point_at(u);
        let b = c.point_at(s * u);
        prop_assert!(a.distance(b) < 1e-9);
        let a = r.point_at(u);
        let b = c.point_at(s + (1.0 - s) * u);
        prop_assert!(a.distance(b) < 1e-9);
    }

    #[test]
    fn flatten_stays_close(c in cubic(), tol in 0.05f64..2.0) {
        let pts = flatten_cubic(&c, tol).unwrap();
        prop_assert_eq!(pts.first(), Some(&c.p0));
        prop_assert_eq!(pts.last(), Some(&c.p3));
        for k in 0..=64 {
            let q = c.point_at(k as f64 / 64.0);
            prop_assert!(chain_dist(q, &pts, false) <= tol + 1e-9);
        }
    }

    #[test]
    fn fitted_chain_is_continuous_and_capped(seed in any::<u64>(), n in 3usize..9, max in 1usize..=8) {
        let mut r = common::rng(seed);
        let poly = common::star_polygon(&mut r, Point2::new(0.0, 0.0), 20.0, n);
        let mut ring = poly.clone();
        ring.push(poly[0]);
        let dense = Polyline::open(densify(&ring, 1.0)).unwrap();
        let opts = FitOptions { max_segments: max, ..Default::default() };
        let segs = fit_bezier_chain(&dense, &opts).unwrap();
        prop_assert!(!segs.is_empty() && segs.len() <= max.min(MAX_SEGMENTS_PER_SIDE));
        prop_assert_eq!(segs[0].p0, dense.points()[0]);
        prop_assert_eq!(segs.last().unwrap().p3, *dense.points().last().unwrap());
        for w in segs.windows(2) {
            prop_assert_eq!(w[0].p3, w[1].p0);
        }
    }
}

#[test]
fn fit_recovers_a_known_cubic() {
    let c = CubicBezier::new(
        Point2::new(0.0, 0.0),
        Point2::new(10.0, 25.0),
        Point2::new(30.0, -5.0),
        Point2::new(40.0, 12.0),
    );
    let pts: Vec<Point2> = (0..=200).map(|k| c.point_at(k as f64 / 200.0)).collect();
    let segs = fit_bezier_chain(
        &Polyline::open(pts.clone()).unwrap(),
        &FitOptions::default(),
    )
    .unwrap();
    assert_eq!(segs.len(), 1);
    for k in 0..=400 {
        let q = segs[0].point_at(k as f64 / 400.0);
        assert!(chain_dist(q, &pts, false) < 1e-3);
    }
}

#[test]
fn fit_rejects_degenerate_and_bad_budget() {
    let p = Point2::new(1.0, 1.0);
    assert!(fit_bezier_chain(
        &Polyline::open(vec![p, p, p]).unwrap(),
        &FitOptions::default()
    )
    .is_err());
    let line = Polyline::open(vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)]).unwrap();
    for max in [0, 9] {
        let opts = FitOptions {
            max_segments: max,
            ..Default::default()
        };
        assert!(fit_bezier_chain(&line, &opts).is_err());
    }
}

#[test]
fn dp_and_split_examples() {
    let p = Point2::new;
    let out = douglas_peucker(
        &Polyline::open(vec![p(0., 0.), p(1., 0.), p(2., 0.)]).unwrap(),
        0.01,
    )
    .unwrap();
    assert_eq!(out.points(), &[p(0., 0.), p(2., 0.)]);
    let tri = vec![p(0., 0.), p(1., 1.), p(2., 0.)];
    assert_eq!(
        douglas_peucker(&Polyline::open(tri.clone()).unwrap(), 0.5)
            .unwrap()
            .points(),
        &tri[..]
    );

    let rect = Polyline::closed(vec![p(0., 0.), p(4., 0.), p(4., 1.), p(0., 1.)]).unwrap();
    let (a, b) = split_at_longest_diagonal(&rect).unwrap();
    assert_eq!(a.points(), &[p(0., 0.), p(4., 0.), p(4., 1.)]);
    assert_eq!(b.points(), &[p(4., 1.), p(0., 1.), p(0., 0.)]);
    assert!((a.points()[0].distance(a.points()[2]) - 17f64.sqrt()).abs() < 1e-15);
    let tri = Polyline::closed(vec![p(0., 0.), p(1., 0.), p(2., 0.), p(1., 2.)]).unwrap();
    let (a, b) = split_at_longest_diagonal(&tri).unwrap();
    assert_eq!(a.len() + b.len(), 6);
    assert!(split_at_longest_diagonal(
        &Polyline::closed(vec![p(0., 0.), p(1., 0.), p(0., 1.)]).unwrap()
    )
    .is_err());
}
