//! Brute-force oracles and generators for the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgloop::document::{RegionNode, VectorDocument};
use vgloop::geometry::{BezierPath, Point2};
use vgloop::rasterizer::ellipse_path;
use vgloop::{BinaryMask, Rgb};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn seg_dist(p: Point2, a: Point2, b: Point2) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let (wx, wy) = (p.x - a.x, p.y - a.y);
    let l2 = vx * vx + vy * vy;
    let t = if l2 == 0.0 {
        0.0
    } else {
        ((wx * vx + wy * vy) / l2).clamp(0.0, 1.0)
    };
    (p.x - (a.x + t * vx)).hypot(p.y - (a.y + t * vy))
}

fn dp_rec(pts: &[Point2], i: usize, j: usize, eps: f64, keep: &mut [bool]) {
    if j < i + 2 {
        return;
    }
    let mut far = i + 1;
    let mut dmax = seg_dist(pts[far], pts[i], pts[j]);
    for k in i + 2..j {
        let d = seg_dist(pts[k], pts[i], pts[j]);
        if d > dmax {
            dmax = d;
            far = k;
        }
    }
    if dmax > eps {
        keep[far] = true;
        dp_rec(pts, i, far, eps, keep);
        dp_rec(pts, far, j, eps, keep);
    }
}

/// Textbook recursive simplification of an open chain; kept indices.
pub fn dp_open_oracle(pts: &[Point2], eps: f64) -> Vec<usize> {
    let n = pts.len();
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[n - 1] = true;
    dp_rec(pts, 0, n - 1, eps, &mut keep);
    (0..n).filter(|&k| keep[k]).collect()
}

/// Every pair `(i, j)`, `i < j`, accepted by `ok`, ranked by descending
/// squared length then ascending `(i, j)`.
fn ranked_pairs(pts: &[Point2], ok: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    let n = pts.len();
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if ok(i, j) {
                let (dx, dy) = (pts[i].x - pts[j].x, pts[i].y - pts[j].y);
                all.push((dx * dx + dy * dy, i, j));
            }
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    all.into_iter().map(|(_, i, j)| (i, j)).collect()
}

/// Closed simplification: both arcs between the farthest pair.
pub fn dp_closed_oracle(pts: &[Point2], eps: f64) -> Vec<usize> {
    let n = pts.len();
    if n <= 3 {
        return (0..n).collect();
    }
    let (a, b) = ranked_pairs(pts, |_, _| true)[0];
    let mut kept = std::collections::BTreeSet::new();
    let arc1: Vec<usize> = (a..=b).collect();
    let arc2: Vec<usize> = (b..n).chain(0..=a).collect();
    for arc in [arc1, arc2] {
        let sub: Vec<Point2> = arc.iter().map(|&k| pts[k]).collect();
        for k in dp_open_oracle(&sub, eps) {
            kept.insert(arc[k]);
        }
    }
    kept.into_iter().collect()
}

/// Longest admissible diagonal and the two chains it cuts.
pub fn split_oracle(pts: &[Point2]) -> (Vec<Point2>, Vec<Point2>) {
    let n = pts.len();
    let (i, j) = ranked_pairs(pts, |i, j| j - i >= 2 && !(i == 0 && j == n - 1))[0];
    let first = pts[i..=j].to_vec();
    let mut second = pts[j..].to_vec();
    second.extend_from_slice(&pts[..=i]);
    (first, second)
}

/// Accepted `(level, raw index, pixel count)` per level, by pixel loops.
pub fn assign_oracle(
    w: usize,
    h: usize,
    levels: &[Vec<BinaryMask>],
    tau: f64,
) -> Vec<Vec<(usize, usize)>> {
    let mut covered = vec![false; w * h];
    let mut out = Vec::new();
    for level in levels {
        let area = |m: &BinaryMask| {
            (0..h)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| m.get(x, y))
                .count()
        };
        let mut order: Vec<(usize, usize)> = level
            .iter()
            .enumerate()
            .map(|(j, m)| (j, area(m)))
            .collect();
        // Insertion sort keeps ties in index order.
        for a in 1..order.len() {
            let mut b = a;
            while b > 0 && order[b - 1].1 < order[b].1 {
                order.swap(b - 1, b);
                b -= 1;
            }
        }
        let mut kept = Vec::new();
        for (j, n) in order {
            if n == 0 {
                continue;
            }
            let mut hit = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if level[j].get(x, y) && covered[y * w + x] {
                        hit += 1;
                    }
                }
            }
            if hit as f64 / n as f64 > tau {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    if level[j].get(x, y) {
                        covered[y * w + x] = true;
                    }
                }
            }
            kept.push((j, n));
        }
        out.push(kept);
    }
    out
}

pub fn random_points(r: &mut ChaCha8Rng, n: usize, span: f64) -> Vec<Point2> {
    (0..n)
        .map(|_| Point2::new(r.random_range(0.0..span), r.random_range(0.0..span)))
        .collect()
}

/// Rectangles, discs and occasional empty masks.
pub fn random_mask(r: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    match r.random_range(0..10) {
        0 => BinaryMask::new(w, h),
        1..=5 => {
            let (x0, y0) = (r.random_range(0..w), r.random_range(0..h));
            let (x1, y1) = (r.random_range(x0..=w), r.random_range(y0..=h));
            BinaryMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
        }
        _ => {
            let (cx, cy) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
            let rad = r.random_range(1.0..w as f64 / 2.0);
            BinaryMask::from_fn(w, h, |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy < rad * rad
            })
        }
    }
}

fn star_polygon(r: &mut ChaCha8Rng, c: Point2, radius: f64, n: usize) -> Vec<Point2> {
    (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * (k as f64 + r.random_range(0.0..0.8)) / n as f64;
            let rr = radius * r.random_range(0.4..1.0);
            Point2::new(c.x + rr * a.cos(), c.y + rr * a.sin())
        })
        .collect()
}

/// Ellipses and star polygons, some with one child region.
pub fn random_scene(seed: u64, size: usize, max_regions: usize) -> VectorDocument {
    let mut r = rng(seed);
    let s = size as f64;
    let mut roots: Vec<RegionNode> = Vec::new();
    for i in 0..r.random_range(1..=max_regions) {
        let c = Point2::new(
            r.random_range(0.2 * s..0.8 * s),
            r.random_range(0.2 * s..0.8 * s),
        );
        let rad = r.random_range(0.15 * s..0.35 * s);
        let path = if r.random_bool(0.5) {
            ellipse_path(c, rad, rad * r.random_range(0.5..1.0))
        } else {
            let n = r.random_range(3..=7);
            BezierPath::from_polygon(&star_polygon(&mut r, c, rad, n)).unwrap()
        };
        let fill = Rgb::new(r.random(), r.random(), r.random());
        if let Some(p) = roots.last_mut().filter(|p| p.children.is_empty()) {
            if r.random_bool(0.4) {
                p.children
                    .push(RegionNode::new(format!("r2_{i}"), 2, vec![path], fill));
                continue;
            }
        }
        roots.push(RegionNode::new(format!("r1_{i}"), 1, vec![path], fill));
    }
    VectorDocument::with_roots(size, size, roots)
}

fn random_node(
    r: &mut ChaCha8Rng,
    id: &mut usize,
    layer: usize,
    depth: usize,
    w: f64,
    h: f64,
) -> RegionNode {
    let subpaths = (0..r.random_range(1..=2))
        .map(|_| {
            let pts = (0..3 * r.random_range(1..=4))
                .map(|_| {
                    Point2::new(
                        r.random_range(-0.1 * w..1.1 * w),
                        r.random_range(-0.1 * h..1.1 * h),
                    )
                })
                .collect();
            BezierPath::from_control_points(pts).unwrap()
        })
        .collect();
    let fill = Rgb::new(r.random(), r.random(), r.random());
    let mut n = RegionNode::new(format!("r{layer}_{}", *id), layer, subpaths, fill);
    *id += 1;
    if r.random_bool(0.5) {
        n.source_mask_id = Some(format!("m{layer}_{}", *id));
    }
    if layer < depth {
        n.children = (0..r.random_range(0..=2))
            .map(|_| random_node(r, id, layer + 1, depth, w, h))
            .collect();
    }
    n
}

/// Random hierarchy up to three layers deep with arbitrary cubic outlines.
pub fn random_document(seed: u64) -> VectorDocument {
    let mut r = rng(seed);
    let (w, h) = (r.random_range(8..=96), r.random_range(8..=96));
    let depth = r.random_range(1..=3);
    let mut id = 0;
    let roots = (0..r.random_range(1..=3))
        .map(|_| random_node(&mut r, &mut id, 1, depth, w as f64, h as f64))
        .collect();
    VectorDocument::with_roots(w, h, roots)
}

/// Structural equality with coordinates within `tol` and fills within
/// half an 8-bit step.
pub fn approx_same(a: &VectorDocument, b: &VectorDocument, tol: f64) -> Result<(), String> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err("canvas differs".into());
    }
    let (pa, pb) = (a.preorder_with_parents(), b.preorder_with_parents());
    if pa.len() != pb.len() {
        return Err(format!("{} vs {} nodes", pa.len(), pb.len()));
    }
    for ((x, px), (y, py)) in pa.iter().zip(&pb) {
        if x.id != y.id || px != py || x.layer != y.layer || x.source_mask_id != y.source_mask_id {
            return Err(format!("{} / {}: structure differs", x.id, y.id));
        }
        if x.subpaths.len() != y.subpaths.len() {
            return Err(format!("{}: subpath count", x.id));
        }
        for (s, t) in x.subpaths.iter().zip(&y.subpaths) {
            if s.control_points().len() != t.control_points().len() {
                return Err(format!("{}: control point count", x.id));
            }
            for (p, q) in s.control_points().iter().zip(t.control_points()) {
                if (p.x - q.x).abs() > tol || (p.y - q.y).abs() > tol {
                    return Err(format!("{}: {p:?} vs {q:?}", x.id));
                }
            }
        }
        if x.fill
            .0
            .iter()
            .zip(&y.fill.0)
            .any(|(c, d)| (c - d).abs() > 0.5 / 255.0 + 1e-12)
        {
            return Err(format!("{}: fill {:?} vs {:?}", x.id, x.fill, y.fill));
        }
    }
    Ok(())
}

/// Ids of `id` and all its descendants.
pub fn subtree_ids(doc: &VectorDocument, id: &str) -> Vec<String> {
    fn walk(n: &RegionNode, out: &mut Vec<String>) {
        out.push(n.id.clone());
        for c in &n.children {
            walk(c, out);
        }
    }
    let mut out = Vec::new();
    if let Some(n) = doc.find(id) {
        walk(n, &mut out);
    }
    out
}
