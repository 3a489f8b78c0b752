#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgloop::document::{RegionNode, VectorDocument};
use vgloop::geometry::{BezierPath, Point2};
use vgloop::Rgb;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_path(r: &mut ChaCha8Rng, w: f64, h: f64) -> BezierPath {
    let segs = r.random_range(1..=4);
    let pts = (0..3 * segs)
        .map(|_| {
            Point2::new(
                r.random_range(-0.1 * w..1.1 * w),
                r.random_range(-0.1 * h..1.1 * h),
            )
        })
        .collect();
    BezierPath::from_control_points(pts).unwrap()
}

/// Star-shaped closed polygon around `c` with `n` vertices.
pub fn star_polygon(r: &mut ChaCha8Rng, c: Point2, radius: f64, n: usize) -> Vec<Point2> {
    (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * (k as f64 + r.random_range(0.0..0.8)) / n as f64;
            let rr = radius * r.random_range(0.4..1.0);
            Point2::new(c.x + rr * a.cos(), c.y + rr * a.sin())
        })
        .collect()
}

fn node(
    r: &mut ChaCha8Rng,
    id: &mut usize,
    layer: usize,
    depth: usize,
    w: f64,
    h: f64,
) -> RegionNode {
    let n_sub = r.random_range(1..=2);
    let subpaths = (0..n_sub).map(|_| random_path(r, w, h)).collect();
    let fill = Rgb::new(r.random(), r.random(), r.random());
    let mut n = RegionNode::new(format!("r{layer}_{}", *id), layer, subpaths, fill);
    *id += 1;
    if r.random_bool(0.5) {
        n.source_mask_id = Some(format!("m{layer}_{}", *id));
    }
    if layer < depth {
        let kids = r.random_range(0..=2);
        n.children = (0..kids)
            .map(|_| node(r, id, layer + 1, depth, w, h))
            .collect();
    }
    n
}

/// Random hierarchical document with up to three layers.
pub fn random_document(seed: u64) -> VectorDocument {
    let mut r = rng(seed);
    let w = r.random_range(8..=96);
    let h = r.random_range(8..=96);
    let depth = r.random_range(1..=3);
    let mut id = 0;
    let roots = (0..r.random_range(1..=3))
        .map(|_| node(&mut r, &mut id, 1, depth, w as f64, h as f64))
        .collect();
    let doc = VectorDocument::with_roots(w, h, roots);
    doc.validate().unwrap();
    doc
}

/// Small scene of star-shaped polygons and ellipses, each with a child
/// at most one level deep.
pub fn random_scene(seed: u64, size: usize, max_regions: usize) -> VectorDocument {
    let mut r = rng(seed);
    let s = size as f64;
    let count = r.random_range(1..=max_regions);
    let mut roots: Vec<RegionNode> = Vec::new();
    for i in 0..count {
        let c = Point2::new(
            r.random_range(0.2 * s..0.8 * s),
            r.random_range(0.2 * s..0.8 * s),
        );
        let rad = r.random_range(0.15 * s..0.35 * s);
        let path = if r.random_bool(0.5) {
            vgloop::rasterizer::ellipse_path(c, rad, rad * r.random_range(0.5..1.0))
        } else {
            let n = r.random_range(3..=7);
            BezierPath::from_polygon(&star_polygon(&mut r, c, rad, n)).unwrap()
        };
        let fill = Rgb::new(r.random(), r.random(), r.random());
        let parent = i > 0 && !roots.is_empty() && r.random_bool(0.4);
        if parent {
            let p = roots.last_mut().unwrap();
            if p.children.is_empty() {
                p.children
                    .push(RegionNode::new(format!("r2_{i}"), 2, vec![path], fill));
                continue;
            }
        }
        roots.push(RegionNode::new(format!("r1_{i}"), 1, vec![path], fill));
    }
    VectorDocument::with_roots(size, size, roots)
}

/// Structural equality with coordinates within `tol` and fills within
/// half an 8-bit step.
pub fn approx_same(a: &VectorDocument, b: &VectorDocument, tol: f64) -> Result<(), String> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err("canvas differs".into());
    }
    let pa = a.preorder_with_parents();
    let pb = b.preorder_with_parents();
    if pa.len() != pb.len() {
        return Err(format!("{} vs {} nodes", pa.len(), pb.len()));
    }
    for ((x, px), (y, py)) in pa.iter().zip(&pb) {
        if x.id != y.id || px != py || x.layer != y.layer || x.source_mask_id != y.source_mask_id {
            return Err(format!("node {} / {} differs in structure", x.id, y.id));
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
                    return Err(format!("{}: {:?} vs {:?}", x.id, p, q));
                }
            }
        }
        for (c, d) in x.fill.0.iter().zip(&y.fill.0) {
            if (c - d).abs() > 0.5 / 255.0 + 1e-12 {
                return Err(format!("{}: fill {:?} vs {:?}", x.id, x.fill, y.fill));
            }
        }
    }
    Ok(())
}
