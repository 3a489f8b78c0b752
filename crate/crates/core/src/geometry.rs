//! Cubic Bézier and polygon primitives.
//!
//! Coordinates are canvas units with `x` to the right and `y` down, so a
//! pixel `(px, py)` covers `[px, px+1) × [py, py+1)`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closure / continuity tolerance for [`BezierPath`] construction.
pub const CONTINUITY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    pub fn distance_sq(self, o: Point2) -> f64 {
        (self - o).norm_sq()
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        Point2::new(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Point2 {
    fn add_assign(&mut self, o: Point2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Distance from `p` to the closed segment `[a, b]`, together with the
/// clamped projection parameter `u ∈ [0, 1]`.
#[inline]
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> (f64, f64) {
    let ab = b - a;
    let len2 = ab.norm_sq();
    let u = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = a + ab * u;
    ((p - q).norm(), u)
}

/// Cubic Bernstein basis values at `t`.
#[inline]
pub fn cubic_basis(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicBezier {
    pub p0: Point2,
    pub p1: Point2,
    pub p2: Point2,
    pub p3: Point2,
}

impl CubicBezier {
    pub const fn new(p0: Point2, p1: Point2, p2: Point2, p3: Point2) -> Self {
        CubicBezier { p0, p1, p2, p3 }
    }

    /// Straight segment with the inner control points at the thirds.
    pub fn line(a: Point2, b: Point2) -> Self {
        CubicBezier::new(a, a.lerp(b, 1.0 / 3.0), a.lerp(b, 2.0 / 3.0), b)
    }

    pub fn points(&self) -> [Point2; 4] {
        [self.p0, self.p1, self.p2, self.p3]
    }

    pub fn is_finite(&self) -> bool {
        self.points().iter().all(Point2::is_finite)
    }

    /// Bernstein evaluation without a domain check.
    #[inline]
    pub fn point_at(&self, t: f64) -> Point2 {
        let b = cubic_basis(t);
        Point2::new(
            b[0] * self.p0.x + b[1] * self.p1.x + b[2] * self.p2.x + b[3] * self.p3.x,
            b[0] * self.p0.y + b[1] * self.p1.y + b[2] * self.p2.y + b[3] * self.p3.y,
        )
    }

    pub fn derivative_at(&self, t: f64) -> Point2 {
        let s = 1.0 - t;
        (self.p1 - self.p0) * (3.0 * s * s)
            + (self.p2 - self.p1) * (6.0 * s * t)
            + (self.p3 - self.p2) * (3.0 * t * t)
    }

    pub fn second_derivative_at(&self, t: f64) -> Point2 {
        let a = self.p2 - self.p1 * 2.0 + self.p0;
        let b = self.p3 - self.p2 * 2.0 + self.p1;
        a * (6.0 * (1.0 - t)) + b * (6.0 * t)
    }

    /// De Casteljau split at `t`.
    pub fn split(&self, t: f64) -> (CubicBezier, CubicBezier) {
        let p01 = self.p0.lerp(self.p1, t);
        let p12 = self.p1.lerp(self.p2, t);
        let p23 = self.p2.lerp(self.p3, t);
        let p012 = p01.lerp(p12, t);
        let p123 = p12.lerp(p23, t);
        let mid = p012.lerp(p123, t);
        (
            CubicBezier::new(self.p0, p01, p012, mid),
            CubicBezier::new(mid, p123, p23, self.p3),
        )
    }

    /// Largest control-point second difference; `6 ×` this bounds `|B''|`.
    pub fn max_second_difference(&self) -> f64 {
        let a = (self.p2 - self.p1 * 2.0 + self.p0).norm();
        let b = (self.p3 - self.p2 * 2.0 + self.p1).norm();
        a.max(b)
    }

    /// Uniform sample count that keeps chordal deviation within `tol`:
    /// the deviation of a uniform `n`-piece chord is at most
    /// `max|B''| / (8 n²) ≤ 6·M / (8 n²)`.
    pub fn uniform_steps(&self, tol: f64, max_steps: usize) -> usize {
        let m = self.max_second_difference();
        let n = (0.75 * m / tol).sqrt().ceil();
        if n.is_finite() {
            (n as usize).clamp(1, max_steps)
        } else {
            max_steps
        }
    }

    fn map(&self, f: impl Fn(Point2) -> Point2) -> CubicBezier {
        CubicBezier::new(f(self.p0), f(self.p1), f(self.p2), f(self.p3))
    }
}

/// Evaluate a cubic at `t ∈ [0, 1]`.
pub fn eval_cubic_bezier(curve: &CubicBezier, t: f64) -> Result<Point2> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "bezier parameter {t} outside [0, 1]"
        )));
    }
    Ok(curve.point_at(t))
}

/// Closed chain of cubic segments.
///
/// Stored as a ring of `3L` control points `[a0, c0, d0, a1, c1, d1, …]`
/// where segment `i` is `(a_i, c_i, d_i, a_{i+1})` and the last segment
/// ends at `a0`, so continuity and closure hold by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BezierPath {
    points: Vec<Point2>,
}

impl BezierPath {
    pub fn from_control_points(points: Vec<Point2>) -> Result<Self> {
        if points.is_empty() || !points.len().is_multiple_of(3) {
            return Err(Error::Invalid(format!(
                "closed path needs 3·L control points, got {}",
                points.len()
            )));
        }
        if !points.iter().all(Point2::is_finite) {
            return Err(Error::Invalid("non-finite control point".into()));
        }
        Ok(BezierPath { points })
    }

    /// Build from explicit segments; consecutive endpoints (and the last
    /// end / first start) must agree within [`CONTINUITY_EPS`].
    pub fn from_segments(segments: &[CubicBezier]) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Invalid("path has no segments".into()));
        }
        let n = segments.len();
        let mut points = Vec::with_capacity(3 * n);
        for (i, s) in segments.iter().enumerate() {
            let next = &segments[(i + 1) % n];
            if s.p3.distance(next.p0) > CONTINUITY_EPS {
                return Err(Error::Invalid(format!(
                    "segment {i} ends at ({}, {}) but segment {} starts at ({}, {})",
                    s.p3.x,
                    s.p3.y,
                    (i + 1) % n,
                    next.p0.x,
                    next.p0.y
                )));
            }
            points.extend([s.p0, s.p1, s.p2]);
        }
        Self::from_control_points(points)
    }

    /// Closed polygon with straight cubic edges.
    pub fn from_polygon(vertices: &[Point2]) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::Invalid("polygon needs at least two vertices".into()));
        }
        let n = vertices.len();
        let segs: Vec<_> = (0..n)
            .map(|i| CubicBezier::line(vertices[i], vertices[(i + 1) % n]))
            .collect();
        Self::from_segments(&segs)
    }

    pub fn control_points(&self) -> &[Point2] {
        &self.points
    }

    /// Mutable access to the ring; any edit keeps the path closed.
    pub fn control_points_mut(&mut self) -> &mut [Point2] {
        &mut self.points
    }

    pub fn segment_count(&self) -> usize {
        self.points.len() / 3
    }

    pub fn segment(&self, i: usize) -> CubicBezier {
        let n = self.points.len();
        CubicBezier::new(
            self.points[3 * i],
            self.points[3 * i + 1],
            self.points[3 * i + 2],
            self.points[(3 * i + 3) % n],
        )
    }

    pub fn segments(&self) -> impl Iterator<Item = CubicBezier> + '_ {
        (0..self.segment_count()).map(|i| self.segment(i))
    }

    pub fn map_points(&self, f: impl Fn(Point2) -> Point2) -> BezierPath {
        BezierPath {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn translate(&self, d: Point2) -> BezierPath {
        self.map_points(|p| p + d)
    }

    /// Control-polygon bounding box `(min, max)`; contains the curve.
    pub fn control_bbox(&self) -> (Point2, Point2) {
        bbox_of(&self.points).expect("path is non-empty")
    }

    pub fn is_degenerate(&self) -> bool {
        let p0 = self.points[0];
        self.points.iter().all(|&p| p == p0)
    }
}

pub fn bbox_of(points: &[Point2]) -> Option<(Point2, Point2)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| {
        (
            Point2::new(lo.x.min(p.x), lo.y.min(p.y)),
            Point2::new(hi.x.max(p.x), hi.y.max(p.y)),
        )
    }))
}

/// Ordered vertex chain. Closed polylines close implicitly (the last vertex
/// connects back to the first and is not repeated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    points: Vec<Point2>,
    closed: bool,
}

impl Polyline {
    pub fn new(points: Vec<Point2>, closed: bool) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Invalid(format!(
                "polyline needs at least 2 points, got {}",
                points.len()
            )));
        }
        if !points.iter().all(Point2::is_finite) {
            return Err(Error::Invalid("non-finite polyline vertex".into()));
        }
        if closed && points.first() == points.last() {
            return Err(Error::Invalid(
                "closed polyline must not repeat its first vertex".into(),
            ));
        }
        Ok(Polyline { points, closed })
    }

    pub fn open(points: Vec<Point2>) -> Result<Self> {
        Self::new(points, false)
    }

    pub fn closed(points: Vec<Point2>) -> Result<Self> {
        Self::new(points, true)
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point2> {
        self.points
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Edges as `(start, end)` pairs, including the closing edge.
    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.points.len();
        let count = if self.closed { n } else { n - 1 };
        (0..count).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.distance(b)).sum()
    }

    /// Distance from `p` to the nearest edge.
    pub fn distance_to(&self, p: Point2) -> f64 {
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b).0)
            .fold(f64::INFINITY, f64::min)
    }

    /// Open chain that walks once around a closed polyline, ending on the
    /// first vertex again. Open polylines are returned unchanged.
    pub fn unrolled(&self) -> Vec<Point2> {
        let mut pts = self.points.clone();
        if self.closed {
            pts.push(self.points[0]);
        }
        pts
    }
}

/// Shoelace signed area (positive for clockwise-on-screen in y-down
/// coordinates, i.e. counter-clockwise in the usual math orientation).
pub fn signed_area(points: &[Point2]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += points[i].cross(points[(i + 1) % n]);
    }
    0.5 * acc
}

/// Absolute shoelace area of a closed polyline.
pub fn polygon_area(poly: &Polyline) -> Result<f64> {
    if !poly.is_closed() {
        return Err(Error::Domain("area of an open polyline".into()));
    }
    Ok(signed_area(poly.points()).abs())
}

fn flatten_into(curve: &CubicBezier, tol: f64, depth: u32, out: &mut Vec<Point2>) {
    let d1 = point_segment_distance(curve.p1, curve.p0, curve.p3).0;
    let d2 = point_segment_distance(curve.p2, curve.p0, curve.p3).0;
    // The curve lies in the convex hull of its control points, so the
    // control-point distance to the chord bounds the chordal deviation.
    if d1.max(d2) <= tol || depth >= 32 {
        out.push(curve.p3);
        return;
    }
    let (l, r) = curve.split(0.5);
    flatten_into(&l, tol, depth + 1, out);
    flatten_into(&r, tol, depth + 1, out);
}

/// Adaptive flattening of one segment; includes both endpoints.
pub fn flatten_cubic(curve: &CubicBezier, tol: f64) -> Result<Vec<Point2>> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!(
            "flatten tolerance {tol} must be > 0"
        )));
    }
    if !curve.is_finite() {
        return Err(Error::Invalid("non-finite control point".into()));
    }
    let mut out = vec![curve.p0];
    flatten_into(curve, tol, 0, &mut out);
    Ok(out)
}

/// Adaptive flattening of a closed path into a closed polyline whose
/// chordal deviation from the path is at most `tol`.
pub fn flatten_path(path: &BezierPath, tol: f64) -> Result<Polyline> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!(
            "flatten tolerance {tol} must be > 0"
        )));
    }
    if path.is_degenerate() {
        return Err(Error::Degenerate("all control points coincide".into()));
    }
    let mut pts: Vec<Point2> = Vec::new();
    for seg in path.segments() {
        let mut seg_pts = vec![seg.p0];
        flatten_into(&seg, tol, 0, &mut seg_pts);
        seg_pts.pop();
        for p in seg_pts {
            if pts.last() != Some(&p) {
                pts.push(p);
            }
        }
    }
    while pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    if pts.len() < 2 {
        return Err(Error::Degenerate("path flattens to a single point".into()));
    }
    Polyline::closed(pts)
}

/// Boundaries of one 4-connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct TracedComponent {
    /// Outer boundary, positive [`signed_area`].
    pub outer: Polyline,
    /// Interior hole boundaries, negative [`signed_area`].
    pub holes: Vec<Polyline>,
    pub pixel_count: usize,
}

/// Outer boundary of every 4-connected foreground component.
///
/// See [`trace_mask_components`] for the lattice convention.
pub fn trace_mask_boundary(mask: &crate::raster::BinaryMask) -> Vec<Polyline> {
    trace_mask_components(mask)
        .into_iter()
        .map(|c| c.outer)
        .collect()
}

/// Trace every 4-connected foreground component of `mask`.
///
/// Vertices sit on pixel corners: pixel `(x, y)` is the unit square with
/// corners `(x, y)` and `(x+1, y+1)`. Each boundary walks with the
/// component on its right-hand side on screen (y down), so outer
/// boundaries have positive signed area and holes negative. At a corner
/// shared by two diagonally touching pixels the walk turns toward the
/// current pixel, which keeps diagonal neighbours apart. Only corners where
/// the direction changes are emitted. Outer boundaries start at the
/// top-left corner of the component's first pixel in raster order;
/// holes start at their top-most, then left-most vertex. Components are
/// ordered by their first pixel in raster order.
pub fn trace_mask_components(mask: &crate::raster::BinaryMask) -> Vec<TracedComponent> {
    let (w, h) = mask.dims();
    let mut labels = vec![u32::MAX; w * h];
    let mut comps: Vec<(u32, Vec<(usize, usize)>)> = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) || labels[y * w + x] != u32::MAX {
                continue;
            }
            let label = comps.len() as u32;
            let mut pixels = Vec::new();
            labels[y * w + x] = label;
            stack.push((x, y));
            while let Some((cx, cy)) = stack.pop() {
                pixels.push((cx, cy));
                let mut visit = |nx: usize, ny: usize| {
                    let i = ny * w + nx;
                    if mask.get(nx, ny) && labels[i] == u32::MAX {
                        labels[i] = label;
                        stack.push((nx, ny));
                    }
                };
                if cx > 0 {
                    visit(cx - 1, cy);
                }
                if cx + 1 < w {
                    visit(cx + 1, cy);
                }
                if cy > 0 {
                    visit(cx, cy - 1);
                }
                if cy + 1 < h {
                    visit(cx, cy + 1);
                }
            }
            comps.push((label, pixels));
        }
    }

    comps
        .into_iter()
        .map(|(label, pixels)| trace_component(&labels, w, h, label, &pixels))
        .collect()
}

// Directions on screen: 0 = +x, 1 = +y, 2 = -x, 3 = -y. Turning right
// (clockwise on screen) is `d + 1`.
const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

fn trace_component(
    labels: &[u32],
    w: usize,
    h: usize,
    label: u32,
    pixels: &[(usize, usize)],
) -> TracedComponent {
    use std::collections::HashMap;

    let inside = |x: i64, y: i64| -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < w
            && (y as usize) < h
            && labels[y as usize * w + x as usize] == label
    };

    // Directed boundary edges keyed by start corner; at most two per corner.
    let mut out_edges: HashMap<(i64, i64), Vec<u8>> = HashMap::new();
    let mut starts: Vec<(i64, i64, u8)> = Vec::new();
    let mut add = |sx: i64, sy: i64, d: u8, out: &mut HashMap<(i64, i64), Vec<u8>>| {
        out.entry((sx, sy)).or_default().push(d);
        starts.push((sy, sx, d));
    };
    for &(px, py) in pixels {
        let (x, y) = (px as i64, py as i64);
        if !inside(x, y - 1) {
            add(x, y, 0, &mut out_edges);
        }
        if !inside(x + 1, y) {
            add(x + 1, y, 1, &mut out_edges);
        }
        if !inside(x, y + 1) {
            add(x + 1, y + 1, 2, &mut out_edges);
        }
        if !inside(x - 1, y) {
            add(x, y + 1, 3, &mut out_edges);
        }
    }
    starts.sort_unstable();

    let mut used: HashMap<(i64, i64, u8), bool> = HashMap::new();
    let mut cycles: Vec<Vec<Point2>> = Vec::new();
    for &(sy, sx, sd) in &starts {
        if used.contains_key(&(sx, sy, sd)) {
            continue;
        }
        let mut verts: Vec<(i64, i64, u8)> = Vec::new();
        let (mut x, mut y, mut d) = (sx, sy, sd);
        loop {
            used.insert((x, y, d), true);
            verts.push((x, y, d));
            let (dx, dy) = DIRS[d as usize];
            x += dx;
            y += dy;
            let outs = &out_edges[&(x, y)];
            d = if outs.len() == 1 {
                outs[0]
            } else {
                // Saddle: turn right, toward the current pixel.
                let right = (d + 1) % 4;
                debug_assert!(outs.contains(&right));
                right
            };
            if (x, y, d) == (sx, sy, sd) {
                break;
            }
        }
        // Keep only corners: vertices whose incoming direction differs.
        let n = verts.len();
        let mut pts = Vec::new();
        for i in 0..n {
            let prev_dir = verts[(i + n - 1) % n].2;
            if prev_dir != verts[i].2 {
                pts.push(Point2::new(verts[i].0 as f64, verts[i].1 as f64));
            }
        }
        // Rotate so the top-most, left-most corner comes first.
        if let Some(k) = (0..pts.len()).min_by(|&a, &b| {
            (pts[a].y, pts[a].x)
                .partial_cmp(&(pts[b].y, pts[b].x))
                .expect("finite corners")
        }) {
            pts.rotate_left(k);
        }
        cycles.push(pts);
    }

    let mut outer = None;
    let mut holes = Vec::new();
    for c in cycles {
        let a = signed_area(&c);
        let poly = Polyline::closed(c).expect("pixel boundary has at least 4 corners");
        if a > 0.0 && outer.is_none() {
            outer = Some(poly);
        } else {
            holes.push(poly);
        }
    }
    TracedComponent {
        outer: outer.expect("component has an outer boundary"),
        holes,
        pixel_count: pixels.len(),
    }
}

fn dp_open(points: &[Point2], eps: f64, keep: &mut [bool]) {
    let n = points.len();
    keep[0] = true;
    keep[n - 1] = true;
    let mut stack = vec![(0usize, n - 1)];
    while let Some((i, j)) = stack.pop() {
        if j <= i + 1 {
            continue;
        }
        let (a, b) = (points[i], points[j]);
        let mut best = (0.0f64, 0usize);
        for (k, &p) in points.iter().enumerate().take(j).skip(i + 1) {
            let d = point_segment_distance(p, a, b).0;
            if d > best.0 || best.1 == 0 {
                best = (d, k);
            }
        }
        if best.0 > eps {
            keep[best.1] = true;
            // Left half first so results do not depend on stack order.
            stack.push((best.1, j));
            stack.push((i, best.1));
        }
    }
}

/// Ramer–Douglas–Peucker simplification. Distances are measured to the
/// chord *segment*, so every discarded vertex lies within `eps` of the
/// retained chain. Ties on the farthest vertex go to the lowest index.
///
/// Closed input is anchored at its mutually farthest vertex pair
/// (lowest index pair on ties), both arcs are simplified, and the
/// retained vertices are returned in their original cyclic order.
pub fn douglas_peucker(line: &Polyline, eps: f64) -> Result<Polyline> {
    if !(eps >= 0.0) {
        return Err(Error::Domain(format!("epsilon {eps} must be >= 0")));
    }
    let pts = line.points();
    let n = pts.len();
    if !line.is_closed() {
        let mut keep = vec![false; n];
        dp_open(pts, eps, &mut keep);
        let out = pts
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(p, _)| *p)
            .collect();
        return Polyline::open(out);
    }
    if n <= 3 {
        return Ok(line.clone());
    }
    let (a, b) = farthest_pair(pts, |_, _| true);
    let mut keep = vec![false; n];
    {
        let arc: Vec<Point2> = pts[a..=b].to_vec();
        let mut k = vec![false; arc.len()];
        dp_open(&arc, eps, &mut k);
        for (off, kk) in k.into_iter().enumerate() {
            keep[a + off] |= kk;
        }
    }
    {
        let idx: Vec<usize> = (b..n).chain(0..=a).collect();
        let arc: Vec<Point2> = idx.iter().map(|&i| pts[i]).collect();
        let mut k = vec![false; arc.len()];
        dp_open(&arc, eps, &mut k);
        for (off, kk) in k.into_iter().enumerate() {
            keep[idx[off]] |= kk;
        }
    }
    let out: Vec<Point2> = pts
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| *p)
        .collect();
    Polyline::closed(out)
}

/// Lexicographically smallest `(i, j)`, `i < j`, maximizing the squared
/// distance among pairs accepted by `allowed`.
fn farthest_pair(pts: &[Point2], allowed: impl Fn(usize, usize) -> bool) -> (usize, usize) {
    let n = pts.len();
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..n {
        for j in i + 1..n {
            if !allowed(i, j) {
                continue;
            }
            let d = pts[i].distance_sq(pts[j]);
            if best.is_none_or(|(bd, _, _)| d > bd) {
                best = Some((d, i, j));
            }
        }
    }
    let (_, i, j) = best.expect("at least one admissible pair");
    (i, j)
}

/// Split a closed polygon at its longest diagonal.
///
/// The diagonal is the non-adjacent vertex pair `(i, j)`, `i < j`, with
/// the greatest Euclidean length; ties go to the lexicographically
/// smallest pair. Returns the open chains `i..=j` and `j..=i` (wrapping),
/// which share their endpoints.
pub fn split_at_longest_diagonal(poly: &Polyline) -> Result<(Polyline, Polyline)> {
    if !poly.is_closed() {
        return Err(Error::Domain("split requires a closed polyline".into()));
    }
    let pts = poly.points();
    let n = pts.len();
    if n < 4 {
        return Err(Error::Degenerate(format!(
            "split needs at least 4 vertices, got {n}"
        )));
    }
    let (i, j) = farthest_pair(pts, |i, j| j - i >= 2 && !(i == 0 && j == n - 1));
    let first = pts[i..=j].to_vec();
    let second: Vec<Point2> = (j..n).chain(0..=i).map(|k| pts[k]).collect();
    Ok((Polyline::open(first)?, Polyline::open(second)?))
}

/// Options for [`fit_bezier_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Segment budget for the whole chain, `1..=8`.
    pub max_segments: usize,
    /// Stop splitting once every sample lies within this distance.
    pub tolerance: f64,
    /// Joint refinement rounds per segment fit.
    pub reparam_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_segments: 8,
            tolerance: 1.0,
            reparam_iterations: 100,
        }
    }
}

/// Hard cap on cubic segments per fitted side.
pub const MAX_SEGMENTS_PER_SIDE: usize = 8;

struct SegmentFit {
    start: usize,
    end: usize,
    curve: CubicBezier,
    max_err: f64,
    split_at: usize,
}

/// Least-squares fit of a cubic to `pts` with fixed endpoints.
fn fit_one(pts: &[Point2], iterations: usize) -> (CubicBezier, f64, usize) {
    let n = pts.len();
    let (p0, p3) = (pts[0], pts[n - 1]);
    if n == 2 {
        return (CubicBezier::line(p0, p3), 0.0, 0);
    }
    // Chord-length parameterization.
    let mut u = Vec::with_capacity(n);
    u.push(0.0);
    for i in 1..n {
        u.push(u[i - 1] + pts[i].distance(pts[i - 1]));
    }
    let total = u[n - 1];
    for v in u.iter_mut() {
        *v = if total > 0.0 { *v / total } else { 0.0 };
    }
    u[n - 1] = 1.0;

    let scale = pts
        .iter()
        .map(|p| (*p - p0).norm())
        .fold(0.0, f64::max)
        .max(1.0);
    let lambda = 1e-10 * scale * scale;
    let line = CubicBezier::line(p0, p3);

    let solve = |u: &[f64]| -> CubicBezier {
        let (mut a11, mut a12, mut a22) = (lambda, 0.0, lambda);
        let mut r1 = line.p1 * lambda;
        let mut r2 = line.p2 * lambda;
        for (i, &t) in u.iter().enumerate() {
            let b = cubic_basis(t);
            a11 += b[1] * b[1];
            a12 += b[1] * b[2];
            a22 += b[2] * b[2];
            let rest = pts[i] - p0 * b[0] - p3 * b[3];
            r1 += rest * b[1];
            r2 += rest * b[2];
        }
        let det = a11 * a22 - a12 * a12;
        if det.abs() <= f64::MIN_POSITIVE || !det.is_finite() {
            return line;
        }
        let p1 = (r1 * a22 - r2 * a12) * (1.0 / det);
        let p2 = (r2 * a11 - r1 * a12) * (1.0 / det);
        CubicBezier::new(p0, p1, p2, p3)
    };
    let errors = |c: &CubicBezier, u: &[f64]| -> (f64, usize) {
        let mut best = (0.0, 1usize);
        for i in 1..n - 1 {
            let e = c.point_at(u[i]).distance(pts[i]);
            if e > best.0 {
                best = (e, i);
            }
        }
        best
    };

    let mut curve = solve(&u);
    for _ in 0..4 {
        newton_reparam(&curve, pts, &mut u);
        curve = solve(&u);
    }
    curve = refine_joint(curve, pts, &mut u, line, lambda, iterations);
    let (err, split) = errors(&curve, &u);
    (curve, err, split)
}

fn newton_reparam(curve: &CubicBezier, pts: &[Point2], u: &mut [f64]) {
    for i in 1..pts.len() - 1 {
        let d = curve.point_at(u[i]) - pts[i];
        let d1 = curve.derivative_at(u[i]);
        let d2 = curve.second_derivative_at(u[i]);
        let den = d1.dot(d1) + d.dot(d2);
        if den.abs() > 1e-300 {
            u[i] = (u[i] - d.dot(d1) / den).clamp(0.0, 1.0);
        }
    }
}

/// Levenberg-Marquardt over the inner control points and all interior
/// sample parameters jointly. The parameters are eliminated per sample so
/// each step solves a 4×4 system.
fn refine_joint(
    mut curve: CubicBezier,
    pts: &[Point2],
    u: &mut [f64],
    line: CubicBezier,
    lambda: f64,
    iterations: usize,
) -> CubicBezier {
    let n = pts.len();
    let objective = |c: &CubicBezier, u: &[f64]| -> f64 {
        let mut acc = lambda * (c.p1.distance_sq(line.p1) + c.p2.distance_sq(line.p2));
        for i in 0..n {
            acc += c.point_at(u[i]).distance_sq(pts[i]);
        }
        acc
    };
    let mut cost = objective(&curve, u);
    let mut mu = 1e-3;
    let mut trial = u.to_vec();
    for _ in 0..iterations {
        let mut a = [[0.0f64; 4]; 4];
        let mut g = [0.0f64; 4];
        for k in 0..4 {
            a[k][k] = lambda;
        }
        let reg = [curve.p1 - line.p1, curve.p2 - line.p2];
        g[0] = lambda * reg[0].x;
        g[1] = lambda * reg[0].y;
        g[2] = lambda * reg[1].x;
        g[3] = lambda * reg[1].y;
        let mut per: Vec<([f64; 4], f64, f64)> = Vec::with_capacity(n);
        for i in 0..n {
            let b = cubic_basis(u[i]);
            let r = curve.point_at(u[i]) - pts[i];
            // Jacobian columns for (p1x, p1y, p2x, p2y): x rows then y rows.
            let jx = [b[1], 0.0, b[2], 0.0];
            let jy = [0.0, b[1], 0.0, b[2]];
            for p in 0..4 {
                g[p] += jx[p] * r.x + jy[p] * r.y;
                for q in 0..4 {
                    a[p][q] += jx[p] * jx[q] + jy[p] * jy[q];
                }
            }
            if i == 0 || i == n - 1 {
                per.push(([0.0; 4], 0.0, 0.0));
                continue;
            }
            let d = curve.derivative_at(u[i]);
            let e = [b[1] * d.x, b[1] * d.y, b[2] * d.x, b[2] * d.y];
            per.push((e, d.norm_sq(), d.dot(r)));
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut s = a;
            let mut rhs = g.map(|v| -v);
            for k in 0..4 {
                s[k][k] *= 1.0 + mu;
            }
            for (i, (e, dd, gt)) in per.iter().enumerate() {
                if i == 0 || i == n - 1 {
                    continue;
                }
                let di = dd * (1.0 + mu) + 1e-300;
                for p in 0..4 {
                    rhs[p] += e[p] * gt / di;
                    for q in 0..4 {
                        s[p][q] -= e[p] * e[q] / di;
                    }
                }
            }
            let Some(delta) = solve4(s, rhs) else {
                mu *= 10.0;
                continue;
            };
            for (i, (e, dd, gt)) in per.iter().enumerate() {
                trial[i] = if i == 0 || i == n - 1 {
                    u[i]
                } else {
                    let di = dd * (1.0 + mu) + 1e-300;
                    let dot: f64 = (0..4).map(|p| e[p] * delta[p]).sum();
                    (u[i] - (gt + dot) / di).clamp(0.0, 1.0)
                };
            }
            let cand = CubicBezier::new(
                curve.p0,
                curve.p1 + Point2::new(delta[0], delta[1]),
                curve.p2 + Point2::new(delta[2], delta[3]),
                curve.p3,
            );
            let c = objective(&cand, &trial);
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                curve = cand;
                u.copy_from_slice(&trial);
                cost = c;
                mu = (mu * 0.3).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    curve
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if !(a[piv][col].abs() > 1e-300) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Fit a C0 chain of at most `opts.max_segments` cubics to a polyline.
///
/// Each segment is a least-squares fit that starts from chord-length
/// parameters and refines control points and parameters together. The chain grows by splitting the
/// worst segment at its worst sample until every segment is within
/// `opts.tolerance` or the budget is spent. The chain interpolates the
/// polyline endpoints exactly; closed input is fitted as a loop from the
/// first vertex back to itself.
pub fn fit_bezier_chain(line: &Polyline, opts: &FitOptions) -> Result<Vec<CubicBezier>> {
    if opts.max_segments == 0 || opts.max_segments > MAX_SEGMENTS_PER_SIDE {
        return Err(Error::Domain(format!(
            "max_segments {} outside 1..={MAX_SEGMENTS_PER_SIDE}",
            opts.max_segments
        )));
    }
    let raw = line.unrolled();
    let mut pts: Vec<Point2> = Vec::with_capacity(raw.len());
    for p in raw {
        if pts.last() != Some(&p) {
            pts.push(p);
        }
    }
    if pts.len() < 2 {
        return Err(Error::Degenerate(
            "cannot fit a curve to coincident points".into(),
        ));
    }
    if line.is_closed() && pts.len() < 3 {
        return Err(Error::Degenerate(
            "closed polyline has fewer than 2 distinct points".into(),
        ));
    }

    let fit = |start: usize, end: usize| -> SegmentFit {
        let (curve, max_err, off) = fit_one(&pts[start..=end], opts.reparam_iterations);
        SegmentFit {
            start,
            end,
            curve,
            max_err,
            split_at: start + off,
        }
    };

    let mut segs = vec![fit(0, pts.len() - 1)];
    while segs.len() < opts.max_segments {
        let worst = segs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.end - s.start >= 2)
            .fold(None::<(usize, f64)>, |acc, (i, s)| match acc {
                Some((_, e)) if e >= s.max_err => acc,
                _ => Some((i, s.max_err)),
            });
        let Some((i, err)) = worst else { break };
        if err < opts.tolerance {
            break;
        }
        let s = &segs[i];
        let (a, m, b) = (s.start, s.split_at, s.end);
        let left = fit(a, m);
        let right = fit(m, b);
        segs.splice(i..=i, [left, right]);
    }
    Ok(segs.into_iter().map(|s| s.curve).collect())
}

/// Insert vertices so that no edge is longer than `spacing`; original
/// vertices are kept.
pub fn densify(points: &[Point2], spacing: f64) -> Vec<Point2> {
    let mut out = Vec::with_capacity(points.len());
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        out.push(a);
        let k = (a.distance(b) / spacing).ceil() as usize;
        for s in 1..k {
            out.push(a.lerp(b, s as f64 / k as f64));
        }
    }
    if let Some(&last) = points.last() {
        out.push(last);
    }
    out
}

impl CubicBezier {
    /// Apply an affine map `p ↦ M·p + t` (given as a closure) to all control points.
    pub fn transformed(&self, f: impl Fn(Point2) -> Point2) -> CubicBezier {
        self.map(f)
    }
}
