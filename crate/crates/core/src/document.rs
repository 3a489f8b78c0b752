//! Layered vector documents.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_of, BezierPath, Point2};
use crate::raster::Rgb;

/// One filled region. The first subpath is the outline; further subpaths
/// are holes or extra components, combined with the even-odd rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionNode {
    pub id: String,
    /// 1-based layer; children sit one layer deeper.
    pub layer: usize,
    pub subpaths: Vec<BezierPath>,
    pub fill: Rgb,
    pub children: Vec<RegionNode>,
    pub source_mask_id: Option<String>,
}

impl RegionNode {
    pub fn new(id: impl Into<String>, layer: usize, subpaths: Vec<BezierPath>, fill: Rgb) -> Self {
        RegionNode {
            id: id.into(),
            layer,
            subpaths,
            fill,
            children: Vec::new(),
            source_mask_id: None,
        }
    }

    pub fn with_children(mut self, children: Vec<RegionNode>) -> Self {
        self.children = children;
        self
    }

    pub fn with_source_mask(mut self, id: impl Into<String>) -> Self {
        self.source_mask_id = Some(id.into());
        self
    }

    pub fn control_point_count(&self) -> usize {
        self.subpaths.iter().map(|p| p.control_points().len()).sum()
    }

    /// Flat parameter count: control-point coordinates plus three fill channels.
    pub fn param_count(&self) -> usize {
        2 * self.control_point_count() + 3
    }

    pub fn points(&self) -> impl Iterator<Item = &Point2> {
        self.subpaths.iter().flat_map(|p| p.control_points().iter())
    }

    pub fn map_points(&mut self, f: &impl Fn(Point2) -> Point2) {
        for sp in &mut self.subpaths {
            for p in sp.control_points_mut() {
                *p = f(*p);
            }
        }
    }

    /// Apply `f` to this node and every descendant.
    pub fn map_points_deep(&mut self, f: &impl Fn(Point2) -> Point2) {
        self.map_points(f);
        for c in &mut self.children {
            c.map_points_deep(f);
        }
    }

    pub fn subtree_size(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(RegionNode::subtree_size)
            .sum::<usize>()
    }

    /// Control-polygon bounding box of this node alone.
    pub fn bbox(&self) -> Option<(Point2, Point2)> {
        let pts: Vec<Point2> = self.points().copied().collect();
        bbox_of(&pts)
    }

    /// Control-polygon bounding box of the whole subtree.
    pub fn subtree_bbox(&self) -> Option<(Point2, Point2)> {
        let mut pts: Vec<Point2> = Vec::new();
        self.visit(&mut |n| pts.extend(n.points().copied()));
        bbox_of(&pts)
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a RegionNode)) {
        f(self);
        for c in &self.children {
            c.visit(f);
        }
    }

    fn shift_layers(&mut self, delta: isize) {
        self.layer = (self.layer as isize + delta) as usize;
        for c in &mut self.children {
            c.shift_layers(delta);
        }
    }

    /// Re-layer this subtree so the node sits at `layer`.
    pub fn set_layer_deep(&mut self, layer: usize) {
        let delta = layer as isize - self.layer as isize;
        self.shift_layers(delta);
    }
}

/// A canvas plus a forest of regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorDocument {
    pub width: usize,
    pub height: usize,
    pub roots: Vec<RegionNode>,
}

impl VectorDocument {
    pub fn new(width: usize, height: usize) -> Self {
        VectorDocument {
            width,
            height,
            roots: Vec::new(),
        }
    }

    pub fn with_roots(width: usize, height: usize, roots: Vec<RegionNode>) -> Self {
        VectorDocument {
            width,
            height,
            roots,
        }
    }

    /// Depth-first preorder; the canonical region order for gradients and
    /// flat parameter vectors.
    pub fn preorder(&self) -> Vec<&RegionNode> {
        let mut out = Vec::new();
        for r in &self.roots {
            r.visit(&mut |n| out.push(n));
        }
        out
    }

    /// Preorder entries as `(node, parent id)`.
    pub fn preorder_with_parents(&self) -> Vec<(&RegionNode, Option<&str>)> {
        fn walk<'a>(
            n: &'a RegionNode,
            parent: Option<&'a str>,
            out: &mut Vec<(&'a RegionNode, Option<&'a str>)>,
        ) {
            out.push((n, parent));
            for c in &n.children {
                walk(c, Some(&n.id), out);
            }
        }
        let mut out = Vec::new();
        for r in &self.roots {
            walk(r, None, &mut out);
        }
        out
    }

    /// Visit every node mutably in preorder.
    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut RegionNode)) {
        fn walk(n: &mut RegionNode, f: &mut impl FnMut(&mut RegionNode)) {
            f(n);
            for c in &mut n.children {
                walk(c, f);
            }
        }
        for r in &mut self.roots {
            walk(r, f);
        }
    }

    /// Indices into [`preorder`](Self::preorder) in painting order: by
    /// layer, then document order.
    pub fn paint_order(&self) -> Vec<usize> {
        let nodes = self.preorder();
        let mut idx: Vec<usize> = (0..nodes.len()).collect();
        idx.sort_by_key(|&i| nodes[i].layer);
        idx
    }

    pub fn node_count(&self) -> usize {
        self.roots.iter().map(RegionNode::subtree_size).sum()
    }

    pub fn depth(&self) -> usize {
        self.preorder().iter().map(|n| n.layer).max().unwrap_or(0)
    }

    pub fn find(&self, id: &str) -> Option<&RegionNode> {
        self.preorder().into_iter().find(|n| n.id == id)
    }

    pub fn find_mut(&mut self, id: &str) -> Option<&mut RegionNode> {
        fn walk<'a>(nodes: &'a mut [RegionNode], id: &str) -> Option<&'a mut RegionNode> {
            for n in nodes {
                if n.id == id {
                    return Some(n);
                }
                if let Some(f) = walk(&mut n.children, id) {
                    return Some(f);
                }
            }
            None
        }
        walk(&mut self.roots, id)
    }

    /// Remove the subtree rooted at `id`, returning it.
    pub fn remove(&mut self, id: &str) -> Option<RegionNode> {
        fn walk(nodes: &mut Vec<RegionNode>, id: &str) -> Option<RegionNode> {
            if let Some(i) = nodes.iter().position(|n| n.id == id) {
                return Some(nodes.remove(i));
            }
            nodes.iter_mut().find_map(|n| walk(&mut n.children, id))
        }
        walk(&mut self.roots, id)
    }

    pub fn parent_of(&self, id: &str) -> Option<&str> {
        self.preorder_with_parents()
            .into_iter()
            .find(|(n, _)| n.id == id)
            .and_then(|(_, p)| p)
    }

    pub fn ids(&self) -> Vec<String> {
        self.preorder().iter().map(|n| n.id.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.preorder().iter().map(|n| n.param_count()).sum()
    }

    /// Flat parameter vector: per region in preorder, every control point
    /// as `x, y`, then the fill channels.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for n in self.preorder() {
            for p in n.points() {
                out.push(p.x);
                out.push(p.y);
            }
            out.extend_from_slice(&n.fill.0);
        }
        out
    }

    /// Inverse of [`params`](Self::params).
    pub fn set_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                v.len()
            )));
        }
        let mut k = 0;
        self.for_each_mut(&mut |n| {
            for sp in &mut n.subpaths {
                for p in sp.control_points_mut() {
                    *p = Point2::new(v[k], v[k + 1]);
                    k += 2;
                }
            }
            n.fill = Rgb([v[k], v[k + 1], v[k + 2]]);
            k += 3;
        });
        Ok(())
    }

    /// Check structural invariants: unique non-empty ids, layers ≥ 1,
    /// children one layer deeper, at least one subpath per region, finite
    /// coordinates and fills in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (n, parent) in self.preorder_with_parents() {
            if n.id.is_empty() {
                return Err(Error::Invalid("region with empty id".into()));
            }
            if !seen.insert(n.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate region id '{}'", n.id)));
            }
            if n.layer == 0 {
                return Err(Error::Invalid(format!("region '{}' has layer 0", n.id)));
            }
            if let Some(pid) = parent {
                let p = self.find(pid).expect("parent exists");
                if n.layer != p.layer + 1 {
                    return Err(Error::Invalid(format!(
                        "region '{}' at layer {} under '{}' at layer {}",
                        n.id, n.layer, p.id, p.layer
                    )));
                }
            }
            if n.subpaths.is_empty() {
                return Err(Error::Invalid(format!("region '{}' has no path", n.id)));
            }
            if !n.points().all(Point2::is_finite) {
                return Err(Error::Invalid(format!(
                    "region '{}' has non-finite points",
                    n.id
                )));
            }
            if !n.fill.0.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::Invalid(format!(
                    "region '{}' fill outside [0, 1]",
                    n.id
                )));
            }
        }
        Ok(())
    }
}

/// Gradients for one region, shaped like its subpaths.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGradient {
    pub points: Vec<Vec<Point2>>,
    pub fill: [f64; 3],
}

/// Per-region gradients in document preorder.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub regions: Vec<RegionGradient>,
}

impl GradientSet {
    pub fn zeros_like(doc: &VectorDocument) -> Self {
        GradientSet {
            regions: doc
                .preorder()
                .iter()
                .map(|n| RegionGradient {
                    points: n
                        .subpaths
                        .iter()
                        .map(|sp| vec![Point2::default(); sp.control_points().len()])
                        .collect(),
                    fill: [0.0; 3],
                })
                .collect(),
        }
    }

    /// Flatten in the order of [`VectorDocument::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for r in &self.regions {
            for sp in &r.points {
                for p in sp {
                    out.push(p.x);
                    out.push(p.y);
                }
            }
            out.extend_from_slice(&r.fill);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat) for a document's shape.
    pub fn from_flat(doc: &VectorDocument, v: &[f64]) -> Result<Self> {
        let mut g = Self::zeros_like(doc);
        if v.len() != doc.param_count() {
            return Err(Error::Shape(format!(
                "expected {} gradient entries, got {}",
                doc.param_count(),
                v.len()
            )));
        }
        let mut k = 0;
        for r in &mut g.regions {
            for sp in &mut r.points {
                for p in sp.iter_mut() {
                    *p = Point2::new(v[k], v[k + 1]);
                    k += 2;
                }
            }
            r.fill = [v[k], v[k + 1], v[k + 2]];
            k += 3;
        }
        Ok(g)
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.regions.iter_mut().zip(&other.regions) {
            for (sa, sb) in a.points.iter_mut().zip(&b.points) {
                for (pa, pb) in sa.iter_mut().zip(sb) {
                    *pa += *pb;
                }
            }
            for c in 0..3 {
                a.fill[c] += b.fill[c];
            }
        }
    }
}
