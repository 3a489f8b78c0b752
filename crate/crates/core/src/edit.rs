//! Element-level edits on vector documents.
//!
//! Every operation returns a new document. Transforms and recolors apply
//! to the whole subtree unless `shallow` is set.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::document::{RegionNode, VectorDocument};
use crate::error::{Error, Result};
use crate::geometry::{BezierPath, Point2};
use crate::raster::{BinaryMask, Rgb};
use crate::rasterizer::{region_coverages, RegionRenderParams};
use crate::svgio::{diff_documents_with, parse_color, DiffOptions, RegionChange};

/// A fill given either as a CSS color string or as linear `[r, g, b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColorValue {
    Rgb([f64; 3]),
    Text(String),
}

impl ColorValue {
    pub fn resolve(&self) -> Result<Rgb> {
        let c = match self {
            ColorValue::Rgb(c) => Rgb(*c),
            ColorValue::Text(s) => {
                parse_color(s).ok_or_else(|| Error::InvalidEdit(format!("unknown color '{s}'")))?
            }
        };
        if !c.0.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidEdit(format!(
                "color {:?} outside [0, 1]",
                c.0
            )));
        }
        Ok(c)
    }
}

impl From<Rgb> for ColorValue {
    fn from(c: Rgb) -> Self {
        ColorValue::Rgb(c.0)
    }
}

/// One edit. JSON form: `{"op": "translate", "target": "r1_0", "dx": 5, "dy": 0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditOp {
    Translate {
        target: String,
        dx: f64,
        dy: f64,
        #[serde(default)]
        shallow: bool,
    },
    /// Pivot defaults to the centre of the affected control points.
    Scale {
        target: String,
        sx: f64,
        sy: f64,
        #[serde(default)]
        pivot: Option<[f64; 2]>,
        #[serde(default)]
        shallow: bool,
    },
    /// Counter-clockwise on screen for positive angles (y points down, so
    /// this is the usual `(x cos - y sin, x sin + y cos)` map).
    Rotate {
        target: String,
        degrees: f64,
        #[serde(default)]
        pivot: Option<[f64; 2]>,
        #[serde(default)]
        shallow: bool,
    },
    Recolor {
        target: String,
        color: ColorValue,
        #[serde(default)]
        shallow: bool,
    },
    /// Attach `region` (with its subtree) under `parent`, or at the top
    /// level when `parent` is absent. `layer` must be the parent's layer
    /// plus one.
    Insert {
        #[serde(default)]
        parent: Option<String>,
        layer: usize,
        region: RegionNode,
        #[serde(default)]
        index: Option<usize>,
    },
    Remove {
        target: String,
    },
    /// Move a node to position `index` among its siblings.
    Reorder {
        target: String,
        index: usize,
    },
    /// Replace the node's outline control points.
    SetPoints {
        target: String,
        subpaths: Vec<Vec<[f64; 2]>>,
    },
}

impl EditOp {
    pub fn target(&self) -> Option<&str> {
        match self {
            EditOp::Translate { target, .. }
            | EditOp::Scale { target, .. }
            | EditOp::Rotate { target, .. }
            | EditOp::Recolor { target, .. }
            | EditOp::Remove { target }
            | EditOp::Reorder { target, .. }
            | EditOp::SetPoints { target, .. } => Some(target),
            EditOp::Insert { .. } => None,
        }
    }
}

/// Affine map `x' = a x + c y + e`, `y' = b x + d y + f` (SVG matrix order).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub const IDENTITY: Affine = Affine([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);

    pub fn translate(dx: f64, dy: f64) -> Self {
        Affine([1.0, 0.0, 0.0, 1.0, dx, dy])
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Affine([sx, 0.0, 0.0, sy, 0.0, 0.0])
    }

    pub fn rotate_degrees(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Affine([c, s, -s, c, 0.0, 0.0])
    }

    /// `self` after `other`.
    pub fn then(self, other: Affine) -> Affine {
        let [a, b, c, d, e, f] = other.0;
        let [a2, b2, c2, d2, e2, f2] = self.0;
        Affine([
            a * a2 + c * b2,
            b * a2 + d * b2,
            a * c2 + c * d2,
            b * c2 + d * d2,
            a * e2 + c * f2 + e,
            b * e2 + d * f2 + f,
        ])
    }

    /// Conjugate so `self` acts around `pivot`.
    pub fn about(self, pivot: Point2) -> Affine {
        Affine::translate(-pivot.x, -pivot.y)
            .then(self)
            .then(Affine::translate(pivot.x, pivot.y))
    }

    pub fn determinant(&self) -> f64 {
        self.0[0] * self.0[3] - self.0[1] * self.0[2]
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.determinant();
        self.0.iter().all(|v| v.is_finite()) && d.is_finite() && d.abs() > 1e-12
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let [a, b, c, d, e, f] = self.0;
        Point2::new(a * p.x + c * p.y + e, b * p.x + d * p.y + f)
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidEdit(msg.into())
}

fn check_region(n: &RegionNode) -> Result<()> {
    let mut err = None;
    n.visit(&mut |r| {
        for sp in &r.subpaths {
            if let Err(e) = BezierPath::from_control_points(sp.control_points().to_vec()) {
                err.get_or_insert(invalid(format!("region '{}': {e}", r.id)));
            }
        }
    });
    err.map_or(Ok(()), Err)
}

fn center_of(node: &RegionNode, shallow: bool) -> Point2 {
    let bb = if shallow {
        node.bbox()
    } else {
        node.subtree_bbox()
    };
    bb.map_or(Point2::default(), |(lo, hi)| (lo + hi) * 0.5)
}

fn transform_node(node: &mut RegionNode, m: &Affine, shallow: bool) {
    let f = |p: Point2| m.apply(p);
    if shallow {
        node.map_points(&f);
    } else {
        node.map_points_deep(&f);
    }
}

fn find_or_err<'a>(doc: &'a mut VectorDocument, id: &str) -> Result<&'a mut RegionNode> {
    doc.find_mut(id)
        .ok_or_else(|| Error::UnknownId(id.to_string()))
}

fn siblings_of<'a>(doc: &'a mut VectorDocument, id: &str) -> Option<&'a mut Vec<RegionNode>> {
    fn walk<'a>(nodes: &'a mut Vec<RegionNode>, id: &str) -> Option<&'a mut Vec<RegionNode>> {
        if nodes.iter().any(|n| n.id == id) {
            return Some(nodes);
        }
        nodes.iter_mut().find_map(|n| walk(&mut n.children, id))
    }
    walk(&mut doc.roots, id)
}

fn pivot_or(node: &RegionNode, pivot: Option<[f64; 2]>, shallow: bool) -> Result<Point2> {
    match pivot {
        Some([x, y]) if x.is_finite() && y.is_finite() => Ok(Point2::new(x, y)),
        Some(_) => Err(invalid("non-finite pivot")),
        None => Ok(center_of(node, shallow)),
    }
}

fn apply_in_place(doc: &mut VectorDocument, op: &EditOp) -> Result<()> {
    match op {
        EditOp::Translate {
            target,
            dx,
            dy,
            shallow,
        } => {
            if !dx.is_finite() || !dy.is_finite() {
                return Err(invalid("non-finite translation"));
            }
            let n = find_or_err(doc, target)?;
            let d = Point2::new(*dx, *dy);
            if *shallow {
                n.map_points(&|p| p + d);
            } else {
                n.map_points_deep(&|p| p + d);
            }
        }
        EditOp::Scale {
            target,
            sx,
            sy,
            pivot,
            shallow,
        } => {
            if !(sx.is_finite() && sy.is_finite()) || *sx == 0.0 || *sy == 0.0 {
                return Err(invalid(format!(
                    "scale factors ({sx}, {sy}) must be finite and non-zero"
                )));
            }
            let n = find_or_err(doc, target)?;
            let m = Affine::scale(*sx, *sy).about(pivot_or(n, *pivot, *shallow)?);
            transform_node(n, &m, *shallow);
        }
        EditOp::Rotate {
            target,
            degrees,
            pivot,
            shallow,
        } => {
            if !degrees.is_finite() {
                return Err(invalid("non-finite rotation"));
            }
            let n = find_or_err(doc, target)?;
            let m = Affine::rotate_degrees(*degrees).about(pivot_or(n, *pivot, *shallow)?);
            transform_node(n, &m, *shallow);
        }
        EditOp::Recolor {
            target,
            color,
            shallow,
        } => {
            let c = color.resolve()?;
            let n = find_or_err(doc, target)?;
            if *shallow {
                n.fill = c;
            } else {
                let mut stack = vec![n];
                while let Some(m) = stack.pop() {
                    m.fill = c;
                    stack.extend(m.children.iter_mut());
                }
            }
        }
        EditOp::Insert {
            parent,
            layer,
            region,
            index,
        } => {
            check_region(region)?;
            let existing: HashSet<String> = doc.ids().into_iter().collect();
            let mut clash = None;
            region.visit(&mut |r| {
                if existing.contains(&r.id) {
                    clash.get_or_insert(r.id.clone());
                }
            });
            if let Some(id) = clash {
                return Err(invalid(format!("inserted region id '{id}' already exists")));
            }
            if *layer == 0 {
                return Err(invalid("layer must be at least 1"));
            }
            let mut node = region.clone();
            node.set_layer_deep(*layer);
            let list = match parent {
                None => &mut doc.roots,
                Some(pid) => {
                    let p = find_or_err(doc, pid)?;
                    if *layer != p.layer + 1 {
                        return Err(invalid(format!(
                            "layer {layer} under '{pid}' at layer {}; expected {}",
                            p.layer,
                            p.layer + 1
                        )));
                    }
                    &mut p.children
                }
            };
            let at = index.unwrap_or(list.len());
            if at > list.len() {
                return Err(invalid(format!(
                    "insert index {at} beyond {} siblings",
                    list.len()
                )));
            }
            list.insert(at, node);
        }
        EditOp::Remove { target } => {
            doc.remove(target)
                .ok_or_else(|| Error::UnknownId(target.clone()))?;
        }
        EditOp::Reorder { target, index } => {
            let list = siblings_of(doc, target).ok_or_else(|| Error::UnknownId(target.clone()))?;
            if *index >= list.len() {
                return Err(invalid(format!(
                    "reorder index {index} beyond {} siblings",
                    list.len()
                )));
            }
            let from = list.iter().position(|n| &n.id == target).expect("present");
            let node = list.remove(from);
            list.insert(*index, node);
        }
        EditOp::SetPoints { target, subpaths } => {
            let paths = subpaths
                .iter()
                .map(|sp| {
                    BezierPath::from_control_points(
                        sp.iter().map(|&[x, y]| Point2::new(x, y)).collect(),
                    )
                    .map_err(|e| invalid(e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            if paths.is_empty() {
                return Err(invalid("set_points needs at least one subpath"));
            }
            find_or_err(doc, target)?.subpaths = paths;
        }
    }
    Ok(())
}

/// Apply one edit, returning a new document.
pub fn apply_edit(doc: &VectorDocument, op: &EditOp) -> Result<VectorDocument> {
    let mut out = doc.clone();
    apply_in_place(&mut out, op)?;
    out.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(out)
}

/// Apply edits in order. Fails as a whole, reporting the failing index.
pub fn apply_edit_script(doc: &VectorDocument, ops: &[EditOp]) -> Result<VectorDocument> {
    let mut out = doc.clone();
    for (index, op) in ops.iter().enumerate() {
        apply_in_place(&mut out, op)
            .and_then(|_| out.validate().map_err(|e| invalid(e.to_string())))
            .map_err(|e| Error::Script {
                index,
                source: Box::new(e),
            })?;
    }
    Ok(out)
}

/// Parse a JSON edit script (an array of op objects).
pub fn parse_edit_script(json: &str) -> Result<Vec<EditOp>> {
    serde_json::from_str(json).map_err(|e| Error::Parse {
        offset: line_col_offset(json, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn line_col_offset(text: &str, line: usize, col: usize) -> usize {
    let mut off = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (off + col.saturating_sub(1)).min(text.len());
        }
        off += l.len();
    }
    text.len()
}

fn unique_id(base: &str, taken: &mut HashSet<String>) -> String {
    if taken.insert(base.to_string()) {
        return base.to_string();
    }
    let mut k = 1;
    loop {
        let cand = format!("{base}_{k}");
        if taken.insert(cand.clone()) {
            return cand;
        }
        k += 1;
    }
}

fn rename_colliding(node: &mut RegionNode, taken: &mut HashSet<String>) {
    node.id = unique_id(&node.id, taken);
    for c in &mut node.children {
        rename_colliding(c, taken);
    }
}

/// Place `overlay`'s regions into `base` as top-level nodes at `layer`,
/// after mapping them through `placement`. Colliding ids get a `_k`
/// suffix. `layer` may be at most one past the base depth.
pub fn compose_documents(
    base: &VectorDocument,
    overlay: &VectorDocument,
    placement: &Affine,
    layer: usize,
) -> Result<VectorDocument> {
    if !placement.is_invertible() {
        return Err(invalid(format!(
            "placement {:?} is not invertible",
            placement.0
        )));
    }
    let max = base.depth() + 1;
    if layer == 0 || layer > max {
        return Err(invalid(format!("layer {layer} outside 1..={max}")));
    }
    let mut out = base.clone();
    let mut taken: HashSet<String> = base.ids().into_iter().collect();
    for r in &overlay.roots {
        let mut n = r.clone();
        n.map_points_deep(&|p| placement.apply(p));
        n.set_layer_deep(layer);
        rename_colliding(&mut n, &mut taken);
        out.roots.push(n);
    }
    out.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(out)
}

/// Stretch `doc` onto a `width × height` canvas.
pub fn resize_document(
    doc: &VectorDocument,
    width: usize,
    height: usize,
) -> Result<VectorDocument> {
    if width == 0 || height == 0 || doc.width == 0 || doc.height == 0 {
        return Err(Error::Domain(format!(
            "cannot resize {}x{} to {width}x{height}",
            doc.width, doc.height
        )));
    }
    let m = Affine::scale(
        width as f64 / doc.width as f64,
        height as f64 / doc.height as f64,
    );
    let mut out = doc.clone();
    out.width = width;
    out.height = height;
    out.for_each_mut(&mut |n| n.map_points(&|p| m.apply(p)));
    Ok(out)
}

/// Area-weighted centre of each region's rendered coverage, in preorder.
/// Regions with no coverage on the canvas use their control-point centre.
pub fn coverage_centroids(
    doc: &VectorDocument,
    params: &RegionRenderParams,
) -> Result<Vec<Point2>> {
    let size = (doc.width, doc.height);
    let covs = region_coverages(doc, params, size)?;
    Ok(doc
        .preorder()
        .iter()
        .zip(&covs)
        .map(|(n, c)| {
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for y in 0..size.1 {
                for x in 0..size.0 {
                    let w = c.get(x, y, 0);
                    sx += w * (x as f64 + 0.5);
                    sy += w * (y as f64 + 0.5);
                    sw += w;
                }
            }
            if sw > 0.0 {
                Point2::new(sx / sw, sy / sw)
            } else {
                center_of(n, true)
            }
        })
        .collect())
}

fn centroid_in(mask: &BinaryMask, p: Point2) -> bool {
    let (w, h) = mask.dims();
    let x = (p.x.floor().max(0.0) as usize).min(w - 1);
    let y = (p.y.floor().max(0.0) as usize).min(h - 1);
    mask.get(x, y)
}

/// Keep nodes passing `keep`; kept nodes whose parent is dropped are
/// promoted to the top level with their layer unchanged.
fn filter_forest(doc: &VectorDocument, keep: &HashMap<String, bool>) -> Vec<RegionNode> {
    fn walk(
        n: &RegionNode,
        keep: &HashMap<String, bool>,
        out: &mut Vec<RegionNode>,
    ) -> Option<RegionNode> {
        if keep[&n.id] {
            let mut m = n.clone();
            m.children.clear();
            for c in &n.children {
                if let Some(k) = walk(c, keep, out) {
                    m.children.push(k);
                }
            }
            Some(m)
        } else {
            for c in &n.children {
                if let Some(k) = walk(c, keep, out) {
                    out.push(k);
                }
            }
            None
        }
    }
    let mut out = Vec::new();
    for r in &doc.roots {
        let mut promoted = Vec::new();
        if let Some(k) = walk(r, keep, &mut promoted) {
            out.push(k);
        }
        out.extend(promoted);
    }
    out
}

/// Region-level mix of two documents: regions whose coverage centroid lies
/// in `mask` come from `target`, the rest from `source`.
pub fn masked_splice(
    source: &VectorDocument,
    target: &VectorDocument,
    mask: &BinaryMask,
    params: &RegionRenderParams,
) -> Result<VectorDocument> {
    let size = (source.width, source.height);
    if (target.width, target.height) != size || mask.dims() != size {
        return Err(Error::Shape(format!(
            "source {}x{}, target {}x{}, mask {}x{}",
            source.width,
            source.height,
            target.width,
            target.height,
            mask.dims().0,
            mask.dims().1
        )));
    }
    let pick = |doc: &VectorDocument, inside: bool| -> Result<HashMap<String, bool>> {
        let cs = coverage_centroids(doc, params)?;
        Ok(doc
            .preorder()
            .iter()
            .zip(cs)
            .map(|(n, c)| (n.id.clone(), centroid_in(mask, c) == inside))
            .collect())
    };
    let from_source = filter_forest(source, &pick(source, false)?);
    let mut from_target = filter_forest(target, &pick(target, true)?);
    let mut taken = HashSet::new();
    for n in &from_source {
        n.visit(&mut |r| {
            taken.insert(r.id.clone());
        });
    }
    for n in &mut from_target {
        rename_colliding(n, &mut taken);
    }
    let mut roots = from_source;
    roots.extend(from_target);
    Ok(VectorDocument::with_roots(size.0, size.1, roots))
}

/// An edit script turning `a` into `b` (geometry equal within the diff
/// tolerance). Regions whose parent or layer changed are removed and
/// re-inserted from `b`.
pub fn diff_to_script(a: &VectorDocument, b: &VectorDocument) -> Result<Vec<EditOp>> {
    diff_to_script_with(a, b, &DiffOptions::default())
}

pub fn diff_to_script_with(
    a: &VectorDocument,
    b: &VectorDocument,
    opts: &DiffOptions,
) -> Result<Vec<EditOp>> {
    let pb: HashMap<&str, (&RegionNode, Option<&str>)> = b
        .preorder_with_parents()
        .into_iter()
        .map(|(n, p)| (n.id.as_str(), (n, p)))
        .collect();

    // A node stays in place when it exists in both with the same parent
    // and layer, and its parent stays in place too.
    let mut stays: HashMap<&str, bool> = HashMap::new();
    for (n, p) in a.preorder_with_parents() {
        let ok = match pb.get(n.id.as_str()) {
            Some(&(nb, qb)) => qb == p && nb.layer == n.layer && p.is_none_or(|pid| stays[pid]),
            None => false,
        };
        stays.insert(n.id.as_str(), ok);
    }
    let stays_b = |id: &str| stays.get(id).copied().unwrap_or(false);

    let mut ops = Vec::new();
    for (n, p) in a.preorder_with_parents() {
        if !stays[n.id.as_str()] && p.is_none_or(|pid| stays[pid]) {
            ops.push(EditOp::Remove {
                target: n.id.clone(),
            });
        }
    }
    for (n, p) in b.preorder_with_parents() {
        if !stays_b(&n.id) && p.is_none_or(stays_b) {
            ops.push(EditOp::Insert {
                parent: p.map(str::to_string),
                layer: n.layer,
                region: n.clone(),
                index: None,
            });
        }
    }
    let diff = diff_documents_with(a, b, opts);
    for r in &diff.regions {
        if !stays_b(&r.id) {
            continue;
        }
        let nb = pb[r.id.as_str()].0;
        for c in &r.changes {
            match c {
                RegionChange::Moved { offset } => ops.push(EditOp::Translate {
                    target: r.id.clone(),
                    dx: offset.x,
                    dy: offset.y,
                    shallow: true,
                }),
                RegionChange::Reshaped => ops.push(EditOp::SetPoints {
                    target: r.id.clone(),
                    subpaths: nb
                        .subpaths
                        .iter()
                        .map(|sp| sp.control_points().iter().map(|p| [p.x, p.y]).collect())
                        .collect(),
                }),
                RegionChange::Recolored { to, .. } => ops.push(EditOp::Recolor {
                    target: r.id.clone(),
                    color: (*to).into(),
                    shallow: true,
                }),
                _ => {}
            }
        }
    }

    // Fix sibling order last, simulating the script so far.
    let mut cur = apply_edit_script(a, &ops)?;
    let reorder =
        |list_b: &[RegionNode], cur: &mut VectorDocument, ops: &mut Vec<EditOp>| -> Result<()> {
            for (i, n) in list_b.iter().enumerate() {
                let list = siblings_of(cur, &n.id).ok_or_else(|| Error::UnknownId(n.id.clone()))?;
                if list.get(i).map(|m| &m.id) != Some(&n.id) {
                    let op = EditOp::Reorder {
                        target: n.id.clone(),
                        index: i,
                    };
                    apply_in_place(cur, &op)?;
                    ops.push(op);
                }
            }
            Ok(())
        };
    reorder(&b.roots, &mut cur, &mut ops)?;
    for n in b.preorder() {
        reorder(&n.children, &mut cur, &mut ops)?;
    }
    Ok(ops)
}
