//! Image + mask hierarchy → layered vector document, and the joint
//! optimisation of control points and fills.

use serde::{Deserialize, Serialize};

use crate::document::{GradientSet, RegionNode, VectorDocument};
use crate::error::{Error, Result};
use crate::geometry::{
    densify, douglas_peucker, fit_bezier_chain, signed_area, split_at_longest_diagonal,
    trace_mask_components, BezierPath, CubicBezier, FitOptions, Polyline,
};
use crate::maskio::{build_hierarchy, MaskHierarchy, MaskId, ParentRef, RawMaskStack};
use crate::raster::{BinaryMask, RasterImage, Rgb};
use crate::rasterizer::{
    evaluate, region_coverages, render, CoverageTarget, Objective, RegionRenderParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Douglas-Peucker tolerance in pixels.
    pub dp_epsilon: f64,
    /// Simplified polygons with more vertices than this are split.
    pub v_max: usize,
    pub fit: FitOptions,
    /// Components and holes smaller than this many pixels are dropped
    /// (a mask always keeps its largest component).
    pub min_component_pixels: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            dp_epsilon: 2.0,
            v_max: 24,
            fit: FitOptions::default(),
            min_component_pixels: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub steps: usize,
    pub gamma: f64,
    /// Control-point learning rate, pixels per step.
    pub lr_points: f64,
    /// Fill learning rate per step.
    pub lr_colors: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub soft_bandwidth: f64,
    pub supersample: usize,
    pub flatten_tolerance: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            steps: 30,
            gamma: 1.0,
            lr_points: 0.5,
            lr_colors: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            soft_bandwidth: 0.7,
            supersample: 2,
            flatten_tolerance: 0.25,
        }
    }
}

impl OptimizeConfig {
    pub fn render_params(&self) -> RegionRenderParams {
        RegionRenderParams {
            soft_bandwidth: self.soft_bandwidth,
            supersample: self.supersample,
            flatten_tolerance: self.flatten_tolerance,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Domain(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.lr_points >= 0.0 && self.lr_colors >= 0.0) {
            return Err(Error::Domain("learning rates must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Domain("Adam betas must lie in [0, 1)".into()));
        }
        self.render_params().validate()
    }
}

/// Closed pixel-boundary polygon → closed cubic ring.
fn polygon_to_path(poly: &Polyline, cfg: &InitConfig) -> Result<Option<BezierPath>> {
    let simple = douglas_peucker(poly, cfg.dp_epsilon)?;
    if simple.len() < 3 || signed_area(simple.points()) == 0.0 {
        return Ok(None);
    }
    let sides: Vec<Polyline> = if simple.len() > cfg.v_max {
        let (a, b) = split_at_longest_diagonal(&simple)?;
        vec![a, b]
    } else {
        vec![simple]
    };
    let mut segs: Vec<CubicBezier> = Vec::new();
    for side in &sides {
        let dense = Polyline::new(
            densify(&side.unrolled(), 1.0)
                .split_last()
                .map(|(last, rest)| {
                    let mut v = rest.to_vec();
                    if !side.is_closed() {
                        v.push(*last);
                    }
                    v
                })
                .unwrap_or_default(),
            side.is_closed(),
        )?;
        segs.extend(fit_bezier_chain(&dense, &cfg.fit)?);
    }
    // Snap shared endpoints exactly.
    let n = segs.len();
    for i in 0..n {
        let next = segs[(i + 1) % n].p0;
        segs[i].p3 = next;
    }
    Ok(Some(BezierPath::from_segments(&segs)?))
}

/// Outline, holes and extra components of one mask as even-odd subpaths.
pub fn mask_to_subpaths(mask: &BinaryMask, cfg: &InitConfig) -> Result<Vec<BezierPath>> {
    let mut comps = trace_mask_components(mask);
    if comps.is_empty() {
        return Ok(Vec::new());
    }
    let largest = comps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.pixel_count.cmp(&b.1.pixel_count).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("non-empty");
    let keep_largest = comps.remove(largest);
    let mut ordered = vec![keep_largest];
    ordered.extend(
        comps
            .into_iter()
            .filter(|c| c.pixel_count >= cfg.min_component_pixels),
    );
    let mut out = Vec::new();
    for c in &ordered {
        if let Some(p) = polygon_to_path(&c.outer, cfg)? {
            out.push(p);
        } else if out.is_empty() {
            // Thin sliver: keep the raw pixel outline.
            out.push(BezierPath::from_polygon(c.outer.points())?);
        }
        for hole in &c.holes {
            if signed_area(hole.points()).abs() < cfg.min_component_pixels as f64 {
                continue;
            }
            if let Some(p) = polygon_to_path(hole, cfg)? {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Mean colour of `image` over the foreground of `mask`.
pub fn masked_mean(image: &RasterImage, mask: &BinaryMask) -> Rgb {
    let rgb = image.to_rgb();
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += rgb.get(x, y, k);
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return Rgb::WHITE;
    }
    Rgb(acc.map(|v| v / n as f64)).clamped()
}

pub fn region_id(mask: MaskId) -> String {
    format!("r{}_{}", mask.layer, mask.index)
}

/// Build the initial document: one region per hierarchy mask, fills at
/// the masked image mean, nested to mirror the parent links.
pub fn init_document(
    image: &RasterImage,
    h: &MaskHierarchy,
    cfg: &InitConfig,
) -> Result<VectorDocument> {
    if h.mask_count() == 0 {
        return Err(Error::Invalid("mask hierarchy is empty".into()));
    }
    if image.dims() != (h.width, h.height) {
        return Err(Error::Shape(format!(
            "image is {}x{}, masks are {}x{}",
            image.width(),
            image.height(),
            h.width,
            h.height
        )));
    }
    let mut built: Vec<(MaskId, ParentRef, RegionNode)> = Vec::new();
    for m in h.iter() {
        let subpaths = mask_to_subpaths(&m.mask, cfg)?;
        if subpaths.is_empty() {
            continue;
        }
        let node = RegionNode::new(
            region_id(m.id),
            m.id.layer,
            subpaths,
            masked_mean(image, &m.mask),
        )
        .with_source_mask(m.id.to_string());
        built.push((m.id, m.parent, node));
    }
    // Attach deepest layers first so every subtree is complete when moved.
    let mut slots: Vec<Option<RegionNode>> = Vec::with_capacity(built.len());
    let mut meta = Vec::with_capacity(built.len());
    for (id, parent, node) in built {
        meta.push((id, parent));
        slots.push(Some(node));
    }
    let index_of = |id: MaskId| meta.iter().position(|(m, _)| *m == id);
    for i in (0..slots.len()).rev() {
        if let ParentRef::Mask(pid) = meta[i].1 {
            if let Some(pi) = index_of(pid) {
                let child = slots[i].take().expect("each node moves once");
                slots[pi]
                    .as_mut()
                    .expect("parents precede children")
                    .children
                    .insert(0, child);
            }
        }
    }
    let roots: Vec<RegionNode> = slots.into_iter().flatten().collect();
    Ok(VectorDocument::with_roots(h.width, h.height, roots))
}

/// Mean absolute difference over all pixels and channels.
pub fn recon_loss(render: &RasterImage, target: &RasterImage) -> Result<f64> {
    if !render.same_shape(target) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            render.width(),
            render.height(),
            render.channels(),
            target.width(),
            target.height(),
            target.channels()
        )));
    }
    let n = render.data().len();
    Ok(render
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n as f64)
}

/// Targets for the structure objective.
#[derive(Debug, Clone)]
pub struct StructureTargets<'a> {
    pub image: &'a RasterImage,
    /// Per region in document preorder.
    pub coverage: Vec<Option<CoverageTarget<'a>>>,
    /// Hierarchy layer of each coverage term, for reporting.
    pub layers: Vec<usize>,
}

impl<'a> StructureTargets<'a> {
    /// Link each region to its source mask. Every region must be linked.
    pub fn from_hierarchy(
        doc: &VectorDocument,
        h: &'a MaskHierarchy,
        image: &'a RasterImage,
    ) -> Result<Self> {
        if (h.width, h.height) != image.dims() {
            return Err(Error::Shape("mask and target sizes differ".into()));
        }
        let mut coverage = Vec::new();
        let mut layers = Vec::new();
        for n in doc.preorder() {
            let link = n.source_mask_id.as_deref().ok_or_else(|| {
                Error::Invalid(format!("region '{}' is not linked to a mask", n.id))
            })?;
            let id: MaskId = link.parse().map_err(|_| {
                Error::Invalid(format!(
                    "region '{}' has malformed mask link '{link}'",
                    n.id
                ))
            })?;
            let m = h.get(id).ok_or_else(|| {
                Error::Invalid(format!("region '{}' links to missing mask {id}", n.id))
            })?;
            coverage.push(Some(CoverageTarget::Mask(&m.mask)));
            layers.push(id.layer);
        }
        Ok(StructureTargets {
            image,
            coverage,
            layers,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureLoss {
    pub total: f64,
    /// Mask term summed per layer, index 0 = layer 1.
    pub mask_per_layer: Vec<f64>,
    /// Mask term per region in preorder.
    pub mask_per_region: Vec<f64>,
    /// Unweighted reconstruction term.
    pub recon: f64,
}

fn structure_eval(
    doc: &VectorDocument,
    t: &StructureTargets<'_>,
    gamma: f64,
    params: &RegionRenderParams,
) -> Result<(StructureLoss, GradientSet)> {
    let target = t.image.to_rgb();
    let size = target.dims();
    let obj = Objective {
        image_grad: None,
        l1_target: Some((&target, gamma)),
        coverage_targets: Some((&t.coverage, 1.0)),
    };
    let ev = evaluate(doc, params, size, &obj)?;
    let depth = t.layers.iter().copied().max().unwrap_or(0);
    let mut per_layer = vec![0.0; depth];
    for (v, &k) in ev.coverage.iter().zip(&t.layers) {
        if k > 0 {
            per_layer[k - 1] += v;
        }
    }
    Ok((
        StructureLoss {
            total: ev.total,
            mask_per_layer: per_layer,
            mask_per_region: ev.coverage,
            recon: ev.recon,
        },
        ev.gradient,
    ))
}

/// `Σ_regions mean|mask − coverage| + γ · recon_loss(render, target)`.
pub fn structure_loss(
    doc: &VectorDocument,
    h: &MaskHierarchy,
    target: &RasterImage,
    gamma: f64,
    params: &RegionRenderParams,
) -> Result<StructureLoss> {
    let t = StructureTargets::from_hierarchy(doc, h, target)?;
    Ok(structure_eval(doc, &t, gamma, params)?.0)
}

pub fn structure_loss_with(
    doc: &VectorDocument,
    targets: &StructureTargets<'_>,
    gamma: f64,
    params: &RegionRenderParams,
) -> Result<StructureLoss> {
    Ok(structure_eval(doc, targets, gamma, params)?.0)
}

/// Adam on control points and fills against [`structure_loss`].
/// Returns the optimised document and the total loss before every step
/// followed by the final loss (`steps + 1` entries).
pub fn optimize(
    doc: &VectorDocument,
    h: &MaskHierarchy,
    target: &RasterImage,
    cfg: &OptimizeConfig,
) -> Result<(VectorDocument, Vec<f64>)> {
    let t = StructureTargets::from_hierarchy(doc, h, target)?;
    optimize_with(doc, &t, cfg)
}

pub fn optimize_with(
    doc: &VectorDocument,
    targets: &StructureTargets<'_>,
    cfg: &OptimizeConfig,
) -> Result<(VectorDocument, Vec<f64>)> {
    cfg.validate()?;
    let params = cfg.render_params();
    let mut cur = doc.clone();
    let mut x = cur.params();
    let n = x.len();
    // Fill entries are the last three of each region block.
    let mut is_color = vec![false; n];
    {
        let mut k = 0;
        for node in cur.preorder() {
            k += 2 * node.control_point_count();
            is_color[k..k + 3].iter_mut().for_each(|c| *c = true);
            k += 3;
        }
    }
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (loss, grad) = structure_eval(&cur, targets, cfg.gamma, &params)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                message: "non-finite loss".into(),
            });
        }
        trace.push(loss.total);
        let g = grad.to_flat();
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                message: format!("non-finite gradient at parameter {i}"),
            });
        }
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let lr = if is_color[i] {
                cfg.lr_colors
            } else {
                cfg.lr_points
            };
            let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            x[i] -= upd;
            if is_color[i] {
                x[i] = x[i].clamp(0.0, 1.0);
            }
        }
        cur.set_params(&x)?;
    }
    let (final_loss, _) = structure_eval(&cur, targets, cfg.gamma, &params)?;
    if !final_loss.total.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            message: "non-finite loss".into(),
        });
    }
    trace.push(final_loss.total);
    Ok((cur, trace))
}

/// Intersection over union of coverage `≥ 0.5` with a mask.
pub fn coverage_iou(coverage: &RasterImage, mask: &BinaryMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let a = coverage.get(x, y, 0) >= 0.5;
            let b = mask.get(x, y);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of every linked region against its source mask, in preorder.
pub fn region_ious(
    doc: &VectorDocument,
    h: &MaskHierarchy,
    params: &RegionRenderParams,
) -> Result<Vec<f64>> {
    let covs = region_coverages(doc, params, (h.width, h.height))?;
    doc.preorder()
        .iter()
        .zip(&covs)
        .map(|(n, c)| {
            let id: MaskId = n
                .source_mask_id
                .as_deref()
                .ok_or_else(|| {
                    Error::Invalid(format!("region '{}' is not linked to a mask", n.id))
                })?
                .parse()?;
            let m = h.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
            Ok(coverage_iou(c, &m.mask))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VectorizeConfig {
    pub tau_occ: f64,
    pub tau_parent: f64,
    pub init: InitConfig,
    pub optimize: OptimizeConfig,
}

impl Default for VectorizeConfig {
    fn default() -> Self {
        VectorizeConfig {
            tau_occ: crate::maskio::DEFAULT_TAU_OCC,
            tau_parent: crate::maskio::DEFAULT_TAU_PARENT,
            init: InitConfig::default(),
            optimize: OptimizeConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VectorizeOutput {
    pub hierarchy: MaskHierarchy,
    pub initial: VectorDocument,
    pub document: VectorDocument,
    pub trace: Vec<f64>,
}

/// Full pipeline: hierarchy, initialisation, optimisation.
pub fn vectorize(
    image: &RasterImage,
    stack: &RawMaskStack,
    cfg: &VectorizeConfig,
) -> Result<VectorizeOutput> {
    let hierarchy = build_hierarchy(stack, cfg.tau_occ, cfg.tau_parent)?;
    let target = image.to_rgb();
    let initial = init_document(&target, &hierarchy, &cfg.init)?;
    let (document, trace) = optimize(&initial, &hierarchy, &target, &cfg.optimize)?;
    Ok(VectorizeOutput {
        hierarchy,
        initial,
        document,
        trace,
    })
}

/// Render helper matching the optimiser's settings at the canvas size.
pub fn render_for(doc: &VectorDocument, cfg: &OptimizeConfig) -> Result<RasterImage> {
    render(doc, &cfg.render_params(), (doc.width, doc.height))
}
