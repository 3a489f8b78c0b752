//! Mask-stack ingestion and the layered mask hierarchy.
//!
//! A mask stack on disk is a directory with a `manifest.json`:
//!
//! ```json
//! {"width": 64, "height": 64,
//!  "levels": [{"t": 1, "masks": ["level_1/m_0.png"]},
//!             {"t": 2, "masks": ["level_2/m_0.png", "level_2/m_1.png"]}]}
//! ```
//!
//! Each mask file is decoded to 8-bit gray and thresholded: a pixel is
//! foreground iff its value is `>= 128`.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BinaryMask;

pub const DEFAULT_TAU_OCC: f64 = 0.9;
pub const DEFAULT_TAU_PARENT: f64 = 0.5;
pub const DEFAULT_TAU_EXCL: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StackManifest {
    pub width: usize,
    pub height: usize,
    pub levels: Vec<ManifestLevel>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestLevel {
    pub t: i64,
    pub masks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawLevel {
    /// Simplification level; larger is finer.
    pub t: i64,
    pub masks: Vec<BinaryMask>,
    /// Source names, parallel to `masks`.
    pub names: Vec<String>,
}

/// Unprocessed masks grouped by simplification level.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMaskStack {
    pub width: usize,
    pub height: usize,
    /// Sorted by ascending `t`.
    pub levels: Vec<RawLevel>,
}

impl RawMaskStack {
    /// Validate dimensions, sort levels, and name masks `t{t}_{index}`.
    pub fn new(
        width: usize,
        height: usize,
        mut levels: Vec<(i64, Vec<BinaryMask>)>,
    ) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Invalid("mask stack has no levels".into()));
        }
        levels.sort_by_key(|(t, _)| *t);
        let mut out = Vec::with_capacity(levels.len());
        for (t, masks) in levels {
            if masks.is_empty() {
                return Err(Error::Invalid(format!("level t={t} has no masks")));
            }
            for (j, m) in masks.iter().enumerate() {
                if m.dims() != (width, height) {
                    return Err(Error::Shape(format!(
                        "mask {j} of level t={t} is {}x{}, expected {width}x{height}",
                        m.width(),
                        m.height()
                    )));
                }
            }
            let names = (0..masks.len()).map(|j| format!("t{t}_{j}")).collect();
            out.push(RawLevel { t, masks, names });
        }
        Ok(RawMaskStack {
            width,
            height,
            levels: out,
        })
    }

    pub fn mask_count(&self) -> usize {
        self.levels.iter().map(|l| l.masks.len()).sum()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.masks.len()).collect()
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Read a mask-stack directory.
pub fn load_mask_stack(dir: &Path) -> Result<RawMaskStack> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| format_err(&manifest_path, format!("cannot read manifest: {e}")))?;
    let manifest: StackManifest = serde_json::from_str(&text)
        .map_err(|e| format_err(&manifest_path, format!("invalid manifest: {e}")))?;
    if manifest.levels.is_empty() {
        return Err(format_err(&manifest_path, "manifest lists no levels"));
    }
    let mut levels = Vec::with_capacity(manifest.levels.len());
    for level in &manifest.levels {
        if level.masks.is_empty() {
            return Err(format_err(
                &manifest_path,
                format!("level t={} lists no masks", level.t),
            ));
        }
        let mut masks = Vec::with_capacity(level.masks.len());
        for name in &level.masks {
            let path = dir.join(name);
            let mask = BinaryMask::load(&path).map_err(|e| match e {
                Error::Format { .. } => format_err(&path, format!("cannot decode mask: {e}")),
                other => other,
            })?;
            if mask.dims() != (manifest.width, manifest.height) {
                return Err(format_err(
                    &path,
                    format!(
                        "dimension mismatch: mask is {}x{}, manifest says {}x{}",
                        mask.width(),
                        mask.height(),
                        manifest.width,
                        manifest.height
                    ),
                ));
            }
            masks.push(mask);
        }
        levels.push((level.t, masks, level.masks.clone()));
    }
    levels.sort_by_key(|(t, _, _)| *t);
    Ok(RawMaskStack {
        width: manifest.width,
        height: manifest.height,
        levels: levels
            .into_iter()
            .map(|(t, masks, names)| RawLevel { t, masks, names })
            .collect(),
    })
}

/// Write a stack in the directory format read by [`load_mask_stack`].
pub fn save_mask_stack(stack: &RawMaskStack, dir: &Path) -> Result<()> {
    let io = |p: &Path, e: std::io::Error| Error::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    let mut manifest = StackManifest {
        width: stack.width,
        height: stack.height,
        levels: Vec::new(),
    };
    for level in &stack.levels {
        let sub = format!("level_{}", level.t);
        std::fs::create_dir_all(dir.join(&sub)).map_err(|e| io(&dir.join(&sub), e))?;
        let mut names = Vec::new();
        for (j, m) in level.masks.iter().enumerate() {
            let name = format!("{sub}/m_{j}.png");
            m.save(&dir.join(&name))?;
            names.push(name);
        }
        manifest.levels.push(ManifestLevel {
            t: level.t,
            masks: names,
        });
    }
    let path = dir.join("manifest.json");
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serialize(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| io(&path, e))
}

/// Identifier of an accepted mask: hierarchy layer (1-based) and the
/// mask's index within its raw stack level. Orders by `(layer, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskId {
    pub layer: usize,
    pub index: usize,
}

impl fmt::Display for MaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}_{}", self.layer, self.index)
    }
}

impl FromStr for MaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("malformed mask id '{s}'"));
        let rest = s.strip_prefix('m').ok_or_else(bad)?;
        let (a, b) = rest.split_once('_').ok_or_else(bad)?;
        Ok(MaskId {
            layer: a.parse().map_err(|_| bad())?,
            index: b.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParentRef {
    /// Not yet linked; only valid before [`link_parents`].
    Unlinked,
    /// Attached to the synthetic root.
    Root,
    Mask(MaskId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyMask {
    pub id: MaskId,
    pub mask: BinaryMask,
    pub parent: ParentRef,
    pub pixel_count: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayer {
    /// 1-based layer index.
    pub level: usize,
    /// Simplification level this layer came from.
    pub t: i64,
    pub masks: Vec<HierarchyMask>,
}

/// Coarse-to-fine layers of binary masks with parent links.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskHierarchy {
    pub width: usize,
    pub height: usize,
    pub layers: Vec<MaskLayer>,
}

impl MaskHierarchy {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HierarchyMask> {
        self.layers.iter().flat_map(|l| l.masks.iter())
    }

    pub fn get(&self, id: MaskId) -> Option<&HierarchyMask> {
        self.layers
            .get(id.layer.checked_sub(1)?)?
            .masks
            .iter()
            .find(|m| m.id == id)
    }

    pub fn mask_count(&self) -> usize {
        self.layers.iter().map(|l| l.masks.len()).sum()
    }

    /// Union of every mask.
    pub fn coverage(&self) -> BinaryMask {
        let mut u = BinaryMask::new(self.width, self.height);
        for m in self.iter() {
            u.union_with(&m.mask);
        }
        u
    }

    /// Build from explicit layers; ids are assigned as `(layer, position)`
    /// and parents as in `parents` (`None` = root).
    pub fn from_layers(
        width: usize,
        height: usize,
        layers: Vec<Vec<(BinaryMask, Option<usize>)>>,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers.len());
        for (li, masks) in layers.into_iter().enumerate() {
            let level = li + 1;
            let mut ms = Vec::with_capacity(masks.len());
            for (j, (mask, parent)) in masks.into_iter().enumerate() {
                if mask.dims() != (width, height) {
                    return Err(Error::Shape(format!(
                        "mask {j} of layer {level} has wrong dimensions"
                    )));
                }
                let parent = match parent {
                    None => ParentRef::Root,
                    Some(p) => ParentRef::Mask(MaskId {
                        layer: level - 1,
                        index: p,
                    }),
                };
                ms.push(HierarchyMask {
                    id: MaskId {
                        layer: level,
                        index: j,
                    },
                    pixel_count: mask.count(),
                    mask,
                    parent,
                    source: format!("layer{level}/{j}"),
                });
            }
            out.push(MaskLayer {
                level,
                t: level as i64,
                masks: ms,
            });
        }
        Ok(MaskHierarchy {
            width,
            height,
            layers: out,
        })
    }
}

/// Greedy occlusion-based layer assignment.
///
/// Levels are visited coarse to fine and become layers `1..=K` one to one.
/// Within a level masks are visited by descending pixel count (stable on
/// ties). A mask is discarded when more than `tau_occ` of its area is
/// already covered by previously accepted masks; empty masks are always
/// discarded. Layer 1 masks get [`ParentRef::Root`], others are left
/// [`ParentRef::Unlinked`] for [`link_parents`].
pub fn assign_masks_to_layers(stack: &RawMaskStack, tau_occ: f64) -> Result<MaskHierarchy> {
    if !(tau_occ > 0.0 && tau_occ <= 1.0) {
        return Err(Error::Domain(format!("tau_occ {tau_occ} outside (0, 1]")));
    }
    if stack.levels.is_empty() || stack.mask_count() == 0 {
        return Err(Error::Invalid("mask stack is empty".into()));
    }
    let mut accepted = BinaryMask::new(stack.width, stack.height);
    let mut layers = Vec::with_capacity(stack.levels.len());
    for (li, level) in stack.levels.iter().enumerate() {
        let k = li + 1;
        let counts: Vec<usize> = level.masks.iter().map(BinaryMask::count).collect();
        let mut order: Vec<usize> = (0..level.masks.len()).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
        let mut masks = Vec::new();
        for j in order {
            let m = &level.masks[j];
            let area = counts[j];
            if area == 0 {
                continue;
            }
            let overlap = m.intersection_count(&accepted) as f64 / area as f64;
            if overlap > tau_occ {
                log::debug!("discarding mask {} (overlap {overlap:.3})", level.names[j]);
                continue;
            }
            accepted.union_with(m);
            masks.push(HierarchyMask {
                id: MaskId { layer: k, index: j },
                mask: m.clone(),
                parent: if k == 1 {
                    ParentRef::Root
                } else {
                    ParentRef::Unlinked
                },
                pixel_count: area,
                source: level.names[j].clone(),
            });
        }
        layers.push(MaskLayer {
            level: k,
            t: level.t,
            masks,
        });
    }
    Ok(MaskHierarchy {
        width: stack.width,
        height: stack.height,
        layers,
    })
}

/// Link every layer-`k > 1` mask to the layer-`k−1` mask covering the
/// largest fraction of its area, or to the root when that fraction is
/// below `tau_parent`. Ties go to the lowest [`MaskId`].
pub fn link_parents(h: &MaskHierarchy, tau_parent: f64) -> MaskHierarchy {
    let mut out = h.clone();
    for li in 1..out.layers.len() {
        let (coarse, fine) = out.layers.split_at_mut(li);
        let prev = &coarse[li - 1];
        for child in fine[0].masks.iter_mut() {
            child.parent = best_parent(child, prev, tau_parent);
        }
    }
    if let Some(first) = out.layers.first_mut() {
        for m in first.masks.iter_mut() {
            m.parent = ParentRef::Root;
        }
    }
    out
}

fn best_parent(child: &HierarchyMask, prev: &MaskLayer, tau_parent: f64) -> ParentRef {
    if child.pixel_count == 0 {
        return ParentRef::Root;
    }
    let mut best: Option<(f64, MaskId)> = None;
    for cand in &prev.masks {
        let frac = child.mask.intersection_count(&cand.mask) as f64 / child.pixel_count as f64;
        best = match best {
            None => Some((frac, cand.id)),
            Some((bf, bid)) => match frac.partial_cmp(&bf).unwrap_or(Ordering::Equal) {
                Ordering::Greater => Some((frac, cand.id)),
                Ordering::Equal if cand.id < bid => Some((frac, cand.id)),
                _ => Some((bf, bid)),
            },
        };
    }
    match best {
        Some((frac, id)) if frac >= tau_parent && frac > 0.0 => ParentRef::Mask(id),
        _ => ParentRef::Root,
    }
}

/// Thresholds checked by [`validate_hierarchy_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationConfig {
    pub tau_excl: f64,
    pub tau_parent: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            tau_excl: DEFAULT_TAU_EXCL,
            tau_parent: DEFAULT_TAU_PARENT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DimensionMismatch {
        id: MaskId,
    },
    LayerIndex {
        id: MaskId,
        expected: usize,
    },
    DuplicateId {
        id: MaskId,
    },
    ExclusivityOverlap {
        a: MaskId,
        b: MaskId,
        fraction: f64,
    },
    RootHasParent {
        id: MaskId,
    },
    Orphan {
        id: MaskId,
    },
    MissingParent {
        id: MaskId,
        parent: MaskId,
    },
    ParentWrongLayer {
        id: MaskId,
        parent: MaskId,
    },
    WeakParent {
        id: MaskId,
        parent: MaskId,
        fraction: f64,
    },
}

impl Violation {
    pub fn mask_id(&self) -> MaskId {
        use Violation::*;
        match *self {
            DimensionMismatch { id }
            | LayerIndex { id, .. }
            | DuplicateId { id }
            | RootHasParent { id }
            | Orphan { id }
            | MissingParent { id, .. }
            | ParentWrongLayer { id, .. }
            | WeakParent { id, .. } => id,
            ExclusivityOverlap { a, .. } => a,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            DimensionMismatch { id } => write!(f, "{id}: dimensions differ from hierarchy"),
            LayerIndex { id, expected } => write!(f, "{id}: stored in layer {expected}"),
            DuplicateId { id } => write!(f, "{id}: duplicate id"),
            ExclusivityOverlap { a, b, fraction } => {
                write!(
                    f,
                    "{a} and {b} overlap on {fraction:.4} of the smaller mask"
                )
            }
            RootHasParent { id } => write!(f, "{id}: layer-1 mask has a parent"),
            Orphan { id } => write!(f, "{id}: orphaned (no parent link)"),
            MissingParent { id, parent } => write!(f, "{id}: parent {parent} does not exist"),
            ParentWrongLayer { id, parent } => {
                write!(f, "{id}: parent {parent} is not in the preceding layer")
            }
            WeakParent {
                id,
                parent,
                fraction,
            } => {
                write!(f, "{id}: parent {parent} covers only {fraction:.4} of it")
            }
        }
    }
}

/// Check every hierarchy invariant with default thresholds.
pub fn validate_hierarchy(h: &MaskHierarchy) -> Vec<Violation> {
    validate_hierarchy_with(h, &ValidationConfig::default())
}

pub fn validate_hierarchy_with(h: &MaskHierarchy, cfg: &ValidationConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (li, layer) in h.layers.iter().enumerate() {
        let k = li + 1;
        for m in &layer.masks {
            if !seen.insert(m.id) {
                out.push(Violation::DuplicateId { id: m.id });
            }
            if m.mask.dims() != (h.width, h.height) {
                out.push(Violation::DimensionMismatch { id: m.id });
            }
            if m.id.layer != k || layer.level != k {
                out.push(Violation::LayerIndex {
                    id: m.id,
                    expected: k,
                });
            }
        }
    }
    for (li, layer) in h.layers.iter().enumerate() {
        let k = li + 1;
        let masks = &layer.masks;
        for a in 0..masks.len() {
            for b in a + 1..masks.len() {
                let (ma, mb) = (&masks[a], &masks[b]);
                if ma.mask.dims() != mb.mask.dims() {
                    continue;
                }
                let smaller = ma.mask.count().min(mb.mask.count());
                if smaller == 0 {
                    continue;
                }
                let frac = ma.mask.intersection_count(&mb.mask) as f64 / smaller as f64;
                if frac >= cfg.tau_excl {
                    out.push(Violation::ExclusivityOverlap {
                        a: ma.id,
                        b: mb.id,
                        fraction: frac,
                    });
                }
            }
        }
        for m in masks {
            match m.parent {
                ParentRef::Unlinked if k > 1 => out.push(Violation::Orphan { id: m.id }),
                ParentRef::Unlinked | ParentRef::Root => {}
                ParentRef::Mask(p) if k == 1 => {
                    let _ = p;
                    out.push(Violation::RootHasParent { id: m.id });
                }
                ParentRef::Mask(p) => {
                    if p.layer + 1 != k {
                        out.push(Violation::ParentWrongLayer {
                            id: m.id,
                            parent: p,
                        });
                        continue;
                    }
                    let Some(pm) = h.get(p) else {
                        out.push(Violation::MissingParent {
                            id: m.id,
                            parent: p,
                        });
                        continue;
                    };
                    let area = m.mask.count();
                    if area == 0 || pm.mask.dims() != m.mask.dims() {
                        continue;
                    }
                    let frac = m.mask.intersection_count(&pm.mask) as f64 / area as f64;
                    if frac < cfg.tau_parent {
                        out.push(Violation::WeakParent {
                            id: m.id,
                            parent: p,
                            fraction: frac,
                        });
                    }
                }
            }
        }
    }
    out
}

/// [`assign_masks_to_layers`] followed by [`link_parents`].
pub fn build_hierarchy(
    stack: &RawMaskStack,
    tau_occ: f64,
    tau_parent: f64,
) -> Result<MaskHierarchy> {
    Ok(link_parents(
        &assign_masks_to_layers(stack, tau_occ)?,
        tau_parent,
    ))
}
