//! Procedural toy dataset: small vector scenes, their renders as
//! conditions and downsampled renders as target latents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgloop::document::{RegionNode, VectorDocument};
use vgloop::edit::resize_document;
use vgloop::geometry::Point2;
use vgloop::rasterizer::{ellipse_path, polygon_region, render, RegionRenderParams};
use vgloop::{RasterImage, Rgb};

use crate::error::{FlowError, Result};
use crate::latent::Latent;
use crate::model::{CondInput, ModelConfig};

/// Canvas side of generated scenes.
pub const TOY_CANVAS: usize = 64;
pub const TOY_ITEMS: usize = 64;
pub const TOY_HELD_OUT: usize = 16;
pub const TOY_SEED: u64 = 20_240_601;
pub const TOY_TAGS: [&str; 4] = [
    "ellipse",
    "rectangle",
    "ellipse and rectangle",
    "two ellipses",
];

#[derive(Debug, Clone)]
pub struct ToyItem {
    pub document: VectorDocument,
    pub tag: usize,
    /// Render at the latent resolution, RGB.
    pub cond: RasterImage,
    pub target: Latent,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.20, 0.20],
    [0.15, 0.45, 0.85],
    [0.95, 0.75, 0.10],
    [0.20, 0.65, 0.30],
    [0.45, 0.20, 0.60],
    [0.10, 0.10, 0.10],
];

fn ellipse(id: &str, rng: &mut ChaCha8Rng, fill: Rgb) -> RegionNode {
    let c = Point2::new(rng.random_range(16.0..48.0), rng.random_range(16.0..48.0));
    let (rx, ry) = (rng.random_range(7.0..16.0), rng.random_range(7.0..16.0));
    RegionNode::new(id, 1, vec![ellipse_path(c, rx, ry)], fill)
}

fn rectangle(id: &str, rng: &mut ChaCha8Rng, fill: Rgb) -> RegionNode {
    let (x0, y0) = (rng.random_range(4.0..32.0), rng.random_range(4.0..32.0));
    let (w, h) = (rng.random_range(14.0..30.0), rng.random_range(14.0..30.0));
    let v = [
        Point2::new(x0, y0),
        Point2::new(x0 + w, y0),
        Point2::new(x0 + w, y0 + h),
        Point2::new(x0, y0 + h),
    ];
    polygon_region(id, 1, &v, fill).expect("rectangle is valid")
}

fn color(rng: &mut ChaCha8Rng, avoid: Option<usize>) -> (usize, Rgb) {
    loop {
        let k = rng.random_range(0..PALETTE.len());
        if Some(k) != avoid {
            return (k, Rgb(PALETTE[k]));
        }
    }
}

/// Scene for `tag` drawn from `rng`.
pub fn toy_document(tag: usize, rng: &mut ChaCha8Rng) -> VectorDocument {
    let (k, c0) = color(rng, None);
    let (_, c1) = color(rng, Some(k));
    let roots = match tag % 4 {
        0 => vec![ellipse("s0", rng, c0)],
        1 => vec![rectangle("s0", rng, c0)],
        2 => vec![rectangle("s0", rng, c0), ellipse("s1", rng, c1)],
        _ => vec![ellipse("s0", rng, c0), ellipse("s1", rng, c1)],
    };
    VectorDocument::with_roots(TOY_CANVAS, TOY_CANVAS, roots)
}

/// Render `doc` at `size × size` through a 4× supersampled canvas,
/// stretching other canvas sizes to fit.
pub fn condition_image(doc: &VectorDocument, size: usize) -> Result<RasterImage> {
    let hi = size * 4;
    let scaled;
    let doc = if (doc.width, doc.height) == (hi, hi) {
        doc
    } else {
        scaled = resize_document(doc, hi, hi)?;
        &scaled
    };
    let hi = render(doc, &RegionRenderParams::default(), (hi, hi))?;
    Ok(hi.downsample(4)?)
}

/// Map an RGB condition to a latent in `[-1, 1]`: luminance for one
/// channel, red/blue for two, RGB for three.
pub fn target_latent(cond: &RasterImage, channels: usize) -> Result<Latent> {
    let (w, h) = cond.dims();
    let mut data = vec![0.0; channels * w * h];
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = cond.pixel_rgb(x, y).0;
            let vals: Vec<f64> = match channels {
                1 => vec![0.299 * r + 0.587 * g + 0.114 * b],
                2 => vec![r, b],
                3 => vec![r, g, b],
                c => {
                    return Err(FlowError::Config(format!(
                        "toy latents support 1 to 3 channels, not {c}"
                    )))
                }
            };
            for (c, v) in vals.into_iter().enumerate() {
                data[(c * h + y) * w + x] = 2.0 * v - 1.0;
            }
        }
    }
    Latent::from_vec(channels, h, w, data)
}

/// Inverse of [`target_latent`] for display.
pub fn latent_to_image(z: &Latent) -> RasterImage {
    let (c, h, w) = z.shape();
    let v = |ch: usize, x: usize, y: usize| ((z.get(ch, y, x) + 1.0) * 0.5).clamp(0.0, 1.0);
    let mut img = RasterImage::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let rgb = match c {
                1 => [v(0, x, y); 3],
                2 => [v(0, x, y), 0.5 * (v(0, x, y) + v(1, x, y)), v(1, x, y)],
                _ => [v(0, x, y), v(1, x, y), v(2, x, y)],
            };
            for (k, val) in rgb.into_iter().enumerate() {
                img.set(x, y, k, val);
            }
        }
    }
    img
}

/// The bundled toy set: `TOY_ITEMS` scenes cycling through the tags, the
/// last `TOY_HELD_OUT` reserved for evaluation.
pub fn toy_dataset(cfg: &ModelConfig) -> Result<Vec<ToyItem>> {
    toy_dataset_with(cfg, TOY_ITEMS, TOY_SEED)
}

pub fn toy_dataset_with(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<ToyItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let tag = i % TOY_TAGS.len();
            let document = toy_document(tag, &mut rng);
            let cond = condition_image(&document, cfg.size)?;
            let target = target_latent(&cond, cfg.channels)?;
            Ok(ToyItem {
                document,
                tag: tag % cfg.tags,
                cond,
                target,
            })
        })
        .collect()
}

/// Precomputed condition inputs for a slice of items.
pub fn cond_inputs(items: &[ToyItem], cfg: &ModelConfig) -> Result<Vec<CondInput>> {
    items
        .iter()
        .map(|it| CondInput::new(&it.cond, cfg))
        .collect()
}
