//! Velocity network and noise-prediction head.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vgloop::RasterImage;

use crate::error::{FlowError, Result};
use crate::latent::Latent;
use crate::tape::{Gradients, Tape, Tensor, Var};

/// Clamp range for the predicted log-variance.
pub const LOGVAR_CLAMP: f64 = 10.0;
const TIME_FEATURES: usize = 9;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent channels.
    pub channels: usize,
    /// Latent side length.
    pub size: usize,
    /// Side of the square cell grouped into one token.
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Number of distinct text tags.
    pub tags: usize,
    pub npv_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 1,
            size: 16,
            patch: 4,
            d_model: 32,
            heads: 2,
            blocks: 1,
            mlp_hidden: 64,
            tags: 4,
            npv_hidden: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlowError::Config(m));
        if self.channels == 0 || self.size == 0 || self.patch == 0 || self.d_model == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.size.is_multiple_of(self.patch) {
            return bad(format!(
                "patch {} does not divide size {}",
                self.patch, self.size
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            ));
        }
        if self.tags == 0 || self.npv_hidden == 0 || self.mlp_hidden == 0 {
            return bad("tags, npv_hidden and mlp_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.size / self.patch).pow(2)
    }

    fn token_dim(&self, channels: usize) -> usize {
        channels * self.patch * self.patch
    }

    fn pixels(&self) -> usize {
        self.size * self.size
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    pub entries: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries.get_mut(name).expect("parameter exists")
    }

    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.count());
        let mut k = 0;
        for t in self.entries.values_mut() {
            let n = t.len();
            t.data.copy_from_slice(&v[k..k + n]);
            k += n;
        }
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows, t.cols)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Register every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Params, s: f64) {
        for (k, t) in self.entries.iter_mut() {
            for (a, b) in t.data.iter_mut().zip(&other.entries[k].data) {
                *a += s * b;
            }
        }
    }

    fn insert(&mut self, name: &str, t: Tensor) {
        self.entries.insert(name.to_string(), t);
    }
}

/// Tape handles for a [`Params`] set.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Gradients in the shape of `like`.
    pub fn grads(&self, g: &Gradients, like: &Params) -> Params {
        Params {
            entries: like
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), g.or_zeros(self.vars[k], t)))
                .collect(),
        }
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect(),
    )
}

/// Per-item condition inputs, precomputed once.
#[derive(Debug, Clone, PartialEq)]
pub struct CondInput {
    /// `tokens × (3·patch²)`.
    pub tokens: Tensor,
    /// `27 × pixels` 3×3 zero-padded neighbourhoods for the head's conv.
    pub columns: Tensor,
}

impl CondInput {
    /// `cond` must be RGB with sides an integer multiple of the latent size.
    pub fn new(cond: &RasterImage, cfg: &ModelConfig) -> Result<Self> {
        let (w, h) = cond.dims();
        if w != h || w % cfg.size != 0 || cond.channels() != 3 {
            return Err(FlowError::Shape(format!(
                "condition {}x{}x{} does not reduce to {}x{} RGB",
                w,
                h,
                cond.channels(),
                cfg.size,
                cfg.size
            )));
        }
        let img = if w == cfg.size {
            cond.clone()
        } else {
            cond.downsample(w / cfg.size)?
        };
        let s = cfg.size;
        let p = cfg.patch;
        let g = s / p;
        let mut tokens = Tensor::zeros(cfg.tokens(), 3 * p * p);
        for ty in 0..g {
            for tx in 0..g {
                let row = ty * g + tx;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let v = img.get(tx * p + dx, ty * p + dy, c);
                            tokens.data[row * 3 * p * p + (c * p + dy) * p + dx] = 2.0 * v - 1.0;
                        }
                    }
                }
            }
        }
        let mut columns = Tensor::zeros(27, s * s);
        for c in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let r = (c * 3 + ky) * 3 + kx;
                    for y in 0..s {
                        for x in 0..s {
                            let (sy, sx) =
                                (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if sy >= 0 && sx >= 0 && (sy as usize) < s && (sx as usize) < s {
                                columns.data[r * s * s + y * s + x] =
                                    2.0 * img.get(sx as usize, sy as usize, c) - 1.0;
                            }
                        }
                    }
                }
            }
        }
        Ok(CondInput { tokens, columns })
    }
}

/// Flat index maps between a `C × pixels` latent and `tokens × C·p²`.
fn patch_index(cfg: &ModelConfig) -> Vec<usize> {
    let (s, p, c) = (cfg.size, cfg.patch, cfg.channels);
    let g = s / p;
    let mut idx = Vec::with_capacity(c * s * s);
    for ty in 0..g {
        for tx in 0..g {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(ch * s * s + (ty * p + dy) * s + tx * p + dx);
                    }
                }
            }
        }
    }
    idx
}

fn unpatch_index(cfg: &ModelConfig) -> Vec<usize> {
    let fwd = patch_index(cfg);
    let mut inv = vec![0; fwd.len()];
    for (k, &j) in fwd.iter().enumerate() {
        inv[j] = k;
    }
    inv
}

fn time_features(t: f64) -> Tensor {
    let mut v = vec![t];
    for k in 1..=4 {
        let a = std::f64::consts::TAU * k as f64 * t;
        v.push(a.sin());
        v.push(a.cos());
    }
    Tensor::new(1, TIME_FEATURES, v)
}

/// Output of [`mma_attention`].
#[derive(Debug, Clone)]
pub struct MmaOutput {
    pub text: Tensor,
    pub latent: Tensor,
    pub cond: Tensor,
    /// Softmax weights per head, `n × n` over the joint sequence.
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Joint attention over `[text; latent; cond]` on the tape. Returns the
/// mixed sequence (before any output projection) and the per-head weights.
pub fn mma_graph(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
) -> (Var, Vec<Var>) {
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);
    let d = tape.value(q).cols;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let s = tape.matmul(qh, kt);
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax_rows(s);
        outs.push(tape.matmul(a, vh));
        probs.push(a);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    (out, probs)
}

/// Single softmax attention over the concatenation of three token sets,
/// split back into the three roles.
pub fn mma_attention(
    text: &Tensor,
    latent: &Tensor,
    cond: &Tensor,
    weights: &AttentionWeights,
    heads: usize,
) -> Result<MmaOutput> {
    let d = weights.wq.rows;
    for (name, t) in [("text", text), ("latent", latent), ("cond", cond)] {
        if t.cols != d {
            return Err(FlowError::Shape(format!(
                "{name} tokens have width {}, expected {d}",
                t.cols
            )));
        }
    }
    for w in [&weights.wq, &weights.wk, &weights.wv] {
        if w.rows != d || w.cols != weights.wq.cols {
            return Err(FlowError::Shape(
                "attention weights disagree in shape".into(),
            ));
        }
    }
    if heads == 0 || !weights.wq.cols.is_multiple_of(heads) {
        return Err(FlowError::Shape(format!(
            "{heads} heads for width {}",
            weights.wq.cols
        )));
    }
    let mut tape = Tape::new();
    let parts: Vec<Var> = [text, latent, cond]
        .iter()
        .filter(|t| t.rows > 0)
        .map(|t| tape.leaf((*t).clone()))
        .collect();
    if parts.is_empty() {
        return Err(FlowError::Shape("no tokens".into()));
    }
    let x = tape.concat_rows(&parts);
    let wq = tape.leaf(weights.wq.clone());
    let wk = tape.leaf(weights.wk.clone());
    let wv = tape.leaf(weights.wv.clone());
    let (out, probs) = mma_graph(&mut tape, x, wq, wk, wv, heads);
    let o = tape.value(out);
    let split = |start: usize, n: usize| {
        Tensor::new(
            n,
            o.cols,
            o.data[start * o.cols..(start + n) * o.cols].to_vec(),
        )
    };
    Ok(MmaOutput {
        text: split(0, text.rows),
        latent: split(text.rows, latent.rows),
        cond: split(text.rows + latent.rows, cond.rows),
        attention: probs.iter().map(|p| tape.value(*p).clone()).collect(),
    })
}

/// Token-transformer velocity field `v(z_t, t, cond, tag)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub config: ModelConfig,
    pub params: Params,
}

impl FlowModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let lat_dim = config.token_dim(config.channels);
        let cond_dim = config.token_dim(3);
        let n = config.tokens();
        let mut p = Params::default();
        p.insert(
            "lat_in",
            gaussian(lat_dim, d, 1.0 / (lat_dim as f64).sqrt(), &mut rng),
        );
        p.insert("lat_in_b", Tensor::zeros(1, d));
        p.insert(
            "cond_in",
            gaussian(cond_dim, d, 1.0 / (cond_dim as f64).sqrt(), &mut rng),
        );
        p.insert("cond_in_b", Tensor::zeros(1, d));
        p.insert("pos_lat", gaussian(n, d, 0.5, &mut rng));
        p.insert("pos_cond", gaussian(n, d, 0.5, &mut rng));
        p.insert("tag_emb", gaussian(config.tags, d, 0.5, &mut rng));
        p.insert(
            "time_w",
            gaussian(
                TIME_FEATURES,
                d,
                1.0 / (TIME_FEATURES as f64).sqrt(),
                &mut rng,
            ),
        );
        let sd = 1.0 / (d as f64).sqrt();
        for b in 0..config.blocks {
            p.insert(&format!("b{b}.wq"), gaussian(d, d, sd, &mut rng));
            p.insert(&format!("b{b}.wk"), gaussian(d, d, sd, &mut rng));
            p.insert(&format!("b{b}.wv"), gaussian(d, d, sd, &mut rng));
            p.insert(&format!("b{b}.wo"), gaussian(d, d, sd, &mut rng));
            p.insert(
                &format!("b{b}.mlp1"),
                gaussian(d, config.mlp_hidden, sd, &mut rng),
            );
            p.insert(&format!("b{b}.mlp1_b"), Tensor::zeros(1, config.mlp_hidden));
            p.insert(
                &format!("b{b}.mlp2"),
                gaussian(
                    config.mlp_hidden,
                    d,
                    1.0 / (config.mlp_hidden as f64).sqrt(),
                    &mut rng,
                ),
            );
            p.insert(&format!("b{b}.mlp2_b"), Tensor::zeros(1, d));
        }
        p.insert("head", gaussian(d, lat_dim, 0.1 * sd, &mut rng));
        p.insert("head_b", Tensor::zeros(1, lat_dim));
        Ok(FlowModel { config, params: p })
    }

    /// Build the velocity on `tape`. `z` is `channels × pixels`.
    pub fn velocity_graph(
        &self,
        tape: &mut Tape,
        b: &Bound,
        z: Var,
        t: f64,
        cond: &CondInput,
        tag: usize,
    ) -> Var {
        let cfg = &self.config;
        let n = cfg.tokens();
        let lat_dim = cfg.token_dim(cfg.channels);
        let zt = tape.gather(z, patch_index(cfg), n, lat_dim);
        let x = tape.matmul(zt, b.var("lat_in"));
        let x = tape.add_broadcast(x, b.var("lat_in_b"));
        let x = tape.add(x, b.var("pos_lat"));
        let tf = tape.leaf(time_features(t));
        let te = tape.matmul(tf, b.var("time_w"));
        let x_lat = tape.add_broadcast(x, te);

        let ct = tape.leaf(cond.tokens.clone());
        let c = tape.matmul(ct, b.var("cond_in"));
        let c = tape.add_broadcast(c, b.var("cond_in_b"));
        let x_cond = tape.add(c, b.var("pos_cond"));

        let x_text = tape.slice_rows(b.var("tag_emb"), tag.min(cfg.tags - 1), 1);
        let mut x = tape.concat_rows(&[x_text, x_lat, x_cond]);
        for blk in 0..cfg.blocks {
            let name = |s: &str| format!("b{blk}.{s}");
            let xn = tape.row_standardize(x, NORM_EPS);
            let (a, _) = mma_graph(
                tape,
                xn,
                b.var(&name("wq")),
                b.var(&name("wk")),
                b.var(&name("wv")),
                cfg.heads,
            );
            let a = tape.matmul(a, b.var(&name("wo")));
            x = tape.add(x, a);
            let xn = tape.row_standardize(x, NORM_EPS);
            let h = tape.matmul(xn, b.var(&name("mlp1")));
            let h = tape.add_broadcast(h, b.var(&name("mlp1_b")));
            let h = tape.gelu(h);
            let h = tape.matmul(h, b.var(&name("mlp2")));
            let h = tape.add_broadcast(h, b.var(&name("mlp2_b")));
            x = tape.add(x, h);
        }
        let lat = tape.slice_rows(x, 1, n);
        let o = tape.matmul(lat, b.var("head"));
        let o = tape.add_broadcast(o, b.var("head_b"));
        tape.gather(o, unpatch_index(cfg), cfg.channels, cfg.pixels())
    }

    pub fn check_latent(&self, z: &Latent) -> Result<()> {
        let c = &self.config;
        if z.shape() != (c.channels, c.size, c.size) {
            return Err(FlowError::Shape(format!(
                "latent {:?}, model expects {:?}",
                z.shape(),
                (c.channels, c.size, c.size)
            )));
        }
        Ok(())
    }

    /// Forward-only velocity.
    pub fn velocity(&self, z: &Latent, t: f64, cond: &CondInput, tag: usize) -> Result<Latent> {
        self.check_latent(z)?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let zv = tape.leaf(z.to_tensor());
        let v = self.velocity_graph(&mut tape, &b, zv, t, cond, tag);
        Latent::from_tensor(tape.value(v), z.height, z.width)
    }
}

/// Convolutional encoder with parallel mean and log-variance maps.
#[derive(Debug, Clone, PartialEq)]
pub struct NpvHead {
    pub config: ModelConfig,
    pub params: Params,
}

impl NpvHead {
    /// Random encoder, zero output maps: predicts the standard normal.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, c) = (config.npv_hidden, config.channels);
        let mut p = Params::default();
        p.insert("conv", gaussian(h, 27, 1.0 / 27f64.sqrt(), &mut rng));
        p.insert("conv_b", Tensor::zeros(h, 1));
        p.insert("w_mu", Tensor::zeros(c, h));
        p.insert("b_mu", Tensor::zeros(c, 1));
        p.insert("w_logvar", Tensor::zeros(c, h));
        p.insert("b_logvar", Tensor::zeros(c, 1));
        Ok(NpvHead { config, params: p })
    }

    /// `(μ, logσ²)`, each `channels × pixels`.
    pub fn graph(&self, tape: &mut Tape, b: &Bound, cond: &CondInput) -> (Var, Var) {
        let cols = tape.leaf(cond.columns.clone());
        let f = tape.matmul(b.var("conv"), cols);
        let f = tape.add_broadcast(f, b.var("conv_b"));
        let f = tape.row_standardize(f, NORM_EPS);
        let phi = tape.silu(f);
        let mu = tape.matmul(b.var("w_mu"), phi);
        let mu = tape.add_broadcast(mu, b.var("b_mu"));
        let lv = tape.matmul(b.var("w_logvar"), phi);
        let lv = tape.add_broadcast(lv, b.var("b_logvar"));
        let lv = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        (mu, lv)
    }
}

/// Predicted initial-noise mean and log-variance for a condition raster.
pub fn npv_forward(head: &NpvHead, cond: &RasterImage) -> Result<(Latent, Latent)> {
    let input = CondInput::new(cond, &head.config)?;
    npv_forward_input(head, &input)
}

pub fn npv_forward_input(head: &NpvHead, input: &CondInput) -> Result<(Latent, Latent)> {
    let mut tape = Tape::new();
    let b = head.params.bind(&mut tape);
    let (mu, lv) = head.graph(&mut tape, &b, input);
    let s = head.config.size;
    Ok((
        Latent::from_tensor(tape.value(mu), s, s)?,
        Latent::from_tensor(tape.value(lv), s, s)?,
    ))
}
