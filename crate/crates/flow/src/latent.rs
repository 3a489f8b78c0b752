//! Latent grids and the flow / noise-prediction losses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::tape::{Tape, Tensor, Var};

/// `channels × height × width` grid, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Latent {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(FlowError::Shape(format!(
                "{} values for a {channels}x{height}x{width} latent",
                data.len()
            )));
        }
        Ok(Latent {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Latent {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// As a `channels × (height·width)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.channels, self.height * self.width, self.data.clone())
    }

    pub fn from_tensor(t: &Tensor, height: usize, width: usize) -> Result<Self> {
        Latent::from_vec(t.rows, height, width, t.data.clone()).map_err(|_| {
            FlowError::Shape(format!(
                "tensor {:?} is not a {height}x{width} grid",
                t.shape()
            ))
        })
    }

    pub fn standard_normal(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Latent {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn mse(&self, other: &Latent) -> Result<f64> {
        same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.len() as f64)
    }

    fn zip(&self, o: &Latent, f: impl Fn(f64, f64) -> f64) -> Result<Latent> {
        same_shape(self, o)?;
        Ok(Latent {
            data: self
                .data
                .iter()
                .zip(&o.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone()
        })
    }
}

fn same_shape(a: &Latent, b: &Latent) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FlowError::Shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `z_t = (1 − t)·z1 + t·z0`: noise `z1` at `t = 0`, data `z0` at `t = 1`.
pub fn interpolate(z0: &Latent, z1: &Latent, t: f64) -> Result<Latent> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::Domain(format!("t = {t} outside [0, 1]")));
    }
    z0.zip(z1, |a, b| (1.0 - t) * b + t * a)
}

/// Mean squared error between `v_pred` and the path velocity `z0 − z1`.
pub fn fm_loss(v_pred: &Latent, z0: &Latent, z1: &Latent) -> Result<f64> {
    same_shape(v_pred, z0)?;
    same_shape(z0, z1)?;
    let n = v_pred.len() as f64;
    Ok(v_pred
        .data
        .iter()
        .zip(z0.data.iter().zip(&z1.data))
        .map(|(v, (a, b))| {
            let r = v - (a - b);
            r * r
        })
        .sum::<f64>()
        / n)
}

/// `μ + exp(logσ²/2) ⊙ ε`.
pub fn reparameterize(mu: &Latent, logvar: &Latent, eps: &Latent) -> Result<Latent> {
    same_shape(mu, logvar)?;
    same_shape(mu, eps)?;
    Ok(Latent {
        data: mu
            .data
            .iter()
            .zip(logvar.data.iter().zip(&eps.data))
            .map(|(m, (lv, e))| m + (0.5 * lv).exp() * e)
            .collect(),
        ..mu.clone()
    })
}

/// Mean of `½(μ² + σ² − logσ² − 1)`: divergence from the standard normal.
pub fn kl_loss(mu: &Latent, logvar: &Latent) -> Result<f64> {
    same_shape(mu, logvar)?;
    Ok(mu
        .data
        .iter()
        .zip(&logvar.data)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum::<f64>()
        / mu.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NpvLossConfig {
    pub beta: f64,
    pub lambda: f64,
    /// Requested window count; capped at four per valid window position.
    pub patches: usize,
    pub patch_size: usize,
}

impl Default for NpvLossConfig {
    fn default() -> Self {
        NpvLossConfig {
            beta: 1.0,
            lambda: 1.0,
            patches: 8192,
            patch_size: 4,
        }
    }
}

impl NpvLossConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.patches == 0 {
            return Err(FlowError::Config("patch count must be at least 1".into()));
        }
        if self.patch_size < 2 || self.patch_size > height || self.patch_size > width {
            return Err(FlowError::Config(format!(
                "patch size {} must be in 2..={}",
                self.patch_size,
                height.min(width)
            )));
        }
        if !(self.beta.is_finite() && self.lambda.is_finite()) {
            return Err(FlowError::Config("non-finite loss weights".into()));
        }
        Ok(())
    }

    pub fn effective_patches(&self, height: usize, width: usize) -> usize {
        let positions = (height - self.patch_size + 1) * (width - self.patch_size + 1);
        self.patches.min(positions * 4)
    }
}

/// Top-left corners of the sampled windows (uniform, with replacement).
pub fn sample_windows(
    cfg: &NpvLossConfig,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let p = cfg.patch_size;
    (0..cfg.effective_patches(height, width))
        .map(|_| {
            (
                rng.random_range(0..=height - p),
                rng.random_range(0..=width - p),
            )
        })
        .collect()
}

/// Flat indices of a window in a `C × (h·w)` layout, channel-major rows.
fn window_indices(
    channels: usize,
    height: usize,
    width: usize,
    p: usize,
    (y0, x0): (usize, usize),
) -> Vec<usize> {
    let mut idx = Vec::with_capacity(channels * p * p);
    for c in 0..channels {
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                idx.push((c * height + y) * width + x);
            }
        }
    }
    idx
}

const COV_EPS: f64 = 1e-12;

/// Mean over windows of the mean squared off-diagonal channel correlation.
pub fn cov_loss(mu: &Latent, cfg: &NpvLossConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    if mu.channels < 2 {
        return Err(FlowError::Domain(format!(
            "channel decorrelation needs at least 2 channels, got {}",
            mu.channels
        )));
    }
    cfg.validate(mu.height, mu.width)?;
    let windows = sample_windows(cfg, mu.height, mu.width, rng);
    let (c, p) = (mu.channels, cfg.patch_size);
    let mut total = 0.0;
    for &w in &windows {
        let idx = window_indices(c, mu.height, mu.width, p, w);
        let rows: Vec<Vec<f64>> = idx
            .chunks(p * p)
            .map(|ch| {
                let v: Vec<f64> = ch.iter().map(|&i| mu.data[i]).collect();
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let centered: Vec<f64> = v.iter().map(|x| x - m).collect();
                let n = (centered.iter().map(|x| x * x).sum::<f64>() + COV_EPS).sqrt();
                centered.iter().map(|x| x / n).collect()
            })
            .collect();
        let mut s = 0.0;
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    let r: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    s += r * r;
                }
            }
        }
        total += s / (c * (c - 1)) as f64;
    }
    Ok(total / windows.len() as f64)
}

/// `fm + β·kl + λ·cov`.
pub fn total_loss(fm: f64, kl: f64, cov: f64, cfg: &NpvLossConfig) -> f64 {
    fm + cfg.beta * kl + cfg.lambda * cov
}

/// Tape versions of the losses, used during training.
pub mod graph {
    use super::*;

    pub fn mse(t: &mut Tape, a: Var, b: Var) -> Var {
        let d = t.sub(a, b);
        let s = t.square(d);
        t.mean(s)
    }

    pub fn reparameterize(t: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Var {
        let h = t.scale(logvar, 0.5);
        let sd = t.exp(h);
        let n = t.mul(sd, eps);
        t.add(mu, n)
    }

    pub fn kl(t: &mut Tape, mu: Var, logvar: Var) -> Var {
        let m2 = t.square(mu);
        let var = t.exp(logvar);
        let a = t.add(m2, var);
        let b = t.sub(a, logvar);
        let c = t.add_scalar(b, -1.0);
        let m = t.mean(c);
        t.scale(m, 0.5)
    }

    /// `mu` is `C × (h·w)`. Returns `None` for a single channel.
    pub fn cov(
        t: &mut Tape,
        mu: Var,
        height: usize,
        width: usize,
        windows: &[(usize, usize)],
        p: usize,
    ) -> Option<Var> {
        let c = t.value(mu).rows;
        if c < 2 || windows.is_empty() {
            return None;
        }
        let mut mask = Tensor::filled(c, c, 1.0);
        for i in 0..c {
            mask.data[i * c + i] = 0.0;
        }
        let mask = t.leaf(mask);
        let mut acc = None;
        for &w in windows {
            let x = t.gather(mu, window_indices(c, height, width, p, w), c, p * p);
            let xc = t.row_center(x);
            let xn = t.row_normalize(xc, COV_EPS);
            let xt = t.transpose(xn);
            let r = t.matmul(xn, xt);
            let r2 = t.square(r);
            let off = t.mul(r2, mask);
            let s = t.sum(off);
            acc = Some(match acc {
                None => s,
                Some(a) => t.add(a, s),
            });
        }
        let norm = 1.0 / ((c * (c - 1)) as f64 * windows.len() as f64);
        Some(t.scale(acc?, norm))
    }
}
