//! Two-stage training, Euler sampling and evaluation.
//!
//! Random streams derive from one root seed: stream 1 initialises the
//! velocity net, 2 the noise head, 3 shuffles batches, 4 draws per-item
//! times and noise, 5 samples decorrelation windows. Per-item generators
//! jump to a word position derived from a global item counter, so results
//! do not depend on thread scheduling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ToyItem;
use crate::error::{FlowError, Result};
use crate::latent::{graph, sample_windows, Latent, NpvLossConfig};
use crate::model::{npv_forward_input, CondInput, FlowModel, ModelConfig, NpvHead, Params};
use crate::tape::Tape;

pub const STREAM_MODEL: u64 = 1;
pub const STREAM_HEAD: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_NOISE: u64 = 4;
pub const STREAM_WINDOWS: u64 = 5;

/// Generator for item `index` of `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.set_word_pos(u128::from(index) << 24);
    r
}

/// Derive a 64-bit seed from a stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream, 0).random()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub npv: NpvLossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            stage1_epochs: 200,
            stage2_epochs: 100,
            batch_size: 16,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            npv: NpvLossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.npv.validate(self.model.size, self.model.size)?;
        if self.batch_size == 0 {
            return Err(FlowError::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FlowError::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: usize,
    pub epoch: usize,
    pub total: f64,
    pub fm: f64,
    pub kl: f64,
    pub cov: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Velocity net after stage 1.
    pub stage1: FlowModel,
    /// Velocity net after stage 2.
    pub model: FlowModel,
    pub head: NpvHead,
    pub trace: Vec<LossRecord>,
}

pub struct Adam {
    m: Params,
    v: Params,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(like: &Params, cfg: &TrainConfig) -> Self {
        Adam {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            lr: cfg.lr,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for (k, p) in params.entries.iter_mut() {
            let g = &grads.entries[k];
            let m = self.m.get_mut(k);
            let v = self.v.get_mut(k);
            for i in 0..p.data.len() {
                m.data[i] = self.b1 * m.data[i] + (1.0 - self.b1) * g.data[i];
                v.data[i] = self.b2 * v.data[i] + (1.0 - self.b2) * g.data[i] * g.data[i];
                p.data[i] -= self.lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss parts for one item.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ItemLoss {
    pub total: f64,
    pub fm: f64,
    pub kl: f64,
    pub cov: f64,
}

/// Loss and gradients for one training item. Without a head the initial
/// noise is standard normal; with one it is reparameterized from the
/// head's prediction and the KL and decorrelation terms are added.
#[allow(clippy::too_many_arguments)]
pub fn item_loss_and_grads(
    model: &FlowModel,
    head: Option<&NpvHead>,
    target: &Latent,
    cond: &CondInput,
    tag: usize,
    t: f64,
    eps: &Latent,
    windows: &[(usize, usize)],
    npv: &NpvLossConfig,
) -> (ItemLoss, Params, Option<Params>) {
    let mut tape = Tape::new();
    let bm = model.params.bind(&mut tape);
    let z0 = tape.leaf(target.to_tensor());
    let e = tape.leaf(eps.to_tensor());
    let (z1, head_parts) = match head {
        None => (e, None),
        Some(h) => {
            let bh = h.params.bind(&mut tape);
            let (mu, lv) = h.graph(&mut tape, &bh, cond);
            let z1 = graph::reparameterize(&mut tape, mu, lv, e);
            (z1, Some((bh, mu, lv)))
        }
    };
    let a = tape.scale(z1, 1.0 - t);
    let b = tape.scale(z0, t);
    let zt = tape.add(a, b);
    let v = model.velocity_graph(&mut tape, &bm, zt, t, cond, tag);
    let u = tape.sub(z0, z1);
    let fm = graph::mse(&mut tape, v, u);
    let mut parts = ItemLoss {
        fm: tape.scalar(fm),
        ..Default::default()
    };
    let mut total = fm;
    if let Some((_, mu, lv)) = &head_parts {
        let kl = graph::kl(&mut tape, *mu, *lv);
        parts.kl = tape.scalar(kl);
        let w = tape.scale(kl, npv.beta);
        total = tape.add(total, w);
        let s = model.config.size;
        if let Some(cov) = graph::cov(&mut tape, *mu, s, s, windows, npv.patch_size) {
            parts.cov = tape.scalar(cov);
            let w = tape.scale(cov, npv.lambda);
            total = tape.add(total, w);
        }
    }
    parts.total = tape.scalar(total);
    let g = tape.backward(total);
    let gm = bm.grads(&g, &model.params);
    let gh = head_parts.map(|(bh, _, _)| bh.grads(&g, &head.unwrap().params));
    (parts, gm, gh)
}

fn clip(grads: &mut [&mut Params], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .flat_map(|p| p.entries.values())
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum();
    let n = sq.sqrt();
    if n > max_norm {
        let s = max_norm / n;
        for p in grads.iter_mut() {
            for t in p.entries.values_mut() {
                for v in &mut t.data {
                    *v *= s;
                }
            }
        }
    }
}

struct Prepared<'a> {
    items: &'a [ToyItem],
    conds: Vec<CondInput>,
}

/// One epoch over `prep`, returning mean loss parts.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    stage: usize,
    epoch: usize,
    prep: &Prepared,
    model: &mut FlowModel,
    head: &mut Option<&mut NpvHead>,
    opt_m: &mut Adam,
    opt_h: &mut Option<Adam>,
    cfg: &TrainConfig,
    counter: &mut u64,
) -> Result<ItemLoss> {
    let n = prep.items.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = stream_rng(cfg.seed, STREAM_SHUFFLE, (stage * 1_000_000 + epoch) as u64);
    order.shuffle(&mut shuffle);
    let s = cfg.model.size;
    let c = cfg.model.channels;
    let mut sum = ItemLoss::default();
    for batch in order.chunks(cfg.batch_size) {
        let base = *counter;
        *counter += batch.len() as u64;
        let head_ref = head.as_deref();
        let results: Vec<(ItemLoss, Params, Option<Params>)> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let idx = base + k as u64;
                let mut rng = stream_rng(cfg.seed, STREAM_NOISE, idx);
                let t: f64 = rng.random();
                let eps = Latent::standard_normal(c, s, s, &mut rng);
                let windows = if head_ref.is_some() && c >= 2 {
                    sample_windows(
                        &cfg.npv,
                        s,
                        s,
                        &mut stream_rng(cfg.seed, STREAM_WINDOWS, idx),
                    )
                } else {
                    Vec::new()
                };
                let it = &prep.items[i];
                item_loss_and_grads(
                    model,
                    head_ref,
                    &it.target,
                    &prep.conds[i],
                    it.tag,
                    t,
                    &eps,
                    &windows,
                    &cfg.npv,
                )
            })
            .collect();
        let inv = 1.0 / batch.len() as f64;
        let mut gm = model.params.zeros_like();
        let mut gh = head.as_ref().map(|h| h.params.zeros_like());
        for (l, g, h) in &results {
            gm.add_scaled(g, inv);
            if let (Some(acc), Some(h)) = (gh.as_mut(), h) {
                acc.add_scaled(h, inv);
            }
            sum.total += l.total;
            sum.fm += l.fm;
            sum.kl += l.kl;
            sum.cov += l.cov;
        }
        if !sum.total.is_finite() || !gm.is_finite() || gh.as_ref().is_some_and(|g| !g.is_finite())
        {
            return Err(FlowError::Diverged { stage, epoch });
        }
        match gh.as_mut() {
            Some(g) => clip(&mut [&mut gm, g], cfg.clip),
            None => clip(&mut [&mut gm], cfg.clip),
        }
        opt_m.step(&mut model.params, &gm);
        if let (Some(h), Some(opt), Some(g)) = (head.as_mut(), opt_h.as_mut(), gh.as_ref()) {
            opt.step(&mut h.params, g);
        }
    }
    let k = 1.0 / n as f64;
    Ok(ItemLoss {
        total: sum.total * k,
        fm: sum.fm * k,
        kl: sum.kl * k,
        cov: sum.cov * k,
    })
}

/// Stage 1 trains the velocity net on standard-normal noise with the head
/// frozen at zero output; stage 2 trains both jointly on reparameterized
/// noise with the KL and decorrelation terms.
pub fn train_flow(items: &[ToyItem], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(FlowError::Config("empty training set".into()));
    }
    for it in items {
        if it.target.shape() != (cfg.model.channels, cfg.model.size, cfg.model.size) {
            return Err(FlowError::Shape(format!(
                "target {:?} does not match the model latent",
                it.target.shape()
            )));
        }
    }
    let prep = Prepared {
        items,
        conds: items
            .iter()
            .map(|it| CondInput::new(&it.cond, &cfg.model))
            .collect::<Result<_>>()?,
    };
    let mut model = FlowModel::new(cfg.model, derive_seed(cfg.seed, STREAM_MODEL))?;
    let mut head = NpvHead::new(cfg.model, derive_seed(cfg.seed, STREAM_HEAD))?;
    let mut opt_m = Adam::new(&model.params, cfg);
    let mut trace = Vec::new();
    let mut counter = 0u64;
    for epoch in 0..cfg.stage1_epochs {
        let l = run_epoch(
            1,
            epoch,
            &prep,
            &mut model,
            &mut None,
            &mut opt_m,
            &mut None,
            cfg,
            &mut counter,
        )?;
        trace.push(LossRecord {
            stage: 1,
            epoch,
            total: l.total,
            fm: l.fm,
            kl: l.kl,
            cov: l.cov,
        });
    }
    let stage1 = model.clone();
    let mut opt_h = Some(Adam::new(&head.params, cfg));
    for epoch in 0..cfg.stage2_epochs {
        let l = run_epoch(
            2,
            epoch,
            &prep,
            &mut model,
            &mut Some(&mut head),
            &mut opt_m,
            &mut opt_h,
            cfg,
            &mut counter,
        )?;
        trace.push(LossRecord {
            stage: 2,
            epoch,
            total: l.total,
            fm: l.fm,
            kl: l.kl,
            cov: l.cov,
        });
    }
    Ok(TrainOutput {
        stage1,
        model,
        head,
        trace,
    })
}

/// Explicit Euler from `t = 0` (noise) to `t = 1` (data).
pub fn euler_integrate(
    init: &Latent,
    steps: usize,
    mut velocity: impl FnMut(&Latent, f64) -> Result<Latent>,
) -> Result<Latent> {
    if steps == 0 {
        return Err(FlowError::Domain("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = init.clone();
    for k in 0..steps {
        let v = velocity(&z, k as f64 * dt)?;
        if v.shape() != z.shape() {
            return Err(FlowError::Shape(format!(
                "velocity {:?} for state {:?}",
                v.shape(),
                z.shape()
            )));
        }
        for (a, b) in z.data.iter_mut().zip(&v.data) {
            *a += dt * b;
        }
        if !z.is_finite() {
            return Err(FlowError::NonFinite { step: k });
        }
    }
    Ok(z)
}

/// Integrate the model's velocity field from `init`.
pub fn sample(
    model: &FlowModel,
    init: &Latent,
    cond: &CondInput,
    tag: usize,
    steps: usize,
) -> Result<Latent> {
    model.check_latent(init)?;
    euler_integrate(init, steps, |z, t| model.velocity(z, t, cond, tag))
}

/// Starting noise: standard normal, or drawn from the head's prediction.
pub fn initial_noise(
    head: Option<&NpvHead>,
    cfg: &ModelConfig,
    cond: &CondInput,
    rng: &mut ChaCha8Rng,
) -> Result<Latent> {
    let eps = Latent::standard_normal(cfg.channels, cfg.size, cfg.size, rng);
    match head {
        None => Ok(eps),
        Some(h) => {
            let (mu, lv) = npv_forward_input(h, cond)?;
            crate::latent::reparameterize(&mu, &lv, &eps)
        }
    }
}

/// Mean per-item MSE between samples and targets. Item `i` draws its
/// noise from stream `i` of `seed`.
pub fn sampling_mse(
    model: &FlowModel,
    head: Option<&NpvHead>,
    items: &[ToyItem],
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let errs: Vec<f64> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let cond = CondInput::new(&it.cond, &model.config)?;
            let mut rng = stream_rng(seed, STREAM_NOISE, i as u64);
            let init = initial_noise(head, &model.config, &cond, &mut rng)?;
            sample(model, &init, &cond, it.tag, steps)?.mse(&it.target)
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}
