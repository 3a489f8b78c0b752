use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgloop_flow::data::toy_dataset_with;
use vgloop_flow::latent::{sample_windows, Latent, NpvLossConfig};
use vgloop_flow::model::{CondInput, FlowModel, ModelConfig, NpvHead, Params};
use vgloop_flow::train::item_loss_and_grads;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn small(channels: usize) -> ModelConfig {
    ModelConfig {
        channels,
        size: 8,
        patch: 4,
        d_model: 8,
        heads: 2,
        blocks: 2,
        mlp_hidden: 8,
        tags: 2,
        npv_hidden: 4,
    }
}

fn jitter(p: &mut Params, scale: f64, rng: &mut ChaCha8Rng) {
    let v: Vec<f64> = p
        .to_flat()
        .iter()
        .map(|x| x + scale * rng.random_range(-1.0..1.0))
        .collect();
    p.set_flat(&v);
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn check(channels: usize, seed: u64) {
    let cfg = small(channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlowModel::new(cfg, seed).unwrap();
    let mut head = NpvHead::new(cfg, seed + 1).unwrap();
    jitter(&mut model.params, 0.05, &mut rng);
    jitter(&mut head.params, 0.3, &mut rng);
    let item = &toy_dataset_with(&cfg, 3, seed).unwrap()[2];
    let cond = CondInput::new(&item.cond, &cfg).unwrap();
    let eps = Latent::standard_normal(channels, 8, 8, &mut rng);
    let npv = NpvLossConfig {
        patches: 6,
        ..Default::default()
    };
    let windows = sample_windows(&npv, 8, 8, &mut rng);
    let t = 0.37;
    let loss = |m: &FlowModel, h: &NpvHead| {
        item_loss_and_grads(
            m,
            Some(h),
            &item.target,
            &cond,
            item.tag,
            t,
            &eps,
            &windows,
            &npv,
        )
        .0
        .total
    };
    let (_, gm, gh) = item_loss_and_grads(
        &model,
        Some(&head),
        &item.target,
        &cond,
        item.tag,
        t,
        &eps,
        &windows,
        &npv,
    );
    let gh = gh.unwrap();

    let mut worst = 0.0f64;
    let base = model.params.to_flat();
    for (i, a) in gm.to_flat().into_iter().enumerate() {
        let mut m = model.clone();
        let mut v = base.clone();
        v[i] = base[i] + H;
        m.params.set_flat(&v);
        let fp = loss(&m, &head);
        v[i] = base[i] - H;
        m.params.set_flat(&v);
        let fm = loss(&m, &head);
        worst = worst.max(rel(a, (fp - fm) / (2.0 * H)));
    }
    let base = head.params.to_flat();
    for (i, a) in gh.to_flat().into_iter().enumerate() {
        let mut h = head.clone();
        let mut v = base.clone();
        v[i] = base[i] + H;
        h.params.set_flat(&v);
        let fp = loss(&model, &h);
        v[i] = base[i] - H;
        h.params.set_flat(&v);
        let fm = loss(&model, &h);
        worst = worst.max(rel(a, (fp - fm) / (2.0 * H)));
    }
    assert!(
        worst < TOL,
        "channels {channels} seed {seed}: worst relative error {worst:e}"
    );
}

#[test]
fn full_objective_single_channel() {
    for seed in 0..2 {
        check(1, seed);
    }
}

#[test]
fn full_objective_with_decorrelation() {
    for seed in 0..2 {
        check(2, 10 + seed);
    }
}
