use std::time::Instant;

use vgloop_flow::data::{toy_dataset, TOY_HELD_OUT};
use vgloop_flow::train::{sampling_mse, train_flow, TrainConfig};

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().unwrap())
        .collect();
    let seeds = if seeds.is_empty() {
        vec![0, 1, 2]
    } else {
        seeds
    };
    for seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        let items = toy_dataset(&cfg.model).unwrap();
        let (train, held) = items.split_at(items.len() - TOY_HELD_OUT);
        let t = Instant::now();
        let out = train_flow(train, &cfg).unwrap();
        let tt = t.elapsed().as_secs_f64();
        let s1 = &out.trace[0];
        let e1 = out.trace.iter().rfind(|r| r.stage == 1).unwrap();
        let e2 = out.trace.last().unwrap();
        let a = sampling_mse(&out.stage1, None, held, 32, 7).unwrap();
        let b = sampling_mse(&out.model, Some(&out.head), held, 32, 7).unwrap();
        println!(
            "seed {seed}: train {tt:.1}s fm {:.4}->{:.4} stage2 fm {:.4} kl {:.4} | mse w/o {a:.4} w {b:.4}",
            s1.fm, e1.fm, e2.fm, e2.kl
        );
    }
}
