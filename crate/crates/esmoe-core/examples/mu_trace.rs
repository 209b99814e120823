//! Print the per-epoch utilization trajectory for (lr, n_train, batch,
//! seed) combinations given as comma-separated tuples, e.g.
//! `0.05,512,32,2` (seed defaults to 1 when omitted).

use esmoe_core::train::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let combos: Vec<(f64, usize, usize, u64)> = if args.len() > 1 {
        args[1..]
            .iter()
            .map(|a| {
                let parts: Vec<&str> = a.split(',').collect();
                (
                    parts[0].parse().expect("lr"),
                    parts[1].parse().expect("n_train"),
                    parts[2].parse().expect("batch"),
                    parts.get(3).map(|s| s.parse().expect("seed")).unwrap_or(1),
                )
            })
            .collect()
    } else {
        vec![(0.05, 512, 32, 1)]
    };
    for (lr, n_train, batch, seed) in combos {
        let cfg = TrainConfig {
            base_lr: lr,
            n_train,
            batch_size: batch,
            seed,
            ..TrainConfig::default()
        };
        let (_, report) = train(&cfg).expect("training");
        println!("base_lr {lr} n_train {n_train} batch {batch} seed {seed}");
        for m in &report.epochs {
            if m.epoch % 2 == 1 || m.epoch == 30 {
                let mu: Vec<f64> =
                    m.mu.iter().map(|v| (v * 1000.0).round() / 1000.0).collect();
                println!(
                    "  epoch {:2} task {:.4} lb {:.5} acc {:.3} mu {:?}",
                    m.epoch, m.task_loss, m.lb_loss, m.val_acc, mu
                );
            }
        }
    }
}
