//! Train the default mixture-of-experts classifier and its budget-matched
//! single-expert baseline across seeds, then print utilization, routing,
//! and accuracy summaries.

use std::time::Instant;

use esmoe_core::block::RoutingMode;
use esmoe_core::cost::{activated_param_count, matched_baseline};
use esmoe_core::data::batch_from_indices;
use esmoe_core::train::{train, TrainConfig};

fn main() {
    let base_cfg = TrainConfig::default();
    let classes = base_cfg.dataset.classes;
    let (baseline_block, rel) = matched_baseline(&base_cfg.block, classes);
    println!(
        "budget: moe {:.0} activated params, baseline {:.0} (c_out={}, rel diff {:.3})",
        activated_param_count(&base_cfg.block, classes),
        activated_param_count(&baseline_block, classes),
        baseline_block.c_out,
        rel
    );

    for seed in [1u64, 2, 3] {
        let cfg = TrainConfig { seed, ..base_cfg.clone() };
        let t0 = Instant::now();
        let (model, report) = train(&cfg).expect("training");
        let moe_secs = t0.elapsed().as_secs_f64();
        let last = report.final_epoch().expect("epochs");

        // Per-class modal expert on the validation split under hard routing.
        let val = esmoe_core::data::generate(seed, cfg.n_train + cfg.n_val, &cfg.dataset)
            .expect("dataset")[cfg.n_train..]
            .to_vec();
        let idx: Vec<usize> = (0..val.len()).collect();
        let (x, labels) = batch_from_indices(&val, &idx).expect("batch");
        let (_, routing) = model
            .forward_with_mode(&x, RoutingMode::Inference)
            .expect("forward");
        let mut tally = vec![vec![0usize; cfg.block.experts]; classes];
        for (s, &label) in labels.iter().enumerate() {
            tally[label][routing.primary_expert(s)] += 1;
        }
        let modal: Vec<usize> = tally
            .iter()
            .map(|row| row.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0)
            .collect();

        let bcfg = TrainConfig { seed, block: baseline_block.clone(), ..base_cfg.clone() };
        let t1 = Instant::now();
        let (_bmodel, breport) = train(&bcfg).expect("baseline training");
        let base_secs = t1.elapsed().as_secs_f64();
        let blast = breport.final_epoch().expect("epochs");

        let min_mu = last.mu.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "seed {}: moe {:.1}s val_acc {:.4} | baseline {:.1}s val_acc {:.4} | min_mu {:.4} mu {:?} modal {:?} H_train {:.3} H_infer {:.3}",
            seed, moe_secs, last.val_acc, base_secs, blast.val_acc, min_mu,
            last.mu.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            modal, last.entropy_train_bits, last.entropy_infer_bits
        );
    }

    // Informational: what happens without the load-balancing loss.
    let cfg = TrainConfig { lb_weight: 0.0, ..base_cfg };
    let (_, report) = train(&cfg).expect("training");
    let last = report.final_epoch().expect("epochs");
    let min_mu = last.mu.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "lb_weight 0 (seed {}): val_acc {:.4} min_mu {:.4} mu {:?}",
        cfg.seed,
        last.val_acc,
        min_mu,
        last.mu.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
}
