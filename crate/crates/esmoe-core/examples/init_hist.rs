//! Diagnostic: per-class expert-selection histogram of a freshly
//! initialized model, before any training step. Healthy dynamics need
//! every expert to receive a nontrivial share of step-0 selections.
//!
//! Usage: init_hist [seed ...]   (defaults to seeds 1 2 3)

use esmoe_core::data::batch_from_indices;
use esmoe_core::{generate, Classifier, RoutingMode, TrainConfig};

fn main() {
    let seeds: Vec<u64> = {
        let args: Vec<u64> =
            std::env::args().skip(1).map(|a| a.parse().expect("seed must be u64")).collect();
        if args.is_empty() {
            vec![1, 2, 3]
        } else {
            args
        }
    };
    let tc = TrainConfig::default();
    for seed in seeds {
        let samples = generate(seed, 512, &tc.dataset).expect("dataset");
        let idx: Vec<usize> = (0..samples.len()).collect();
        let (batch, labels) = batch_from_indices(&samples, &idx).expect("batch");
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let model = Classifier::init(&tc.block, 4, &mut rng).expect("model init");
        let (_logits, routing) =
            model.forward_with_mode(&batch, RoutingMode::Training).expect("forward");
        let e = tc.block.experts;
        // tally[class][expert] = selection count
        let mut tally = vec![vec![0usize; e]; 4];
        let mut total = vec![0usize; e];
        for (s, &label) in labels.iter().enumerate() {
            for k in 0..tc.block.top_k {
                let ex = routing.selected[s * tc.block.top_k + k];
                tally[label][ex] += 1;
                total[ex] += 1;
            }
        }
        println!("seed {seed}:");
        for (class, row) in tally.iter().enumerate() {
            println!("  class {class}: {row:?}");
        }
        let n = labels.len() * tc.block.top_k;
        let shares: Vec<f64> =
            total.iter().map(|&c| (c as f64 / n as f64 * 1000.0).round() / 1000.0).collect();
        println!("  expert shares: {shares:?}");
    }
}
