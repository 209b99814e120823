//! Property-based invariants of routing, losses, costs, and data.

use esmoe_core::block::{route, EsMoeConfig, RoutingMode};
use esmoe_core::cost::expert_macs;
use esmoe_core::data::{generate, DatasetSpec};
use esmoe_core::loss::{entropy_bits, load_balance_loss, task_loss_softmax_ce, utilization};
use esmoe_core::tensor::TensorBase;
use proptest::prelude::*;

/// experts, top_k <= experts, samples, per-sample logit rows.
fn routing_inputs() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (2usize..=6)
        .prop_flat_map(|e| (Just(e), 1usize..=e, 1usize..=5))
        .prop_flat_map(|(e, k, n)| {
            (Just(e), Just(k), Just(n), prop::collection::vec(-8.0f64..8.0, n * e))
        })
}

fn min_row_gap(logits: &[f64], e: usize) -> f64 {
    logits
        .chunks(e)
        .map(|row| {
            let mut gap = f64::INFINITY;
            for i in 0..row.len() {
                for j in i + 1..row.len() {
                    gap = gap.min((row[i] - row[j]).abs());
                }
            }
            gap
        })
        .fold(f64::INFINITY, f64::min)
}

/// Indices of the k largest values, ties to the lowest index, ascending.
fn naive_topk(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

proptest! {
    #[test]
    fn training_weights_form_a_sparse_distribution((e, k, n, logits) in routing_inputs()) {
        let cfg = EsMoeConfig::new(e, k, 8, 8);
        let routing = route(&logits, n, &cfg).unwrap();
        for s in 0..n {
            let weights = routing.weights_row(s);
            let selected = routing.selected_row(s);
            prop_assert_eq!(selected.len(), k);
            prop_assert!(selected.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(selected.iter().all(|&i| i < e));
            let sum: f64 = weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "weight sum {}", sum);
            for (i, &w) in weights.iter().enumerate() {
                if selected.contains(&i) {
                    prop_assert!(w > 0.0);
                } else {
                    prop_assert_eq!(w, 0.0);
                }
            }
            let probs = routing.probs_row(s);
            let psum: f64 = probs.iter().sum();
            prop_assert!((psum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn inference_weights_are_a_hard_topk_distribution((e, k, n, logits) in routing_inputs()) {
        let cfg = EsMoeConfig::new(e, k, 8, 8).with_mode(RoutingMode::Inference);
        let routing = route(&logits, n, &cfg).unwrap();
        for s in 0..n {
            let weights = routing.weights_row(s);
            let selected = routing.selected_row(s);
            let sum: f64 = selected.iter().map(|&i| weights[i]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "hard weight sum {}", sum);
            for (i, &w) in weights.iter().enumerate() {
                prop_assert_eq!(selected.contains(&i), w > 0.0);
            }
            // A k-way distribution carries at most log2(k) bits.
            let h = entropy_bits(weights).unwrap();
            prop_assert!(h <= (k as f64).log2() + 1e-9, "entropy {} k {}", h, k);
        }
    }

    #[test]
    fn routing_modes_agree_on_gapped_logits((e, k, n, logits) in routing_inputs()) {
        prop_assume!(min_row_gap(&logits, e) > 1e-2);
        let soft = route(&logits, n, &EsMoeConfig::new(e, k, 8, 8)).unwrap();
        let hard = route(
            &logits,
            n,
            &EsMoeConfig::new(e, k, 8, 8).with_mode(RoutingMode::Inference),
        )
        .unwrap();
        for s in 0..n {
            prop_assert_eq!(soft.selected_row(s), hard.selected_row(s));
            for (a, b) in soft.weights_row(s).iter().zip(hard.weights_row(s)) {
                prop_assert!((a - b).abs() < 1e-6, "weights {} vs {}", a, b);
            }
        }
    }

    #[test]
    fn selected_set_is_the_topk_of_the_logits((e, k, n, logits) in routing_inputs()) {
        let cfg = EsMoeConfig::new(e, k, 8, 8);
        let routing = route(&logits, n, &cfg).unwrap();
        for s in 0..n {
            let row = &logits[s * e..(s + 1) * e];
            prop_assert_eq!(routing.selected_row(s), &naive_topk(row, k)[..]);
        }
    }

    #[test]
    fn tie_breaks_go_to_the_lowest_index(
        (e, k, picks) in (2usize..=6)
            .prop_flat_map(|e| (Just(e), 1usize..=e, prop::collection::vec(0u8..=2, e)))
    ) {
        // Coarse values force ties; the oracle uses the same rule.
        let logits: Vec<f64> = picks.iter().map(|&v| v as f64).collect();
        let cfg = EsMoeConfig::new(e, k, 8, 8);
        let routing = route(&logits, 1, &cfg).unwrap();
        prop_assert_eq!(routing.selected_row(0), &naive_topk(&logits, k)[..]);
    }

    #[test]
    fn load_balance_loss_is_nonnegative_and_permutation_invariant(
        raw in prop::collection::vec(0.01f64..1.0, 2..=8),
        rot in 0usize..8,
    ) {
        let total: f64 = raw.iter().sum();
        let mu: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let e = mu.len();
        let loss = load_balance_loss(&mu, e).unwrap();
        prop_assert!(loss >= 0.0);
        let mut rotated = mu.clone();
        rotated.rotate_left(rot % e);
        let rotated_loss = load_balance_loss(&rotated, e).unwrap();
        prop_assert!((loss - rotated_loss).abs() < 1e-12);
        // Uniform utilization is the unique zero.
        let uniform = vec![1.0 / e as f64; e];
        prop_assert_eq!(load_balance_loss(&uniform, e).unwrap(), 0.0);
        let spread: f64 = mu.iter().map(|m| (m - 1.0 / e as f64).abs()).sum();
        if spread > 1e-6 {
            prop_assert!(loss > 0.0);
        }
    }

    #[test]
    fn utilization_is_a_distribution_over_experts((e, k, n, logits) in routing_inputs()) {
        let cfg = EsMoeConfig::new(e, k, 8, 8);
        let routing = route(&logits, n, &cfg).unwrap();
        let stats = utilization(&routing).unwrap();
        prop_assert_eq!(stats.mu.len(), e);
        prop_assert!(stats.mu.iter().all(|m| *m >= 0.0));
        let sum: f64 = stats.mu.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "mu sum {}", sum);
        prop_assert!(stats.entropy_bits >= 0.0);
        prop_assert!(stats.entropy_bits <= (e as f64).log2() + 1e-9);
    }

    #[test]
    fn cross_entropy_is_nonnegative_with_zero_sum_gradient_rows(
        vals in prop::collection::vec(-6.0f64..6.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let logits = TensorBase::<f64>::new(3, 4, 1, 1, vals).unwrap();
        let (loss, grad) = task_loss_softmax_ce(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        for s in 0..3 {
            let row_sum: f64 = (0..4).map(|c| grad.at(s, c, 0, 0)).sum();
            prop_assert!(row_sum.abs() < 1e-12, "gradient row sum {}", row_sum);
        }
    }

    #[test]
    fn expert_macs_grow_with_kernel_and_area(
        c_in in 1usize..16,
        c_out in 1usize..16,
        k in 1usize..4,
        h in 1usize..12,
        w in 1usize..12,
    ) {
        let k1 = 2 * k + 1;
        let base = expert_macs(c_in, c_out, k1, h, w);
        prop_assert!(expert_macs(c_in, c_out, k1 + 2, h, w) > base);
        prop_assert_eq!(expert_macs(c_in, c_out, k1, 2 * h, w), 2 * base);
        prop_assert_eq!(expert_macs(c_in, c_out, k1, h, 2 * w), 2 * base);
    }

    #[test]
    fn dataset_is_deterministic_with_cycling_labels_and_bounded_pixels(seed in 0u64..500) {
        let spec = DatasetSpec { height: 9, width: 9, ..DatasetSpec::default() };
        let a = generate(seed, 6, &spec).unwrap();
        let b = generate(seed, 6, &spec).unwrap();
        for (i, (sa, sb)) in a.iter().zip(&b).enumerate() {
            prop_assert_eq!(sa.label, i % spec.classes);
            prop_assert_eq!(sa.label, sb.label);
            prop_assert_eq!(sa.image.data(), sb.image.data());
            prop_assert!(sa.image.data().iter().all(|p| (-1.0..=1.0).contains(&(*p as f64))));
        }
    }
}
