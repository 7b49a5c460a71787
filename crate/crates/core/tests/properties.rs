//! Property tests over the invariants that hold for arbitrary inputs.

use granusim::data::{make_batch, sample_example, FineLabel, PatchTag, SampleKind, Sign};
use granusim::dict::{build_dictionary, DictMode};
use granusim::hierarchy::{level_k_label, Taxonomy};
use granusim::model::{aggregate_fine_to_coarse, argmax, softmax, Response};
use granusim::params::HyperParams;
use proptest::prelude::*;

fn small_params() -> HyperParams {
    let mut p = HyperParams::desk();
    p.d = 32;
    p.p = 16;
    p.s_star = 4;
    p.k_plus = 4;
    p.k_minus = 4;
    p.batch_size = 16;
    p.m = 8;
    p.m_sub = 2;
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // softmax: probabilities sum to one and shifting every response by a
    // constant changes nothing beyond 1e-12
    #[test]
    fn softmax_shift_invariance(
        f in proptest::collection::vec(-50.0f64..50.0, 2..6),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&f);
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = f.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    // patch tags partition [P] and hard samples never carry a common tag
    #[test]
    fn tags_partition_and_hard_has_no_common(seed in 0u64..5000, c in 0usize..4, hard in any::<bool>()) {
        let params = small_params();
        let dict = build_dictionary(&params, DictMode::StandardBasis, 0).unwrap();
        let kind = if hard { SampleKind::Hard } else { SampleKind::Normal };
        let fine = FineLabel { sign: Sign::Minus, c };
        let s = sample_example(&dict, &params, fine, kind, seed).unwrap();
        prop_assert_eq!(s.patch_tags.len(), params.p);
        if hard {
            prop_assert!(s.patch_tags.iter().all(|t| *t != PatchTag::Common));
        }
    }

    // batches always carry the exact per-subclass composition
    #[test]
    fn batch_composition_is_exact(seed in 0u64..200, step in 0u64..50) {
        let params = small_params();
        let dict = build_dictionary(&params, DictMode::StandardBasis, 0).unwrap();
        let b = make_batch(&dict, &params, step, seed).unwrap();
        let per = params.batch_size / (2 * params.k_plus);
        for sign in [Sign::Plus, Sign::Minus] {
            for c in 0..params.k_plus {
                let n = b.samples.iter().filter(|s| s.fine_label == FineLabel { sign, c }).count();
                prop_assert_eq!(n, per);
            }
        }
    }

    // scaling all fine responses by a nonnegative factor cannot change the
    // aggregated coarse argmax (ties keep resolving to the lower index)
    #[test]
    fn aggregation_commutes_with_scaling(
        fine in proptest::collection::vec(0.0f64..10.0, 8),
        scale in 0.0f64..100.0,
    ) {
        let resp = Response { per_class: fine.clone(), per_neuron_activations: None };
        let base = aggregate_fine_to_coarse(&resp, 4, 4).unwrap();
        let scaled = Response {
            per_class: fine.iter().map(|v| v * scale).collect(),
            per_neuron_activations: None,
        };
        let after = aggregate_fine_to_coarse(&scaled, 4, 4).unwrap();
        if scale > 0.0 {
            prop_assert_eq!(argmax(&base.per_class), argmax(&after.per_class));
        }
    }

    // the number of distinct level-k labels never grows with k
    #[test]
    fn granularity_monotone_over_random_chains(parents in proptest::collection::vec(0usize..8, 8..20)) {
        // build a forest onto a single root: node i's parent is some earlier
        // node (or the root), which guarantees acyclicity
        let mut edges = Vec::new();
        for (i, p) in parents.iter().enumerate() {
            let child = format!("n{}", i + 1);
            let parent = if *p == 0 || *p > i { "root".to_string() } else { format!("n{p}") };
            edges.push((child, parent));
        }
        let tax = Taxonomy::from_edges(&edges).unwrap();
        let leaves: Vec<String> = (1..=parents.len()).map(|i| format!("n{i}")).collect();
        let mut prev = usize::MAX;
        for k in 0..6 {
            let mut distinct = std::collections::BTreeSet::new();
            for leaf in &leaves {
                distinct.insert(level_k_label(&tax, leaf, k).unwrap().to_string());
            }
            prop_assert!(distinct.len() <= prev);
            prev = distinct.len();
        }
    }
}
