mod common;

use common::*;
use proptest::prelude::*;
use tce_core::datasets::Origin;
use tce_core::rng;
use tce_core::selection::{self, select_from_distances, selection_size};

fn pair(seed: u64, n_src: usize, n_tgt: usize) -> (tce_core::datasets::TransitionDataset, tce_core::datasets::TransitionDataset) {
    let mut r = rng::stream(seed, 0);
    (
        random_dataset(n_src, 3, Origin::Source, &mut r),
        random_dataset(n_tgt, 3, Origin::Target, &mut r),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn nesting(seed in 0u64..10_000, n in 1usize..120, l1 in 0.0f64..=1.0, l2 in 0.0f64..=1.0) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let (src, tgt) = pair(seed, n, 7);
        let d = selection::distances(&src, &tgt, true).unwrap();
        let a = select_from_distances(d.clone(), lo).unwrap();
        let b = select_from_distances(d, hi).unwrap();
        prop_assert!(a.indices.iter().all(|i| b.indices.binary_search(i).is_ok()));
        prop_assert!(a.threshold <= b.threshold);
    }

    #[test]
    fn size_law(seed in 0u64..10_000, n in 1usize..150, lambda in 0.0f64..=1.0) {
        let (src, tgt) = pair(seed, n, 5);
        let sel = selection::select(&src, &tgt, lambda, false).unwrap();
        // smallest k with k ≥ λn, allowing for rounding in the product
        let expect = (0..=n).find(|&k| k as f64 >= lambda * n as f64 - 1e-9).unwrap();
        prop_assert_eq!(sel.indices.len(), expect);
        prop_assert_eq!(selection_size(lambda, n), expect);
        prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn brute_force_equivalence(seed in 0u64..10_000, n in 1usize..=200, m in 1usize..20, lambda in 0.0f64..=1.0) {
        let (src, tgt) = pair(seed, n, m);
        let t: Vec<(Vec<f64>, Vec<f64>)> = tgt.rows().iter().map(|r| (r.s.clone(), r.s_next.clone())).collect();
        let brute: Vec<f64> = src.rows().iter().map(|r| brute_nn(&r.s, &r.s_next, &t)).collect();
        let sel = selection::select(&src, &tgt, lambda, false).unwrap();
        prop_assert_eq!(&sel.distances, &brute);
        prop_assert_eq!(sel.indices, brute_select(&brute, lambda));
    }
}

#[test]
fn size_law_at_exact_products() {
    // 0.3 × 10 rounds to 3.0000000000000004 in binary
    assert_eq!(selection_size(0.3, 10), 3);
    assert_eq!(selection_size(0.2, 500), 100);
    assert_eq!(selection_size(1.0, 7), 7);
    assert_eq!(selection_size(1e-9, 7), 1);
}

#[test]
fn ties_resolve_by_index() {
    let d = vec![1.0, 0.5, 1.0, 0.5, 2.0];
    assert_eq!(select_from_distances(d.clone(), 0.4).unwrap().indices, vec![1, 3]);
    assert_eq!(select_from_distances(d, 0.6).unwrap().indices, vec![0, 1, 3]);
}

#[test]
fn normalization_uses_target_scale() {
    // Scaling every state coordinate leaves normalized selections unchanged.
    let (src, tgt) = pair(11, 80, 9);
    let scale = |d: &tce_core::datasets::TransitionDataset| {
        let rows = d
            .rows()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.s.iter_mut().chain(r.s_next.iter_mut()).for_each(|v| *v = 3.0 * *v + 1.0);
                r
            })
            .collect();
        tce_core::datasets::TransitionDataset::new(3, 1, rows, d.meta().clone()).unwrap()
    };
    let a = selection::select(&src, &tgt, 0.3, true).unwrap();
    let b = selection::select(&scale(&src), &scale(&tgt), 0.3, true).unwrap();
    assert_eq!(a.indices, b.indices);
}
