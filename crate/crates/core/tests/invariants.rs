use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbal_core::data::SampleId;
use sbal_core::evaluation::{dsc, hd95};
use sbal_core::selection::{build_stochastic_pool, stochastic_batch_select, PoolMode, PoolSize};
use sbal_core::uncertainty::{jsd, pixel_entropy};

/// Normalises positive weights along the class axis.
fn softmaxish(raw: Vec<f64>, c: usize, n: usize) -> Array3<f64> {
    let mut a = Array3::from_shape_vec((c, 1, n), raw).unwrap();
    for x in 0..n {
        let s: f64 = (0..c).map(|k| a[[k, 0, x]]).sum();
        for k in 0..c {
            a[[k, 0, x]] /= s;
        }
    }
    a
}

fn prob_map(c: usize, n: usize) -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(1e-6f64..1.0, c * n).prop_map(move |v| softmaxish(v, c, n))
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(prop::bool::weighted(0.3), h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v.into_iter().map(u8::from).collect()).unwrap())
}

fn hausdorff(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
    let pts = |m: &Array2<u8>| -> Vec<(f64, f64)> { m.indexed_iter().filter(|(_, &v)| v == 1).map(|((y, x), _)| (y as f64, x as f64)).collect() };
    let (pa, pb) = (pts(a), pts(b));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter().map(|p| to.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

proptest! {
    #[test]
    fn entropy_is_bounded(p in (2usize..6).prop_flat_map(|c| prob_map(c, 7))) {
        let classes = p.dim().0 as f64;
        for v in pixel_entropy(p.view()).unwrap() {
            prop_assert!(v >= -1e-12 && v <= classes.ln() + 1e-12);
        }
    }

    #[test]
    fn jsd_is_bounded(k in 2usize..6, raw in prop::collection::vec(1e-6f64..1.0, 6 * 3 * 5)) {
        let maps: Vec<Array3<f64>> = (0..k).map(|i| softmaxish(raw[i * 15..(i + 1) * 15].to_vec(), 3, 5)).collect();
        let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
        for v in jsd(&views).unwrap() {
            prop_assert!(v >= 0.0 && v <= (k as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn dsc_and_hd95_are_symmetric(a in mask(10, 12), b in mask(10, 12)) {
        prop_assert_eq!(dsc(a.view(), b.view(), 1).unwrap(), dsc(b.view(), a.view(), 1).unwrap());
        prop_assert_eq!(hd95(a.view(), b.view(), 1, &[0.7, 1.3]).unwrap(), hd95(b.view(), a.view(), 1, &[0.7, 1.3]).unwrap());
    }

    #[test]
    fn hd95_never_exceeds_hausdorff(a in mask(10, 10), b in mask(10, 10)) {
        if let Some(h) = hd95(a.view(), b.view(), 1, &[1.0, 1.0]).unwrap() {
            prop_assert!(h <= hausdorff(&a, &b) + 1e-9);
        }
    }

    #[test]
    fn stochastic_batch_ignores_affine_rescaling(
        raw in prop::collection::vec(0.0f64..1.0, 24),
        scale in 0.01f64..100.0,
        shift in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let scores: BTreeMap<SampleId, f64> = raw.iter().enumerate().map(|(i, &s)| (format!("s{i:02}"), s)).collect();
        let moved: BTreeMap<SampleId, f64> = scores.iter().map(|(k, &s)| (k.clone(), scale * s + shift)).collect();
        let ids: BTreeSet<SampleId> = scores.keys().cloned().collect();
        let pool = build_stochastic_pool(&ids, 4, PoolMode::Partition, PoolSize::Auto, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = stochastic_batch_select(&scores, &pool).unwrap();
        let b = stochastic_batch_select(&moved, &pool).unwrap();
        prop_assert_eq!(a.batch_index, b.batch_index);
        prop_assert_eq!(a.sample_ids, b.sample_ids);
    }

    #[test]
    fn partition_batches_are_disjoint(n in 1usize..60, budget in 1usize..8, seed in any::<u64>()) {
        prop_assume!(budget <= n);
        let ids: BTreeSet<SampleId> = (0..n).map(|i| format!("u{i}")).collect();
        let pool = build_stochastic_pool(&ids, budget, PoolMode::Partition, PoolSize::Auto, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(pool.len(), n / budget);
        let mut seen = BTreeSet::new();
        for batch in &pool {
            prop_assert_eq!(batch.len(), budget);
            for id in batch {
                prop_assert!(ids.contains(id));
                prop_assert!(seen.insert(id.clone()));
            }
        }
    }
}
