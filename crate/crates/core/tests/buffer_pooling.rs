mod common;

use basinmerge::{merge_bn_many, merge_bn_pair, BnStats};
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn stats(mean: f64, var: f64, count: u64) -> BnStats {
    BnStats::new(vec![mean], vec![var], count).unwrap()
}

#[test]
fn two_point_populations() {
    // {0} and {2} with one sample each: pooled mean 1, population variance 1.
    let m = merge_bn_pair(&stats(0.0, 0.0, 1), &stats(2.0, 0.0, 1)).unwrap();
    assert_eq!((m.mean[0], m.var[0], m.count), (1.0, 1.0, 2));
}

#[test]
fn equal_means_add_no_between_term() {
    let m = merge_bn_pair(&stats(3.0, 2.0, 10), &stats(3.0, 4.0, 30)).unwrap();
    assert_eq!(m.mean[0], 3.0);
    assert!((m.var[0] - 3.5).abs() < 1e-15);
}

#[test]
fn single_input_is_returned_unchanged() {
    let s = BnStats::new(vec![1.0, -2.0], vec![0.5, 3.0], 7).unwrap();
    assert_eq!(merge_bn_many(std::slice::from_ref(&s)).unwrap(), s);
}

#[test]
fn invalid_statistics_are_rejected() {
    assert!(BnStats::new(vec![0.0], vec![-1.0], 1).is_err());
    assert!(BnStats::new(vec![0.0], vec![1.0], 0).is_err());
    assert!(BnStats::new(vec![0.0, 1.0], vec![1.0], 1).is_err());
    assert!(merge_bn_many(&[]).is_err());
    let a = BnStats::new(vec![0.0], vec![1.0], 1).unwrap();
    let b = BnStats::new(vec![0.0, 0.0], vec![1.0, 1.0], 1).unwrap();
    assert!(merge_bn_pair(&a, &b).is_err());
}

#[test]
fn many_equals_pair_for_two() {
    let mut r = rng(7);
    for _ in 0..200 {
        let a = stats(r.gen_range(-5.0..5.0), r.gen_range(0.0..3.0), r.gen_range(1..100));
        let b = stats(r.gen_range(-5.0..5.0), r.gen_range(0.0..3.0), r.gen_range(1..100));
        assert_eq!(merge_bn_many(&[a.clone(), b.clone()]).unwrap(), merge_bn_pair(&a, &b).unwrap());
    }
}

proptest! {
    #[test]
    fn pair_is_symmetric(
        m1 in -50.0f64..50.0, v1 in 0.0f64..20.0, n1 in 1u64..1000,
        m2 in -50.0f64..50.0, v2 in 0.0f64..20.0, n2 in 1u64..1000,
    ) {
        let (a, b) = (stats(m1, v1, n1), stats(m2, v2, n2));
        prop_assert_eq!(merge_bn_pair(&a, &b).unwrap(), merge_bn_pair(&b, &a).unwrap());
    }

    #[test]
    fn pooled_variance_bounds(
        m1 in -50.0f64..50.0, v1 in 0.0f64..20.0, n1 in 1u64..1000,
        m2 in -50.0f64..50.0, v2 in 0.0f64..20.0, n2 in 1u64..1000,
    ) {
        // The pooled variance is at least the weighted within-variance.
        let m = merge_bn_pair(&stats(m1, v1, n1), &stats(m2, v2, n2)).unwrap();
        let within = (n1 as f64 * v1 + n2 as f64 * v2) / (n1 + n2) as f64;
        prop_assert!(m.var[0] >= within * (1.0 - 1e-12));
        prop_assert!(m.mean[0] >= m1.min(m2) - 1e-9 && m.mean[0] <= m1.max(m2) + 1e-9);
    }
}
