mod common;

use basinmerge::buffers::BufferPolicy;
use basinmerge::container::{Checkpoint, Role, TensorData};
use basinmerge::merge::{
    interpolate, interpolate_with, merge, midpoint, prefix_merge, weighted_merge, weighted_merge_with, MergeSpec,
    Weights,
};
use basinmerge::{BnStats, Error};
use common::{merged_eq, random_checkpoint, sibling};
use proptest::prelude::*;

fn params(c: &Checkpoint) -> Vec<(&String, &TensorData)> {
    c.iter().filter(|(_, e)| e.role == Role::Param).map(|(n, e)| (n, &e.data)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn endpoints_copy_inputs(seed in any::<u64>()) {
        let a = random_checkpoint(seed);
        let b = sibling(&a, seed ^ 1);
        let (one, zero) = (interpolate(&a, &b, 1.0).unwrap(), interpolate(&a, &b, 0.0).unwrap());
        prop_assert_eq!(params(&one), params(&a));
        prop_assert_eq!(params(&zero), params(&b));
    }

    #[test]
    fn swapping_inputs_mirrors_lambda(seed in any::<u64>(), k in 0u32..=256) {
        let a = random_checkpoint(seed);
        let b = sibling(&a, seed ^ 2);
        let lambda = k as f64 / 256.0;
        let x = interpolate(&a, &b, lambda).unwrap();
        let y = interpolate(&b, &a, 1.0 - lambda).unwrap();
        prop_assert!(merged_eq(&x, &y));
    }

    #[test]
    fn interpolation_stays_between_inputs(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let a = random_checkpoint(seed);
        let b = sibling(&a, seed ^ 3);
        let m = interpolate(&a, &b, lambda).unwrap();
        for (name, e) in params(&m) {
            let (va, vb) = (a.get(name).unwrap().data.to_f64(), b.get(name).unwrap().data.to_f64());
            for ((v, x), y) in e.to_f64().iter().zip(&va).zip(&vb) {
                prop_assert!(*v >= x.min(*y) && *v <= x.max(*y));
            }
        }
    }

    #[test]
    fn equal_weights_reduce_to_midpoint(seed in any::<u64>()) {
        let a = random_checkpoint(seed);
        let b = sibling(&a, seed ^ 4);
        prop_assert!(weighted_merge(&[(&a, 0.5), (&b, 0.5)]).unwrap().tensors_eq(&midpoint(&a, &b).unwrap()));
        let spec = MergeSpec { weights: Weights::Explicit(vec![0.5, 0.5]), ..MergeSpec::default() };
        prop_assert!(merge(&[&a, &b], &spec).unwrap().tensors_eq(&midpoint(&a, &b).unwrap()));
    }

    #[test]
    fn one_hot_weights_copy_params(seed in any::<u64>(), pick in 0usize..3) {
        let a = random_checkpoint(seed);
        let inputs = [a.clone(), sibling(&a, seed ^ 5), sibling(&a, seed ^ 6)];
        let w: Vec<f64> = (0..3).map(|j| if j == pick { 1.0 } else { 0.0 }).collect();
        let pairs: Vec<(&Checkpoint, f64)> = inputs.iter().zip(w).collect();
        let m = weighted_merge(&pairs).unwrap();
        prop_assert_eq!(params(&m), params(&inputs[pick]));
    }

    #[test]
    fn prefix_merge_shares_only_the_prefix(seed in any::<u64>()) {
        let a = random_checkpoint(seed);
        let b = sibling(&a, seed ^ 7);
        let spec = MergeSpec { prefixes: vec!["backbone.".into()], ..MergeSpec::default() };
        let outs = prefix_merge(&[&a, &b], &spec).unwrap();
        prop_assert_eq!(outs.len(), 2);
        let mid = midpoint(&a, &b).unwrap();
        for (name, e) in outs[0].iter() {
            if name.starts_with("backbone.") {
                prop_assert_eq!(Some(e), outs[1].get(name));
                prop_assert_eq!(Some(e), mid.get(name));
            } else {
                prop_assert_eq!(Some(e), a.get(name));
                prop_assert_eq!(outs[1].get(name), b.get(name));
            }
        }
    }
}

#[test]
fn gaussian_buffers_pool_statistics() {
    let a = random_checkpoint(40);
    let b = sibling(&a, 41);
    let m = interpolate(&a, &b, 0.3).unwrap();
    for p in a.bn_prefixes() {
        let got = BnStats::from_checkpoint(&m, &p).unwrap();
        let (sa, sb) = (BnStats::from_checkpoint(&a, &p).unwrap(), BnStats::from_checkpoint(&b, &p).unwrap());
        assert_eq!(got.count, sa.count + sb.count);
        let n = (sa.count + sb.count) as f64;
        for c in 0..got.mean.len() {
            let mu = (sa.count as f64 * sa.mean[c] + sb.count as f64 * sb.mean[c]) / n;
            assert!((got.mean[c] - mu).abs() <= 1e-5 * mu.abs().max(1.0), "{p} mean");
        }
    }
}

#[test]
fn keep_first_copies_buffers() {
    let a = random_checkpoint(42);
    let b = sibling(&a, 43);
    let m = interpolate_with(&a, &b, 0.5, BufferPolicy::KeepFirst).unwrap();
    for (name, e) in a.iter().filter(|(_, e)| e.role != Role::Param) {
        if name.contains(".running_") || name.ends_with(".num_batches_tracked") {
            assert_eq!(m.get(name), Some(e));
        }
    }
}

#[test]
fn four_way_merge_with_weights() {
    let a = random_checkpoint(44);
    let others: Vec<Checkpoint> = (0..3).map(|k| sibling(&a, 45 + k)).collect();
    let inputs: Vec<(&Checkpoint, f64)> =
        std::iter::once(&a).chain(&others).zip([0.25, 0.25, 0.25, 0.25]).collect();
    let m = weighted_merge_with(&inputs, BufferPolicy::Average).unwrap();
    assert!(m.validate().is_ok());
}

#[test]
fn invalid_weights_are_domain_errors() {
    let a = random_checkpoint(50);
    let b = sibling(&a, 51);
    assert!(matches!(interpolate(&a, &b, 1.5), Err(Error::Domain(_))));
    assert!(matches!(weighted_merge(&[(&a, 0.7), (&b, 0.7)]), Err(Error::Domain(_))));
    assert!(matches!(weighted_merge(&[(&a, -0.5), (&b, 1.5)]), Err(Error::Domain(_))));
}

#[test]
fn incompatible_inputs_are_refused() {
    let a = random_checkpoint(60);
    let mut b = sibling(&a, 61);
    let first = b.names().next().unwrap().clone();
    b.remove(&first);
    assert!(midpoint(&a, &b).is_err());
}
