mod common;

use basinmerge::container::{
    inspect, validate_compatibility, Checkpoint, DType, Role, TensorData, TensorEntry,
};
use basinmerge::Error;
use common::{random_checkpoint, sibling};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bytes_round_trip(seed in any::<u64>()) {
        let c = random_checkpoint(seed);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn compatibility_is_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (random_checkpoint(s1), random_checkpoint(s2));
        prop_assert_eq!(validate_compatibility(&a, &b).compatible, validate_compatibility(&b, &a).compatible);
        prop_assert!(validate_compatibility(&a, &sibling(&a, s2)).compatible);
    }
}

#[test]
fn layout_starts_with_magic_and_header_length() {
    let c = Checkpoint::new().with("w", TensorEntry::param_f32(vec![2], vec![1.0, -2.0])).unwrap();
    let bytes = c.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"TMC1");
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + n]).unwrap();
    assert!(header.is_object());
    // Payload is the little-endian f32 data.
    assert_eq!(&bytes[12 + n..], [1.0f32.to_le_bytes(), (-2.0f32).to_le_bytes()].concat().as_slice());
}

#[test]
fn special_floats_survive_bit_exactly() {
    let v = vec![f32::NAN, -0.0, f32::INFINITY, f32::MIN_POSITIVE / 2.0];
    let c = Checkpoint::new().with("w", TensorEntry::param_f32(vec![4], v.clone())).unwrap();
    let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
    let TensorData::F32(got) = &back.get("w").unwrap().data else { panic!("dtype changed") };
    let bits = |x: &[f32]| x.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(got), bits(&v));
}

#[test]
fn insertion_order_does_not_matter() {
    let a = Checkpoint::new()
        .with("x", TensorEntry::param_f64(vec![1], vec![1.0]))
        .unwrap()
        .with("a", TensorEntry::param_f64(vec![1], vec![2.0]))
        .unwrap();
    let b = Checkpoint::new()
        .with("a", TensorEntry::param_f64(vec![1], vec![2.0]))
        .unwrap()
        .with("x", TensorEntry::param_f64(vec![1], vec![1.0]))
        .unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn corrupt_inputs_are_format_errors() {
    let bytes = random_checkpoint(1).to_bytes().unwrap();
    for bad in [&b"XXXX"[..], &bytes[..3], &bytes[..bytes.len() - 1]] {
        assert!(Checkpoint::from_bytes(bad).is_err());
    }
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'Z';
    assert!(matches!(Checkpoint::from_bytes(&wrong_magic), Err(Error::Format { .. })));
}

#[test]
fn shape_and_data_must_agree() {
    let e = TensorEntry::param_f64(vec![2, 2], vec![1.0; 3]);
    assert!(Checkpoint::new().with("w", e).is_err());
}

#[test]
fn incomplete_bn_triple_is_rejected() {
    let c = Checkpoint::new()
        .with("bn.running_mean", TensorEntry::buffer(vec![2], TensorData::F32(vec![0.0; 2])))
        .unwrap();
    assert!(c.validate().is_err());
}

#[test]
fn inspect_counts_roles() {
    let c = Checkpoint::new()
        .with("l1.weight", TensorEntry::param_f32(vec![2, 2], vec![0.0; 4]))
        .unwrap()
        .with("l1.bias", TensorEntry::param_f32(vec![2], vec![0.0; 2]))
        .unwrap()
        .with("bn1.running_mean", TensorEntry::buffer(vec![2], TensorData::F32(vec![0.0; 2])))
        .unwrap()
        .with("bn1.running_var", TensorEntry::buffer(vec![2], TensorData::F32(vec![1.0; 2])))
        .unwrap()
        .with("bn1.num_batches_tracked", TensorEntry::count(3))
        .unwrap();
    let s = inspect(&c);
    assert_eq!((s.params, s.buffers, s.counts), (2, 2, 1));
    assert_eq!(s.bn_prefixes, vec!["bn1".to_string()]);
    assert_eq!(c.get("bn1.num_batches_tracked").unwrap().role, Role::Count);
    assert_eq!(c.get("l1.weight").unwrap().dtype(), DType::F32);
}

#[test]
fn mismatches_are_reported_not_fatal() {
    let a = random_checkpoint(5);
    let mut b = sibling(&a, 6);
    let name = b.names().next().unwrap().clone();
    b.remove(&name);
    let r = validate_compatibility(&a, &b);
    assert!(!r.compatible);
}
