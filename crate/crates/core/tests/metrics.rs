use basinmerge::metrics::{accuracy, confusion, harmonic_mean, miou, DomainScores};
use basinmerge::Error;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Row {
    scores: Vec<f64>,
    h: f64,
}

#[derive(Deserialize)]
struct Tables {
    two_domain: Vec<Row>,
    four_domain: Vec<Row>,
}

fn tables() -> Tables {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/harmonic_tables.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// The published scores carry one decimal. A row is consistent when H lies
/// within the range reachable from inputs anywhere in their rounding interval,
/// widened by H's own rounding.
fn consistent_with_rounding(row: &Row) -> bool {
    let lo: Vec<f64> = row.scores.iter().map(|s| s - 0.05).collect();
    let hi: Vec<f64> = row.scores.iter().map(|s| s + 0.05).collect();
    let (hlo, hhi) = (harmonic_mean(&lo).unwrap(), harmonic_mean(&hi).unwrap());
    row.h >= hlo - 0.05 && row.h <= hhi + 0.05
}

#[test]
fn published_rows_are_consistent_up_to_rounding() {
    let t = tables();
    for r in t.two_domain.iter().chain(&t.four_domain) {
        assert!(consistent_with_rounding(r), "{:?} -> {}", r.scores, r.h);
    }
}

#[test]
fn four_domain_rows_match_closely() {
    for r in tables().four_domain {
        assert!((harmonic_mean(&r.scores).unwrap() - r.h).abs() <= 0.05);
    }
}

#[test]
fn harmonic_mean_edge_cases() {
    assert_eq!(harmonic_mean(&[40.0]).unwrap(), 40.0);
    assert_eq!(harmonic_mean(&[0.0, 80.0]).unwrap(), 0.0);
    assert!((harmonic_mean(&[1.0, 2.0, 4.0]).unwrap() - 12.0 / 7.0).abs() < 1e-15);
    assert!(matches!(harmonic_mean(&[]), Err(Error::Domain(_))));
    assert!(matches!(harmonic_mean(&[-1.0, 2.0]), Err(Error::Domain(_))));
    assert!(harmonic_mean(&[f64::NAN, 2.0]).is_err());
    let d = DomainScores::new(vec![("a".into(), 50.0), ("b".into(), 75.0)]);
    assert_eq!(d.harmonic_mean().unwrap(), 60.0);
}

proptest! {
    #[test]
    fn harmonic_mean_lies_between_min_and_arithmetic_mean(v in prop::collection::vec(0.1f64..100.0, 1..6)) {
        let h = harmonic_mean(&v).unwrap();
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!(h >= min * (1.0 - 1e-12) && h <= mean * (1.0 + 1e-12));
    }

    #[test]
    fn harmonic_mean_is_order_free_and_homogeneous(v in prop::collection::vec(0.1f64..100.0, 2..6), k in 0.1f64..10.0) {
        let h = harmonic_mean(&v).unwrap();
        let mut rev = v.clone();
        rev.reverse();
        prop_assert!((harmonic_mean(&rev).unwrap() - h).abs() <= 1e-12 * h);
        let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
        prop_assert!((harmonic_mean(&scaled).unwrap() - k * h).abs() <= 1e-12 * k * h);
    }

    #[test]
    fn miou_is_invariant_under_relabeling(
        pairs in prop::collection::vec((0i64..4, 0i64..4), 1..200),
        shift in 1i64..4,
    ) {
        let (pred, gt): (Vec<i64>, Vec<i64>) = pairs.iter().copied().unzip();
        let r = |v: &[i64]| v.iter().map(|x| (x + shift) % 4).collect::<Vec<_>>();
        let a = miou(&confusion(&pred, &gt, 4, -1).unwrap()).unwrap().miou;
        let b = miou(&confusion(&r(&pred), &r(&gt), 4, -1).unwrap()).unwrap().miou;
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a));
    }
}

#[test]
fn miou_fixture() {
    // Class 0: tp 2, fp 1, fn 0 -> 2/3; class 1: tp 1, fp 0, fn 1 -> 1/2; class 2 absent.
    let pred = [0, 0, 0, 1];
    let gt = [0, 0, 1, 1];
    let r = miou(&confusion(&pred, &gt, 3, 255).unwrap()).unwrap();
    assert_eq!(r.per_class[2], None);
    assert!((r.miou - 100.0 * (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);
}

#[test]
fn ignore_label_is_skipped() {
    let cm = confusion(&[0, 1, 7], &[0, 1, 255], 2, 255).unwrap();
    assert_eq!(cm.total(), 2);
    assert_eq!(miou(&cm).unwrap().miou, 100.0);
    assert!(confusion(&[0, 5], &[0, 1], 2, 255).is_err());
    assert!(confusion(&[0], &[0, 1], 2, 255).is_err());
}

#[test]
fn empty_confusion_is_undefined() {
    let cm = confusion(&[3], &[3], 2, 3).unwrap();
    assert!(matches!(miou(&cm), Err(Error::UndefinedMetric(_))));
}

#[test]
fn accuracy_counts_matches() {
    assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 0, 4]).unwrap(), 75.0);
    assert!(accuracy(&[], &[]).is_err());
}
