mod common;

use basinmerge::buffers::BufferPolicy;
use basinmerge::container::DType;
use basinmerge::metrics::harmonic_mean;
use basinmerge::probe::{barrier_of, path_point, sweep};
use basinmerge::runtime::{evaluate, generate_domain, AffineTransform, ArchSpec, Dataset, SyntheticDomain};
use common::random_net;

fn domain(seed: u64, shift: f64) -> Dataset {
    generate_domain(&SyntheticDomain {
        task_seed: 1,
        seed,
        dims: 5,
        classes: 4,
        size: 300,
        modes: 1,
        center_scale: 2.0,
        spread: 1.0,
        transform: AffineTransform::rotation(5, 0.0, 0, vec![shift; 5]),
        label_noise: 0.0,
    })
    .unwrap()
}

fn setup() -> (ArchSpec, Vec<(String, Dataset)>) {
    let arch = ArchSpec::mlp(5, &[16], 4, true);
    (arch, vec![("x".into(), domain(2, 0.0)), ("y".into(), domain(3, 0.5))])
}

#[test]
fn self_sweep_is_flat() {
    let (arch, domains) = setup();
    let a = random_net(&arch, 1, DType::F32);
    let r = sweep(&a, &a, &domains, &arch, 11, BufferPolicy::Gaussian).unwrap();
    assert_eq!(r.barrier, 0.0);
    assert_eq!(r.lambdas.len(), 11);
}

#[test]
fn endpoints_are_the_input_models() {
    let (arch, domains) = setup();
    let a = random_net(&arch, 1, DType::F32);
    let b = random_net(&arch, 2, DType::F32);
    let r = sweep(&a, &b, &domains, &arch, 5, BufferPolicy::Gaussian).unwrap();
    for (k, (_, d)) in domains.iter().enumerate() {
        assert_eq!(r.per_domain[k].values[0], evaluate(&arch, &b, d).unwrap().accuracy);
        assert_eq!(r.per_domain[k].values[4], evaluate(&arch, &a, d).unwrap().accuracy);
    }
    assert_eq!(path_point(&a, &b, 1.0, BufferPolicy::Gaussian).unwrap(), a);
    assert_eq!(path_point(&a, &b, 0.0, BufferPolicy::Gaussian).unwrap(), b);
    for (i, h) in r.harmonic.iter().enumerate() {
        let v: Vec<f64> = r.per_domain.iter().map(|c| c.values[i]).collect();
        assert_eq!(*h, harmonic_mean(&v).unwrap());
    }
    assert_eq!(r.barrier, barrier_of(&r.lambdas, &r.harmonic));
}

#[test]
fn two_step_sweep_has_no_interior() {
    let (arch, domains) = setup();
    let a = random_net(&arch, 1, DType::F64);
    let b = random_net(&arch, 2, DType::F64);
    let r = sweep(&a, &b, &domains, &arch, 2, BufferPolicy::KeepFirst).unwrap();
    assert_eq!(r.lambdas, vec![0.0, 1.0]);
    assert_eq!(r.barrier, 0.0);
}

#[test]
fn report_files_are_written() {
    let (arch, domains) = setup();
    let a = random_net(&arch, 1, DType::F32);
    let b = random_net(&arch, 2, DType::F32);
    let r = sweep(&a, &b, &domains, &arch, 11, BufferPolicy::Gaussian).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,x,y,harmonic");
    assert_eq!(lines.len(), 12);
    assert!(lines[1].starts_with("0.0000,") && lines[11].starts_with("1.0000,"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(json["lambdas"].as_array().unwrap().len(), 11);
}

#[test]
fn invalid_sweeps_are_refused() {
    let (arch, domains) = setup();
    let a = random_net(&arch, 1, DType::F32);
    assert!(sweep(&a, &a, &domains, &arch, 1, BufferPolicy::Gaussian).is_err());
    assert!(sweep(&a, &a, &[], &arch, 3, BufferPolicy::Gaussian).is_err());
    let other = random_net(&ArchSpec::mlp(5, &[8], 4, true), 3, DType::F32);
    assert!(sweep(&a, &other, &domains, &arch, 3, BufferPolicy::Gaussian).is_err());
}
