#![allow(dead_code)]

use basinmerge::container::{Checkpoint, DType, Role, TensorData, TensorEntry};
use basinmerge::runtime::ArchSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn float_data(rng: &mut ChaCha8Rng, dtype: DType, n: usize) -> TensorData {
    match dtype {
        DType::F32 => TensorData::F32((0..n).map(|_| rng.gen_range(-3.0f32..3.0)).collect()),
        _ => TensorData::F64((0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()),
    }
}

/// A valid checkpoint with a few dense layers (mixed dtypes), some BN layers,
/// an extra non-BN buffer and metadata.
pub fn random_checkpoint(seed: u64) -> Checkpoint {
    let mut r = rng(seed);
    let mut c = Checkpoint::new();
    let layers = r.gen_range(1..4);
    for l in 0..layers {
        let (out, inp) = (r.gen_range(1..6), r.gen_range(1..6));
        let dtype = if r.gen_bool(0.5) { DType::F32 } else { DType::F64 };
        let w = float_data(&mut r, dtype, out * inp);
        c.insert(format!("backbone.l{l}.weight"), TensorEntry::new(vec![out, inp], w, Role::Param)).unwrap();
        let b = float_data(&mut r, dtype, out);
        c.insert(format!("backbone.l{l}.bias"), TensorEntry::new(vec![out], b, Role::Param)).unwrap();
        if r.gen_bool(0.6) {
            let mean = float_data(&mut r, dtype, out);
            let var: Vec<f64> = (0..out).map(|_| r.gen_range(0.01..4.0)).collect();
            c.insert(format!("backbone.bn{l}.running_mean"), TensorEntry::buffer(vec![out], mean)).unwrap();
            c.insert(
                format!("backbone.bn{l}.running_var"),
                TensorEntry::buffer(vec![out], TensorData::from_f64(dtype, &var)),
            )
            .unwrap();
            c.insert(format!("backbone.bn{l}.num_batches_tracked"), TensorEntry::count(r.gen_range(1..500))).unwrap();
        }
    }
    let k = r.gen_range(1..5);
    c.insert("head.weight", TensorEntry::new(vec![k, 3], float_data(&mut r, DType::F32, 3 * k), Role::Param))
        .unwrap();
    c.insert("head.scalar", TensorEntry::new(vec![], float_data(&mut r, DType::F64, 1), Role::Param)).unwrap();
    if r.gen_bool(0.5) {
        c.insert("aux.step", TensorEntry::buffer(vec![2], TensorData::I64(vec![r.gen(), -3]))).unwrap();
    }
    c.meta.insert("domain".into(), format!("d{}", r.gen_range(0..100)));
    c.meta.insert("note".into(), "ünïcode ✓".into());
    c
}

/// Same names, shapes, dtypes and roles as `c`, fresh values.
pub fn sibling(c: &Checkpoint, seed: u64) -> Checkpoint {
    let mut r = rng(seed);
    let mut out = Checkpoint::new();
    for (name, e) in c.iter() {
        let data = match (&e.data, e.role) {
            (TensorData::I64(v), Role::Count) => TensorData::I64(vec![r.gen_range(1..500); v.len()]),
            (TensorData::I64(v), _) => TensorData::I64(v.iter().map(|_| r.gen()).collect()),
            (d, _) if name.ends_with("running_var") => {
                TensorData::from_f64(d.dtype(), &(0..d.len()).map(|_| r.gen_range(0.01..4.0)).collect::<Vec<_>>())
            }
            (d, _) => float_data(&mut r, d.dtype(), d.len()),
        };
        out.insert(name.clone(), TensorEntry::new(e.shape.clone(), data, e.role)).unwrap();
    }
    out.meta = c.meta.clone();
    out.meta.insert("domain".into(), format!("s{seed}"));
    out
}

/// Initialized weights with non-trivial biases, BN affine parameters and
/// running statistics.
pub fn random_net(arch: &ArchSpec, seed: u64, dtype: DType) -> Checkpoint {
    let mut c = arch.init_checkpoint(seed, dtype).unwrap();
    let mut r = rng(seed.wrapping_add(0x5eed));
    let names: Vec<String> = c.names().cloned().collect();
    for n in names {
        let e = c.get_mut(&n).unwrap();
        if n.ends_with(".num_batches_tracked") {
            e.data = TensorData::I64(vec![r.gen_range(1..=50)]);
            continue;
        }
        if e.shape.len() != 1 {
            continue;
        }
        let v: Vec<f64> = if n.ends_with("running_var") || n.starts_with("bn") && n.ends_with(".weight") {
            (0..e.numel()).map(|_| r.gen_range(0.5..2.0)).collect()
        } else {
            (0..e.numel()).map(|_| r.gen_range(-0.5..0.5)).collect()
        };
        e.data = TensorData::from_f64(e.dtype(), &v);
    }
    c
}

/// Tensor equality over params and BN statistics; other buffers follow the
/// first input by policy and are excluded.
pub fn merged_eq(x: &Checkpoint, y: &Checkpoint) -> bool {
    let bn: Vec<String> = x.bn_prefixes();
    let keep = |n: &str, e: &TensorEntry| e.role == Role::Param || bn.iter().any(|p| n.starts_with(&format!("{p}.")));
    let pick = |c: &Checkpoint| c.iter().filter(|(n, e)| keep(n, e)).map(|(n, e)| (n.clone(), e.clone())).collect::<Vec<_>>();
    pick(x) == pick(y)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}
