//! Seeded synthetic classification domains.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{Checkpoint, TensorData, TensorEntry};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × dims`
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Dataset> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!("label {l} outside [0, {classes})")));
        }
        Ok(Dataset { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.dims();
        let mut feats = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            feats.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: Matrix::from_vec(indices.len(), d, feats),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.select(&idx)
    }

    /// Concatenation of datasets with equal dims and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Domain("nothing to concatenate".into()))?;
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dims() != first.dims() || p.classes != first.classes {
                return Err(Error::Shape("datasets differ in dims or classes".into()));
            }
            feats.extend_from_slice(p.features.as_slice());
            labels.extend_from_slice(&p.labels);
        }
        let n = labels.len();
        Dataset::new(Matrix::from_vec(n, first.dims(), feats), labels, first.classes)
    }

    /// Applies a label bijection `labels[i] ↦ mapping[labels[i]]`.
    pub fn relabel(&self, mapping: &[usize]) -> Dataset {
        Dataset {
            features: self.features.clone(),
            labels: self.labels.iter().map(|&l| mapping[l]).collect(),
            classes: self.classes,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.insert(
            "features",
            TensorEntry::buffer(vec![self.len(), self.dims()], TensorData::F64(self.features.as_slice().to_vec())),
        )?;
        c.insert(
            "labels",
            TensorEntry::buffer(vec![self.len()], TensorData::I64(self.labels.iter().map(|&l| l as i64).collect())),
        )?;
        c.meta.insert("classes".into(), self.classes.to_string());
        c.meta.insert("kind".into(), "dataset".into());
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Dataset> {
        let f = c.require("features")?;
        let l = c.require("labels")?;
        let [n, d] = f.shape[..] else {
            return Err(Error::Validation("features must be a 2-d tensor".into()));
        };
        let labels = match &l.data {
            TensorData::I64(v) => v
                .iter()
                .map(|&x| usize::try_from(x).map_err(|_| Error::Validation(format!("negative label {x}"))))
                .collect::<Result<Vec<_>>>()?,
            _ => return Err(Error::Validation("labels must be i64".into())),
        };
        let classes = c
            .meta
            .get("classes")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Validation("dataset meta lacks a numeric \"classes\" entry".into()))?;
        Dataset::new(Matrix::from_vec(n, d, f.data.to_f64()), labels, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `x ↦ rotation · x + shift`, with `rotation` orthogonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    /// Row-major `dims × dims`.
    pub rotation: Vec<f64>,
    pub shift: Vec<f64>,
}

impl AffineTransform {
    pub fn identity(dims: usize) -> Self {
        AffineTransform {
            rotation: Matrix::from_fn(dims, dims, |i, j| if i == j { 1.0 } else { 0.0 }).into_vec(),
            shift: vec![0.0; dims],
        }
    }

    /// Rotation by `angle` radians in each of `dims/2` orthogonal planes of a
    /// seeded random basis, followed by `shift`.
    pub fn rotation(dims: usize, angle: f64, basis_seed: u64, shift: Vec<f64>) -> Self {
        assert_eq!(shift.len(), dims);
        let q = random_orthogonal(dims, basis_seed);
        let (s, c) = angle.sin_cos();
        let mut g = Matrix::from_fn(dims, dims, |i, j| if i == j { 1.0 } else { 0.0 });
        for p in 0..dims / 2 {
            let (a, b) = (2 * p, 2 * p + 1);
            g[(a, a)] = c;
            g[(a, b)] = -s;
            g[(b, a)] = s;
            g[(b, b)] = c;
        }
        // R = Qᵀ G Q
        let r = q.t_matmul(&g.matmul(&q));
        AffineTransform { rotation: r.into_vec(), shift }
    }

    pub fn dims(&self) -> usize {
        self.shift.len()
    }

    fn check(&self) -> Result<()> {
        let d = self.dims();
        if self.rotation.len() != d * d {
            return Err(Error::Shape(format!("rotation has {} entries for dims {d}", self.rotation.len())));
        }
        let r = Matrix::from_vec(d, d, self.rotation.clone());
        let rtr = r.t_matmul(&r);
        for i in 0..d {
            for j in 0..d {
                let target = if i == j { 1.0 } else { 0.0 };
                if (rtr[(i, j)] - target).abs() > 1e-9 {
                    return Err(Error::Domain("transform rotation is not orthogonal".into()));
                }
            }
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dims();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.rotation[i * d..(i + 1) * d];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.shift[i];
        }
    }
}

fn random_orthogonal(dims: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dims);
    while rows.len() < dims {
        let mut v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Matrix::from_rows(&rows)
}

/// A Gaussian-mixture classification task seen through an affine transform.
///
/// `task_seed` fixes the class centres (the shared label semantics);
/// `seed` fixes the drawn samples. Domains that share `task_seed` pose the
/// same task under different transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub task_seed: u64,
    pub seed: u64,
    pub dims: usize,
    pub classes: usize,
    pub size: usize,
    /// Gaussian components per class.
    #[serde(default = "one")]
    pub modes: usize,
    /// Standard deviation of component centres around the origin.
    pub center_scale: f64,
    /// Standard deviation of samples around their component centre.
    pub spread: f64,
    pub transform: AffineTransform,
    pub label_noise: f64,
}

fn one() -> usize {
    1
}

impl SyntheticDomain {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.classes == 0 || self.modes == 0 {
            return Err(Error::Domain("dims, classes and modes must be positive".into()));
        }
        if self.transform.dims() != self.dims {
            return Err(Error::Shape(format!(
                "transform acts on {} dims, domain has {}",
                self.transform.dims(),
                self.dims
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Domain(format!("label noise {} outside [0, 1)", self.label_noise)));
        }
        self.transform.check()
    }

    pub fn centers(&self) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(self.task_seed);
        let n = self.classes * self.modes;
        Matrix::from_fn(n, self.dims, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * self.center_scale
        })
    }
}

/// Draws `size` samples: a uniform class, a uniform component of that class,
/// Gaussian noise around its centre, then the domain transform. With
/// probability `label_noise` the label is replaced by a different class.
pub fn generate_domain(d: &SyntheticDomain) -> Result<Dataset> {
    d.validate()?;
    let centers = d.centers();
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let mut feats = Vec::with_capacity(d.size * d.dims);
    let mut labels = Vec::with_capacity(d.size);
    let mut raw = vec![0.0; d.dims];
    let mut out = vec![0.0; d.dims];
    for _ in 0..d.size {
        let class = rng.gen_range(0..d.classes);
        let mode = rng.gen_range(0..d.modes);
        let c = centers.row(class * d.modes + mode);
        for (r, &m) in raw.iter_mut().zip(c) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *r = m + d.spread * z;
        }
        d.transform.apply(&raw, &mut out);
        feats.extend_from_slice(&out);
        let flip: f64 = rng.gen();
        let label = if d.classes > 1 && flip < d.label_noise {
            let other = rng.gen_range(0..d.classes - 1);
            if other >= class { other + 1 } else { other }
        } else {
            class
        };
        labels.push(label);
    }
    Dataset::new(Matrix::from_vec(d.size, d.dims, feats), labels, d.classes)
}
