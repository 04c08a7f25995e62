use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, BoundLayer};
use super::data::Dataset;
use crate::container::{Checkpoint, DType, Role, TensorData, TensorEntry, NUM_BATCHES_TRACKED, RUNNING_MEAN, RUNNING_VAR};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{confusion, miou, ConfusionMatrix};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Dense { w: Matrix, b: Vec<f64> },
    Batchnorm { gamma: Vec<f64>, beta: Vec<f64>, mean: Vec<f64>, var: Vec<f64>, count: u64 },
    Relu,
}

/// f64 instantiation of an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: ArchSpec,
    bound: Vec<BoundLayer>,
    layers: Vec<Layer>,
}

/// Per-layer state kept by a train-mode forward pass for backpropagation.
enum Cache {
    Dense { input: Matrix },
    Batchnorm { xhat: Matrix, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    Relu { mask: Vec<bool> },
}

/// Batch statistics observed by one train-mode forward pass, one entry per
/// batch-norm layer in order.
pub type BatchStats = Vec<(Vec<f64>, Vec<f64>)>;

impl Network {
    pub fn from_checkpoint(arch: &ArchSpec, ckpt: &Checkpoint) -> Result<Network> {
        arch.check_checkpoint(ckpt)?;
        let f = |name: &str| -> Result<Vec<f64>> { Ok(ckpt.require(name)?.data.to_f64()) };
        let bound = arch.bind();
        let mut layers = Vec::with_capacity(bound.len());
        for l in &bound {
            layers.push(match l {
                BoundLayer::Dense { inputs, outputs, weight, bias } => Layer::Dense {
                    w: Matrix::from_vec(*outputs, *inputs, f(weight)?),
                    b: f(bias)?,
                },
                BoundLayer::Batchnorm { prefix, .. } => {
                    let count = match &ckpt.require(&format!("{prefix}.{NUM_BATCHES_TRACKED}"))?.data {
                        TensorData::I64(v) => v[0].max(0) as u64,
                        _ => unreachable!("roles checked by the architecture"),
                    };
                    Layer::Batchnorm {
                        gamma: f(&format!("{prefix}.weight"))?,
                        beta: f(&format!("{prefix}.bias"))?,
                        mean: f(&format!("{prefix}.{RUNNING_MEAN}"))?,
                        var: f(&format!("{prefix}.{RUNNING_VAR}"))?,
                        count,
                    }
                }
                BoundLayer::Relu => Layer::Relu,
            });
        }
        Ok(Network { arch: arch.clone(), bound, layers })
    }

    pub fn to_checkpoint(&self, dtype: DType) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        let float = |v: &[f64]| TensorData::from_f64(dtype, v);
        for (l, names) in self.layers.iter().zip(&self.bound) {
            match (l, names) {
                (Layer::Dense { w, b }, BoundLayer::Dense { weight, bias, .. }) => {
                    c.insert(weight.clone(), TensorEntry::new(vec![w.rows(), w.cols()], float(w.as_slice()), Role::Param))?;
                    c.insert(bias.clone(), TensorEntry::new(vec![b.len()], float(b), Role::Param))?;
                }
                (Layer::Batchnorm { gamma, beta, mean, var, count }, BoundLayer::Batchnorm { prefix, width }) => {
                    let p = |v: &[f64]| TensorEntry::new(vec![*width], float(v), Role::Param);
                    c.insert(format!("{prefix}.weight"), p(gamma))?;
                    c.insert(format!("{prefix}.bias"), p(beta))?;
                    c.insert(format!("{prefix}.{RUNNING_MEAN}"), TensorEntry::buffer(vec![*width], float(mean)))?;
                    c.insert(format!("{prefix}.{RUNNING_VAR}"), TensorEntry::buffer(vec![*width], float(var)))?;
                    c.insert(format!("{prefix}.{NUM_BATCHES_TRACKED}"), TensorEntry::count(*count as i64))?;
                }
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    /// Mutable views of every learnable tensor, in layer order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense { w, b } => {
                    out.push(w.as_mut_slice());
                    out.push(b);
                }
                Layer::Batchnorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Dense { w, b } => {
                    out.push(w.as_slice());
                    out.push(b);
                }
                Layer::Batchnorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.arch.input_dim() {
            return Err(Error::Validation(format!(
                "batch has {} features, architecture expects {}",
                x.cols(),
                self.arch.input_dim()
            )));
        }
        Ok(())
    }

    /// Logits for `x`. Train mode normalizes with batch statistics and leaves
    /// the running statistics untouched.
    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        self.check_input(x)?;
        match mode {
            Mode::Train => Ok(self.forward_train(x)?.0),
            Mode::Eval => Ok(self.forward_eval(x)),
        }
    }

    fn forward_eval(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for l in &self.layers {
            match l {
                Layer::Dense { w, b } => h = dense(&h, w, b),
                Layer::Batchnorm { gamma, beta, mean, var, .. } => {
                    let scale: Vec<f64> = var.iter().zip(gamma).map(|(v, g)| g / (v + BN_EPS).sqrt()).collect();
                    for i in 0..h.rows() {
                        for (j, v) in h.row_mut(i).iter_mut().enumerate() {
                            *v = (*v - mean[j]) * scale[j] + beta[j];
                        }
                    }
                }
                Layer::Relu => h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        h
    }

    fn forward_train(&self, x: &Matrix) -> Result<(Matrix, Vec<Cache>)> {
        if x.rows() < 2 && self.layers.iter().any(|l| matches!(l, Layer::Batchnorm { .. })) {
            return Err(Error::Validation("batch statistics need at least 2 samples".into()));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            match l {
                Layer::Dense { w, b } => {
                    let out = dense(&h, w, b);
                    caches.push(Cache::Dense { input: std::mem::replace(&mut h, out) });
                }
                Layer::Batchnorm { gamma, beta, .. } => {
                    let (n, c) = (h.rows(), h.cols());
                    let mut mean = vec![0.0; c];
                    for i in 0..n {
                        mean.iter_mut().zip(h.row(i)).for_each(|(m, v)| *m += v);
                    }
                    mean.iter_mut().for_each(|m| *m /= n as f64);
                    let mut var = vec![0.0; c];
                    for i in 0..n {
                        for ((s, v), m) in var.iter_mut().zip(h.row(i)).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    var.iter_mut().for_each(|s| *s /= n as f64);
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let mut xhat = h;
                    let mut out = Matrix::zeros(n, c);
                    for i in 0..n {
                        for j in 0..c {
                            let z = (xhat[(i, j)] - mean[j]) * inv_std[j];
                            xhat[(i, j)] = z;
                            out[(i, j)] = z * gamma[j] + beta[j];
                        }
                    }
                    h = out;
                    caches.push(Cache::Batchnorm { xhat, inv_std, mean, var });
                }
                Layer::Relu => {
                    let mask: Vec<bool> = h.as_slice().iter().map(|&v| v > 0.0).collect();
                    h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                    caches.push(Cache::Relu { mask });
                }
            }
        }
        Ok((h, caches))
    }

    /// Mean softmax cross-entropy in train mode, its gradient for every
    /// learnable tensor (same order as [`Network::params`]) and the observed
    /// batch statistics.
    pub fn loss_and_grads(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>, BatchStats)> {
        self.check_input(x)?;
        if labels.len() != x.rows() {
            return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), x.rows())));
        }
        let (logits, caches) = self.forward_train(x)?;
        let (loss, mut g) = softmax_xent(&logits, labels)?;

        let mut grads_rev: Vec<Vec<f64>> = Vec::new();
        let mut stats = Vec::new();
        for (l, cache) in self.layers.iter().zip(&caches).rev() {
            match (l, cache) {
                (Layer::Dense { w, .. }, Cache::Dense { input }) => {
                    let dw = g.t_matmul(input);
                    let mut db = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        db.iter_mut().zip(g.row(i)).for_each(|(d, v)| *d += v);
                    }
                    g = g.matmul(w);
                    grads_rev.push(db);
                    grads_rev.push(dw.into_vec());
                }
                (Layer::Batchnorm { gamma, .. }, Cache::Batchnorm { xhat, inv_std, mean, var }) => {
                    let (n, c) = (g.rows(), g.cols());
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            dgamma[j] += g[(i, j)] * xhat[(i, j)];
                            dbeta[j] += g[(i, j)];
                        }
                    }
                    // dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), dxhat = dy·γ
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..c {
                            let dxhat = g[(i, j)] * gamma[j];
                            let sum_dxhat = dbeta[j] * gamma[j];
                            let sum_dxhat_xhat = dgamma[j] * gamma[j];
                            g[(i, j)] = inv_std[j] / nf * (nf * dxhat - sum_dxhat - xhat[(i, j)] * sum_dxhat_xhat);
                        }
                    }
                    grads_rev.push(dbeta);
                    grads_rev.push(dgamma);
                    stats.push((mean.clone(), var.clone()));
                }
                (Layer::Relu, Cache::Relu { mask }) => {
                    g.as_mut_slice().iter_mut().zip(mask).for_each(|(v, &m)| {
                        if !m {
                            *v = 0.0
                        }
                    });
                }
                _ => unreachable!("cache mirrors layers"),
            }
        }
        grads_rev.reverse();
        stats.reverse();
        Ok((loss, grads_rev, stats))
    }

    /// Folds one batch's statistics into the running averages with equal
    /// weight per batch.
    pub fn track(&mut self, stats: &BatchStats) {
        let mut it = stats.iter();
        for l in &mut self.layers {
            if let Layer::Batchnorm { mean, var, count, .. } = l {
                let (bm, bv) = it.next().expect("one statistics entry per batch-norm layer");
                *count += 1;
                let t = *count as f64;
                mean.iter_mut().zip(bm).for_each(|(m, b)| *m += (b - *m) / t);
                var.iter_mut().zip(bv).for_each(|(v, b)| *v += (b - *v) / t);
            }
        }
    }

    /// Zeroes running statistics and batch counts.
    pub fn reset_running_stats(&mut self) {
        for l in &mut self.layers {
            if let Layer::Batchnorm { mean, var, count, .. } = l {
                mean.iter_mut().for_each(|m| *m = 0.0);
                var.iter_mut().for_each(|v| *v = 0.0);
                *count = 0;
            }
        }
    }

    /// Argmax of eval-mode logits; ties go to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(x, Mode::Eval)?;
        Ok((0..logits.rows())
            .map(|i| {
                logits.row(i).iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 { (j, v) } else { best }
                })
                .0
            })
            .collect())
    }
}

fn dense(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut y = x.matmul_t(w);
    for i in 0..y.rows() {
        y.row_mut(i).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
    }
    y
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    let k = logits.cols();
    let mut grad = Matrix::zeros(n, k);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Domain(format!("label {y} at index {i} is outside [0, {k})")));
        }
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        for (g, v) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (v - m).exp() / z / n as f64;
        }
        grad[(i, y)] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Logits of `ckpt` on `batch`.
pub fn forward(arch: &ArchSpec, ckpt: &Checkpoint, batch: &Matrix, mode: Mode) -> Result<Matrix> {
    Network::from_checkpoint(arch, ckpt)?.forward(batch, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub miou: f64,
    pub samples: u64,
    pub confusion: ConfusionMatrix,
}

const EVAL_SHARD: usize = 256;

/// Eval-mode accuracy and mIoU. Shards are scored concurrently and their
/// confusion matrices summed, so the result does not depend on scheduling.
pub fn evaluate(arch: &ArchSpec, ckpt: &Checkpoint, data: &Dataset) -> Result<Evaluation> {
    evaluate_network(&Network::from_checkpoint(arch, ckpt)?, data)
}

pub fn evaluate_network(net: &Network, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Domain("evaluation on an empty dataset".into()));
    }
    if data.classes != net.arch().output_dim() {
        return Err(Error::Validation(format!(
            "dataset has {} classes, architecture predicts {}",
            data.classes,
            net.arch().output_dim()
        )));
    }
    let shards: Vec<usize> = (0..data.len()).step_by(EVAL_SHARD).collect();
    let parts = shards
        .par_iter()
        .map(|&start| {
            let idx: Vec<usize> = (start..(start + EVAL_SHARD).min(data.len())).collect();
            let shard = data.select(&idx);
            let pred: Vec<i64> = net.predict(&shard.features)?.into_iter().map(|p| p as i64).collect();
            let gt: Vec<i64> = shard.labels.iter().map(|&l| l as i64).collect();
            confusion(&pred, &gt, data.classes, -1)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(data.classes)?;
    for p in &parts {
        cm += p;
    }
    let hits: u64 = (0..data.classes).map(|c| cm.true_positives(c)).sum();
    let total = cm.total();
    Ok(Evaluation {
        accuracy: 100.0 * hits as f64 / total as f64,
        miou: miou(&cm)?.miou,
        samples: total,
        confusion: cm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_gives_zero_logits() {
        let arch = ArchSpec::mlp(3, &[4], 2, true);
        let mut ckpt = arch.init_checkpoint(0, DType::F64).unwrap();
        ckpt.insert("l2.weight", TensorEntry::param_f64(vec![2, 4], vec![0.0; 8])).unwrap();
        let x = Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64);
        let y = forward(&arch, &ckpt, &x, Mode::Eval).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_bn_with_unit_stats_is_near_identity() {
        let arch = ArchSpec {
            layers: vec![
                super::super::arch::LayerSpec::Dense { inputs: 2, outputs: 2 },
                super::super::arch::LayerSpec::Batchnorm { width: 2 },
                super::super::arch::LayerSpec::Dense { inputs: 2, outputs: 2 },
            ],
            head_prefix: "l2.".into(),
        };
        let mut ckpt = arch.init_checkpoint(0, DType::F64).unwrap();
        let eye = TensorEntry::param_f64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        ckpt.insert("l1.weight", eye.clone()).unwrap();
        ckpt.insert("l2.weight", eye).unwrap();
        let x = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]);
        let y = forward(&arch, &ckpt, &x, Mode::Eval).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b * s).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = ArchSpec::mlp(3, &[5, 4], 3, true);
        let ckpt = arch.init_checkpoint(7, DType::F64).unwrap();
        let mut net = Network::from_checkpoint(&arch, &ckpt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let labels = [0, 1, 2, 1, 0, 2];
        let (_, grads, _) = net.loss_and_grads(&x, &labels).unwrap();
        let h = 1e-5;
        let shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        for (t, &len) in shapes.iter().enumerate() {
            for k in 0..len {
                let orig = net.params()[t][k];
                net.params_mut()[t][k] = orig + h;
                let up = net.loss_and_grads(&x, &labels).unwrap().0;
                net.params_mut()[t][k] = orig - h;
                let down = net.loss_and_grads(&x, &labels).unwrap().0;
                net.params_mut()[t][k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[t][k];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "tensor {t}[{k}]: {fd} vs {an}");
            }
        }
    }
}
