//! Merging of batch-norm running statistics.
//!
//! Each source model's running statistics are read as the mean and
//! (population) variance of a sample whose size is proportional to the
//! number of tracked batches. The merged layer gets the statistics of the
//! pooled sample:
//!
//! ```text
//!   n   = Σ n_j
//!   μ   = Σ n_j μ_j / n
//!   σ²  = (Σ n_j σ_j² + Σ n_j (μ_j − μ)²) / n
//! ```

use serde::{Deserialize, Serialize};

use crate::container::{
    Checkpoint, Role, TensorData, TensorEntry, NUM_BATCHES_TRACKED, RUNNING_MEAN, RUNNING_VAR,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl BnStats {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, count: u64) -> Result<Self> {
        let s = BnStats { mean, var, count };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.mean.len() != self.var.len() {
            return Err(Error::Shape(format!(
                "mean has {} channels, var has {}",
                self.mean.len(),
                self.var.len()
            )));
        }
        if let Some(v) = self.var.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Domain(format!("variance must be non-negative, got {v}")));
        }
        if self.count == 0 {
            return Err(Error::Domain("tracked-batch count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Reads the running-statistics triple of BN layer `prefix`.
    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<BnStats> {
        let triple = BnTriple::new(prefix);
        let missing = |n: &str| Error::Validation(format!("batch-norm layer {prefix}: missing {n}"));
        let mean = ckpt.get(&triple.mean).ok_or_else(|| missing(&triple.mean))?;
        let var = ckpt.get(&triple.var).ok_or_else(|| missing(&triple.var))?;
        let count = ckpt.get(&triple.count).ok_or_else(|| missing(&triple.count))?;
        let count = match &count.data {
            TensorData::I64(v) if v.len() == 1 => v[0],
            _ => {
                return Err(Error::Validation(format!(
                    "tensor {}: expected an i64 scalar",
                    triple.count
                )))
            }
        };
        if count < 1 {
            return Err(Error::Validation(format!(
                "batch-norm layer {prefix}: tracked-batch count is {count}, pooling needs at least 1"
            )));
        }
        BnStats::new(mean.data.to_f64(), var.data.to_f64(), count as u64)
            .map_err(|e| Error::Validation(format!("batch-norm layer {prefix}: {e}")))
    }
}

/// Pools two sets of statistics.
///
/// The variance numerator is grouped as `(n_Aσ_A² + n_Bσ_B²) + (n_A d_A² + n_B d_B²)`
/// so that swapping the arguments gives bit-identical output.
pub fn merge_bn_pair(a: &BnStats, b: &BnStats) -> Result<BnStats> {
    merge_bn_many(&[a.clone(), b.clone()])
}

pub fn merge_bn_many(stats: &[BnStats]) -> Result<BnStats> {
    let first = stats
        .first()
        .ok_or_else(|| Error::Domain("cannot merge an empty list of statistics".into()))?;
    for s in stats {
        s.check()?;
        if s.channels() != first.channels() {
            return Err(Error::Shape(format!(
                "statistics have {} and {} channels",
                first.channels(),
                s.channels()
            )));
        }
    }
    if stats.len() == 1 {
        return Ok(first.clone());
    }

    let count: u64 = stats.iter().map(|s| s.count).sum();
    let n = count as f64;
    let channels = first.channels();
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut weighted = 0.0;
        for s in stats {
            weighted += s.count as f64 * s.mean[c];
        }
        let mu = weighted / n;

        let mut within = 0.0;
        let mut between = 0.0;
        for s in stats {
            let w = s.count as f64;
            let d = s.mean[c] - mu;
            within += w * s.var[c];
            between += w * (d * d);
        }
        mean[c] = mu;
        var[c] = (within + between) / n;
    }
    Ok(BnStats { mean, var, count })
}

/// How non-learnable tensors are combined when merging checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum BufferPolicy {
    /// Pool BN statistics as Gaussian populations weighted by tracked batches.
    #[default]
    Gaussian,
    /// Take every buffer and count from the first input.
    KeepFirst,
    /// Unweighted mean of running means and variances; counts are summed.
    Average,
}

impl BufferPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            BufferPolicy::Gaussian => "gaussian",
            BufferPolicy::KeepFirst => "keep_first",
            BufferPolicy::Average => "average",
        }
    }
}

pub(crate) struct BnTriple {
    pub mean: String,
    pub var: String,
    pub count: String,
}

impl BnTriple {
    pub fn new(prefix: &str) -> Self {
        BnTriple {
            mean: format!("{prefix}.{RUNNING_MEAN}"),
            var: format!("{prefix}.{RUNNING_VAR}"),
            count: format!("{prefix}.{NUM_BATCHES_TRACKED}"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        name == self.mean || name == self.var || name == self.count
    }
}

/// Writes merged buffers and counts of `inputs` into `out`.
///
/// BN triples follow `policy`. Buffers outside any BN triple are averaged
/// under [`BufferPolicy::Average`] (floating point only) and otherwise copied
/// from the first input. `select` restricts which BN layers and buffers are
/// touched; a BN layer is selected when any member of its triple is.
pub fn merge_checkpoint_buffers(
    inputs: &[&Checkpoint],
    policy: BufferPolicy,
    out: &mut Checkpoint,
    select: &dyn Fn(&str) -> bool,
) -> Result<()> {
    let first = *inputs
        .first()
        .ok_or_else(|| Error::Domain("no checkpoints to merge".into()))?;
    let prefixes = first.bn_prefixes();
    for input in inputs {
        for p in input.bn_prefixes() {
            if !prefixes.contains(&p) {
                return Err(Error::Validation(format!(
                    "batch-norm layer {p} is not present in every input"
                )));
            }
        }
    }

    let mut handled: Vec<BnTriple> = Vec::new();
    for prefix in &prefixes {
        let triple = BnTriple::new(prefix);
        if !(select(&triple.mean) || select(&triple.var) || select(&triple.count)) {
            handled.push(triple);
            continue;
        }
        match policy {
            BufferPolicy::KeepFirst => {
                for name in [&triple.mean, &triple.var, &triple.count] {
                    out.insert(name.clone(), first.require(name)?.clone())?;
                }
            }
            BufferPolicy::Gaussian => {
                let stats = inputs
                    .iter()
                    .map(|c| BnStats::from_checkpoint(c, prefix))
                    .collect::<Result<Vec<_>>>()?;
                let merged = merge_bn_many(&stats)
                    .map_err(|e| Error::Validation(format!("batch-norm layer {prefix}: {e}")))?;
                write_stats(out, first, &triple, &merged)?;
            }
            BufferPolicy::Average => {
                let mut sum_mean = vec![0.0; first.require(&triple.mean)?.data.len()];
                let mut sum_var = sum_mean.clone();
                let mut count = 0i64;
                for c in inputs {
                    let mean = c.require(&triple.mean)?.data.to_f64();
                    let var = c.require(&triple.var)?.data.to_f64();
                    if mean.len() != sum_mean.len() || var.len() != sum_mean.len() {
                        return Err(Error::Validation(format!(
                            "batch-norm layer {prefix}: channel count differs across inputs"
                        )));
                    }
                    sum_mean.iter_mut().zip(&mean).for_each(|(s, x)| *s += x);
                    sum_var.iter_mut().zip(&var).for_each(|(s, x)| *s += x);
                    count += read_count(c, &triple.count)?;
                }
                let m = inputs.len() as f64;
                let mean: Vec<f64> = sum_mean.iter().map(|s| s / m).collect();
                let var: Vec<f64> = sum_var.iter().map(|s| s / m).collect();
                let stats = BnStats { mean, var, count: count.max(0) as u64 };
                write_stats(out, first, &triple, &stats)?;
            }
        }
        handled.push(triple);
    }

    for (name, entry) in first.iter() {
        if entry.role == Role::Param || !select(name) || handled.iter().any(|t| t.contains(name)) {
            continue;
        }
        let merged = match (policy, entry.role) {
            (BufferPolicy::Average, Role::Buffer) if entry.dtype().is_float() => {
                let mut acc = vec![0.0; entry.data.len()];
                for c in inputs {
                    let v = c.require(name)?.data.to_f64();
                    acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
                }
                let m = inputs.len() as f64;
                let avg: Vec<f64> = acc.iter().map(|a| a / m).collect();
                TensorEntry::new(entry.shape.clone(), TensorData::from_f64(entry.dtype(), &avg), entry.role)
            }
            _ => entry.clone(),
        };
        out.insert(name.clone(), merged)?;
    }
    Ok(())
}

fn read_count(ckpt: &Checkpoint, name: &str) -> Result<i64> {
    match &ckpt.require(name)?.data {
        TensorData::I64(v) if v.len() == 1 => Ok(v[0]),
        _ => Err(Error::Validation(format!("tensor {name}: expected an i64 scalar"))),
    }
}

fn write_stats(out: &mut Checkpoint, like: &Checkpoint, triple: &BnTriple, stats: &BnStats) -> Result<()> {
    let mean_like = like.require(&triple.mean)?;
    let var_like = like.require(&triple.var)?;
    out.insert(
        triple.mean.clone(),
        TensorEntry::buffer(mean_like.shape.clone(), TensorData::from_f64(mean_like.dtype(), &stats.mean)),
    )?;
    out.insert(
        triple.var.clone(),
        TensorEntry::buffer(var_like.shape.clone(), TensorData::from_f64(var_like.dtype(), &stats.var)),
    )?;
    out.insert(triple.count.clone(), TensorEntry::count(stats.count as i64))?;
    Ok(())
}
