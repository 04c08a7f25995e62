//! Linear-path sweeps between two checkpoints and barrier measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffers::BufferPolicy;
use crate::container::{ensure_compatible, Checkpoint};
use crate::error::{Error, Result};
use crate::merge::interpolate_with;
use crate::metrics::harmonic_mean;
use crate::runtime::{evaluate, ArchSpec, Dataset};

pub const DEFAULT_STEPS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCurve {
    pub tag: String,
    /// Accuracy in percent, aligned with the sweep's lambdas.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub lambdas: Vec<f64>,
    pub per_domain: Vec<DomainCurve>,
    pub harmonic: Vec<f64>,
    pub barrier: f64,
    pub meta: BTreeMap<String, String>,
}

/// `i / (steps − 1)` for `i = 0..steps`.
pub fn lambda_grid(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::Domain(format!("a sweep needs at least 2 steps, got {steps}")));
    }
    Ok((0..steps).map(|i| i as f64 / (steps - 1) as f64).collect())
}

/// Largest shortfall of `values` below the straight chord joining its first
/// and last entries, clamped at zero.
pub fn barrier_of(lambdas: &[f64], values: &[f64]) -> f64 {
    let (Some(&h0), Some(&h1)) = (values.first(), values.last()) else {
        return 0.0;
    };
    lambdas
        .iter()
        .zip(values)
        .map(|(&l, &h)| {
            let chord = if h0 == h1 { h0 } else { h0 + l * (h1 - h0) };
            chord - h
        })
        .fold(0.0, f64::max)
}

pub fn barrier(report: &SweepReport) -> f64 {
    barrier_of(&report.lambdas, &report.harmonic)
}

/// The model at `λ` on the path `λ·a + (1−λ)·b`; the endpoints are the
/// inputs themselves, buffers included.
pub fn path_point(a: &Checkpoint, b: &Checkpoint, lambda: f64, policy: BufferPolicy) -> Result<Checkpoint> {
    if lambda == 0.0 {
        Ok(b.clone())
    } else if lambda == 1.0 {
        Ok(a.clone())
    } else {
        interpolate_with(a, b, lambda, policy)
    }
}

/// Evaluates every domain at each point of a uniform `λ` grid.
pub fn sweep(
    a: &Checkpoint,
    b: &Checkpoint,
    domains: &[(String, Dataset)],
    arch: &ArchSpec,
    steps: usize,
    policy: BufferPolicy,
) -> Result<SweepReport> {
    let lambdas = lambda_grid(steps)?;
    if domains.is_empty() {
        return Err(Error::Domain("a sweep needs at least one evaluation domain".into()));
    }
    ensure_compatible([a, b])?;
    arch.check_checkpoint(a)?;

    let rows: Vec<Vec<f64>> = lambdas
        .par_iter()
        .map(|&lambda| {
            let at = |e: Error| Error::AtLambda { lambda, source: Box::new(e) };
            let model = path_point(a, b, lambda, policy).map_err(at)?;
            domains
                .iter()
                .map(|(_, d)| evaluate(arch, &model, d).map(|e| e.accuracy).map_err(at))
                .collect()
        })
        .collect::<Result<_>>()?;

    let per_domain = domains
        .iter()
        .enumerate()
        .map(|(k, (tag, _))| DomainCurve { tag: tag.clone(), values: rows.iter().map(|r| r[k]).collect() })
        .collect();
    let harmonic = rows.iter().map(|r| harmonic_mean(r)).collect::<Result<Vec<_>>>()?;
    let mut meta = BTreeMap::new();
    meta.insert("buffers".into(), policy.as_str().into());
    meta.insert("steps".into(), steps.to_string());
    meta.insert("arch".into(), serde_json::to_string(arch)?);
    let barrier = barrier_of(&lambdas, &harmonic);
    Ok(SweepReport { lambdas, per_domain, harmonic, barrier, meta })
}

impl SweepReport {
    /// `lambda,<tags>,harmonic` with four decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda");
        for d in &self.per_domain {
            s.push(',');
            s.push_str(&d.tag);
        }
        s.push_str(",harmonic\n");
        for (i, l) in self.lambdas.iter().enumerate() {
            let _ = write!(s, "{l:.4}");
            for d in &self.per_domain {
                let _ = write!(s, ",{:.4}", d.values[i]);
            }
            let _ = writeln!(s, ",{:.4}", self.harmonic[i]);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `sweep.json` and `sweep.csv` into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("sweep.json");
        std::fs::write(&json, self.to_json()? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("sweep.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }
}
