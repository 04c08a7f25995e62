//! Linear merging of learnable parameters.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::buffers::{merge_checkpoint_buffers, BnTriple, BufferPolicy};
use crate::container::{ensure_compatible, Checkpoint, Role, TensorData, TensorEntry};
use crate::error::{Error, Result};

/// Tolerance on `Σ weights == 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    /// Two-model interpolation `λ·A + (1−λ)·B`.
    Lambda(f64),
    /// Convex combination, one weight per input.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSpec {
    pub weights: Weights,
    /// Only tensors whose names start with one of these are merged; empty means all.
    pub prefixes: Vec<String>,
    pub buffer_policy: BufferPolicy,
}

impl Default for MergeSpec {
    fn default() -> Self {
        MergeSpec {
            weights: Weights::Lambda(0.5),
            prefixes: Vec::new(),
            buffer_policy: BufferPolicy::Gaussian,
        }
    }
}

impl MergeSpec {
    pub fn resolve_weights(&self, inputs: usize) -> Result<Vec<f64>> {
        match &self.weights {
            Weights::Lambda(lambda) => {
                if inputs != 2 {
                    return Err(Error::Domain(format!(
                        "lambda interpolation takes exactly 2 checkpoints, got {inputs}"
                    )));
                }
                check_lambda(*lambda)?;
                Ok(vec![*lambda, 1.0 - lambda])
            }
            Weights::Explicit(w) => {
                check_weights(w, inputs)?;
                Ok(w.clone())
            }
        }
    }

    fn selects(&self, name: &str) -> bool {
        self.prefixes.is_empty() || self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

fn check_weights(w: &[f64], inputs: usize) -> Result<()> {
    if inputs < 2 {
        return Err(Error::Domain(format!("merging needs at least 2 checkpoints, got {inputs}")));
    }
    if w.len() != inputs {
        return Err(Error::Domain(format!("{} weights for {inputs} checkpoints", w.len())));
    }
    if let Some(x) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::Domain(format!("weights must be finite and non-negative, got {x}")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Domain(format!("weights must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Weighted combination of corresponding param tensors.
///
/// Accumulates in f64 and rounds once to the stored dtype. A weight vector
/// that puts everything on one input copies that input's tensor. Results are
/// clamped to the range spanned by the contributing inputs.
fn combine(entries: &[&TensorEntry], weights: &[f64]) -> TensorEntry {
    let like = entries[0];
    if let Some(j) = one_hot(weights) {
        return entries[j].clone();
    }
    let values: Vec<Vec<f64>> = entries.iter().map(|e| e.data.to_f64()).collect();
    let mut out = vec![0.0f64; like.data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (v, &w) in values.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            acc += w * v[i];
            lo = lo.min(v[i]);
            hi = hi.max(v[i]);
        }
        *o = if acc.is_nan() { acc } else { acc.clamp(lo, hi) };
    }
    TensorEntry::new(like.shape.clone(), TensorData::from_f64(like.dtype(), &out), like.role)
}

fn one_hot(weights: &[f64]) -> Option<usize> {
    let mut hit = None;
    for (j, &w) in weights.iter().enumerate() {
        if w == 1.0 && hit.is_none() {
            hit = Some(j);
        } else if w != 0.0 {
            return None;
        }
    }
    hit
}

fn format_weights(w: &[f64]) -> String {
    w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn provenance(inputs: &[&Checkpoint], weights: &[f64], spec: &MergeSpec) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    // Keys every input agrees on (arch id and the like) carry over.
    if let Some(first) = inputs.first() {
        for (k, v) in &first.meta {
            if !k.starts_with("merge.") && inputs.iter().all(|c| c.meta.get(k) == Some(v)) {
                meta.insert(k.clone(), v.clone());
            }
        }
    }
    let sources: Vec<String> = inputs
        .iter()
        .enumerate()
        .map(|(j, c)| c.meta.get("domain").cloned().unwrap_or_else(|| format!("#{j}")))
        .collect();
    meta.insert("merge.sources".into(), sources.join(","));
    meta.insert("merge.weights".into(), format_weights(weights));
    meta.insert("merge.buffers".into(), spec.buffer_policy.as_str().into());
    if let Weights::Lambda(l) = spec.weights {
        meta.insert("merge.lambda".into(), l.to_string());
    }
    if !spec.prefixes.is_empty() {
        meta.insert("merge.prefixes".into(), spec.prefixes.join(","));
    }
    meta
}

/// Merges params selected by `spec.prefixes` and the matching buffers. Tensors
/// outside the selection are absent from the result.
fn merge_selected(inputs: &[&Checkpoint], spec: &MergeSpec) -> Result<Checkpoint> {
    let weights = spec.resolve_weights(inputs.len())?;
    ensure_compatible(inputs.iter().copied())?;
    let first = inputs[0];

    let names: Vec<&String> = first
        .iter()
        .filter(|(n, e)| e.role == Role::Param && spec.selects(n))
        .map(|(n, _)| n)
        .collect();
    let merged: Vec<(String, TensorEntry)> = names
        .par_iter()
        .map(|name| {
            let entries: Vec<&TensorEntry> = inputs.iter().map(|c| c.get(name).unwrap()).collect();
            ((*name).clone(), combine(&entries, &weights))
        })
        .collect();

    let mut out = Checkpoint::new();
    for (name, entry) in merged {
        out.insert(name, entry)?;
    }
    merge_checkpoint_buffers(inputs, spec.buffer_policy, &mut out, &|n| spec.selects(n))?;
    out.meta = provenance(inputs, &weights, spec);
    Ok(out)
}

/// Merges whole checkpoints into one. Ignores `spec.prefixes`; see [`prefix_merge`].
pub fn merge(inputs: &[&Checkpoint], spec: &MergeSpec) -> Result<Checkpoint> {
    let full = MergeSpec { prefixes: Vec::new(), ..spec.clone() };
    merge_selected(inputs, &full)
}

/// `λ·a + (1−λ)·b` on params, Gaussian pooling on BN buffers.
pub fn interpolate(a: &Checkpoint, b: &Checkpoint, lambda: f64) -> Result<Checkpoint> {
    interpolate_with(a, b, lambda, BufferPolicy::Gaussian)
}

pub fn interpolate_with(a: &Checkpoint, b: &Checkpoint, lambda: f64, policy: BufferPolicy) -> Result<Checkpoint> {
    merge(
        &[a, b],
        &MergeSpec { weights: Weights::Lambda(lambda), prefixes: Vec::new(), buffer_policy: policy },
    )
}

pub fn midpoint(a: &Checkpoint, b: &Checkpoint) -> Result<Checkpoint> {
    interpolate(a, b, 0.5)
}

pub fn midpoint_with(a: &Checkpoint, b: &Checkpoint, policy: BufferPolicy) -> Result<Checkpoint> {
    interpolate_with(a, b, 0.5, policy)
}

pub fn weighted_merge(inputs: &[(&Checkpoint, f64)]) -> Result<Checkpoint> {
    weighted_merge_with(inputs, BufferPolicy::Gaussian)
}

pub fn weighted_merge_with(inputs: &[(&Checkpoint, f64)], policy: BufferPolicy) -> Result<Checkpoint> {
    let ckpts: Vec<&Checkpoint> = inputs.iter().map(|(c, _)| *c).collect();
    let weights: Vec<f64> = inputs.iter().map(|(_, w)| *w).collect();
    merge(
        &ckpts,
        &MergeSpec { weights: Weights::Explicit(weights), prefixes: Vec::new(), buffer_policy: policy },
    )
}

/// Merges only tensors under `spec.prefixes` and returns one checkpoint per
/// input: shared merged values under the prefixes, the input's own values
/// elsewhere. A BN layer counts as selected when any member of its triple is.
pub fn prefix_merge(inputs: &[&Checkpoint], spec: &MergeSpec) -> Result<Vec<Checkpoint>> {
    if spec.prefixes.is_empty() {
        return Err(Error::Domain("prefix merge needs at least one prefix".into()));
    }
    let shared = merge_selected(inputs, spec)?;

    let unmatched: Vec<&String> = spec
        .prefixes
        .iter()
        .filter(|p| !inputs[0].names().any(|n| n.starts_with(p.as_str())))
        .collect();

    let mut outputs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut out = (*input).clone();
        for (name, entry) in shared.iter() {
            out.insert(name.clone(), entry.clone())?;
        }
        for (k, v) in &shared.meta {
            if k.starts_with("merge.") {
                out.meta.insert(k.clone(), v.clone());
            }
        }
        if !unmatched.is_empty() {
            let list: Vec<&str> = unmatched.iter().map(|s| s.as_str()).collect();
            out.meta.insert(
                "merge.warning".into(),
                format!("prefixes matched no tensors: {}", list.join(",")),
            );
        }
        outputs.push(out);
    }
    Ok(outputs)
}

/// Names of tensors that [`prefix_merge`] would replace.
pub fn selected_names(ckpt: &Checkpoint, prefixes: &[String]) -> Vec<String> {
    let spec = MergeSpec { prefixes: prefixes.to_vec(), ..MergeSpec::default() };
    let mut out: Vec<String> = Vec::new();
    for p in ckpt.bn_prefixes() {
        let t = BnTriple::new(&p);
        if [&t.mean, &t.var, &t.count].iter().any(|n| spec.selects(n)) {
            out.extend([t.mean, t.var, t.count]);
        }
    }
    for (n, _) in ckpt.iter() {
        if spec.selects(n) && !out.contains(n) {
            out.push(n.clone());
        }
    }
    out.sort();
    out
}
