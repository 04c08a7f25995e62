//! Permutation alignment by weight matching.
//!
//! Hidden units of a dense(+BN) stack can be reordered without changing the
//! network function. [`weight_matching`] searches, by coordinate ascent over
//! per-layer assignment problems, for the reordering of a target checkpoint
//! that maximizes its inner product with a reference checkpoint.

use serde::{Deserialize, Serialize};

use crate::buffers::BufferPolicy;
use crate::container::{ensure_compatible, Checkpoint, Role, TensorData};
use crate::error::{Error, Result};
use crate::lap::{assignment_profit, solve_lap, Permutation};
use crate::matrix::{dot, Matrix};
use crate::merge::interpolate_with;
use crate::runtime::{ArchSpec, HiddenGroup};

pub const DEFAULT_MAX_SWEEPS: usize = 100;

/// One permutation per hidden group of an architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSet {
    pub per_layer: Vec<Permutation>,
}

impl PermutationSet {
    pub fn identity(arch: &ArchSpec) -> Self {
        PermutationSet { per_layer: arch.hidden_groups().iter().map(|g| Permutation::identity(g.width)).collect() }
    }

    pub fn is_identity(&self) -> bool {
        self.per_layer.iter().all(Permutation::is_identity)
    }

    pub fn inverse(&self) -> Self {
        PermutationSet { per_layer: self.per_layer.iter().map(Permutation::inverse).collect() }
    }

    /// Layer-wise `self ∘ other`.
    pub fn compose(&self, other: &PermutationSet) -> Self {
        PermutationSet { per_layer: self.per_layer.iter().zip(&other.per_layer).map(|(p, q)| p.compose(q)).collect() }
    }

    pub fn check(&self, arch: &ArchSpec) -> Result<()> {
        let groups = arch.hidden_groups();
        if groups.len() != self.per_layer.len() {
            return Err(Error::Validation(format!(
                "{} permutations for {} hidden layers",
                self.per_layer.len(),
                groups.len()
            )));
        }
        for (l, (g, p)) in groups.iter().zip(&self.per_layer).enumerate() {
            if g.width != p.len() {
                return Err(Error::Validation(format!(
                    "hidden layer {l} has width {} but its permutation has length {}",
                    g.width,
                    p.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub perms: PermutationSet,
    /// Objective before the first sweep, then after each sweep.
    pub objective: Vec<f64>,
    pub sweeps: usize,
    /// Whether the last sweep changed nothing.
    pub converged: bool,
}

/// Vectors indexed by the units of one hidden group.
fn unit_vectors(g: &HiddenGroup, with_stats: bool) -> Vec<String> {
    let mut v = vec![g.bias.clone()];
    if let Some(bn) = &g.bn {
        let stats: &[&str] = if with_stats { &["running_mean", "running_var"] } else { &[] };
        for s in ["weight", "bias"].iter().chain(stats) {
            v.push(format!("{bn}.{s}"));
        }
    }
    v
}

fn matrix_of(ckpt: &Checkpoint, name: &str) -> Result<Matrix> {
    let e = ckpt.require(name)?;
    let [r, c] = e.shape[..] else {
        return Err(Error::Validation(format!("{name} is not a matrix")));
    };
    Ok(Matrix::from_vec(r, c, e.data.to_f64()))
}

fn gather_rows(m: &Matrix, p: &Permutation) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(p.map()[i], j)])
}

fn gather_cols(m: &Matrix, p: &Permutation) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, p.map()[j])])
}

fn check_pair(reference: &Checkpoint, target: &Checkpoint, arch: &ArchSpec) -> Result<()> {
    arch.check_checkpoint(reference)?;
    arch.check_checkpoint(target)?;
    ensure_compatible([reference, target])
}

/// Profit of placing target unit `j` in slot `i` of group `l`, given the
/// other groups' current permutations.
fn profit_matrix(
    reference: &Checkpoint,
    target: &Checkpoint,
    groups: &[HiddenGroup],
    perms: &[Permutation],
    l: usize,
) -> Result<Matrix> {
    let g = &groups[l];
    let mut tw = matrix_of(target, &g.weight)?;
    if l > 0 {
        tw = gather_cols(&tw, &perms[l - 1]);
    }
    let mut profit = matrix_of(reference, &g.weight)?.matmul_t(&tw);

    let mut tn = matrix_of(target, &g.next_weight)?;
    if l + 1 < groups.len() {
        tn = gather_rows(&tn, &perms[l + 1]);
    }
    let next = matrix_of(reference, &g.next_weight)?.t_matmul(&tn);

    // Running statistics stay out of the profit: their positive,
    // large-magnitude outer products reward sorting units by variance rather
    // than pairing matching units.
    let vectors: Vec<(Vec<f64>, Vec<f64>)> = unit_vectors(g, false)
        .iter()
        .map(|n| Ok((reference.require(n)?.data.to_f64(), target.require(n)?.data.to_f64())))
        .collect::<Result<_>>()?;
    for i in 0..g.width {
        for j in 0..g.width {
            let outer: f64 = vectors.iter().map(|(r, t)| r[i] * t[j]).sum();
            profit[(i, j)] += next[(i, j)] + outer;
        }
    }
    Ok(profit)
}

/// `Σ ⟨reference, permuted target⟩` over every float parameter; tensors the
/// permutations leave alone add a constant.
pub fn matching_objective(
    reference: &Checkpoint,
    target: &Checkpoint,
    arch: &ArchSpec,
    perms: &PermutationSet,
) -> Result<f64> {
    let permuted = apply_permutations(target, perms, arch)?;
    let mut total = 0.0;
    for (name, e) in reference.iter() {
        if e.role == Role::Param && e.dtype().is_float() {
            total += dot(&e.data.to_f64(), &permuted.require(name)?.data.to_f64());
        }
    }
    Ok(total)
}

/// Coordinate ascent over hidden groups in ascending order. A group's
/// permutation changes only when the assignment optimum strictly beats the
/// current one, so ties keep the current (initially identity) ordering.
pub fn weight_matching_detailed(
    reference: &Checkpoint,
    target: &Checkpoint,
    arch: &ArchSpec,
    max_sweeps: usize,
) -> Result<MatchOutcome> {
    check_pair(reference, target, arch)?;
    let groups = arch.hidden_groups();
    let mut perms = PermutationSet::identity(arch);
    let mut objective = vec![matching_objective(reference, target, arch, &perms)?];
    let mut sweeps = 0;
    let mut converged = groups.is_empty();
    while sweeps < max_sweeps && !converged {
        sweeps += 1;
        let mut changed = false;
        for l in 0..groups.len() {
            let profit = profit_matrix(reference, target, &groups, &perms.per_layer, l)?;
            let candidate = solve_lap(&profit)?;
            let current = assignment_profit(&profit, &perms.per_layer[l]);
            let best = assignment_profit(&profit, &candidate);
            let slack = 1e-12 * profit.max_abs().max(1.0) * groups[l].width as f64;
            if candidate != perms.per_layer[l] && best > current + slack {
                perms.per_layer[l] = candidate;
                changed = true;
            }
        }
        objective.push(matching_objective(reference, target, arch, &perms)?);
        converged = !changed;
    }
    Ok(MatchOutcome { perms, objective, sweeps, converged })
}

pub fn weight_matching(
    reference: &Checkpoint,
    target: &Checkpoint,
    arch: &ArchSpec,
    max_sweeps: usize,
) -> Result<PermutationSet> {
    Ok(weight_matching_detailed(reference, target, arch, max_sweeps)?.perms)
}

fn permute_vector(ckpt: &mut Checkpoint, name: &str, p: &Permutation) -> Result<()> {
    let e = ckpt.get_mut(name).ok_or_else(|| Error::Validation(format!("missing tensor {name}")))?;
    e.data = match &e.data {
        TensorData::F32(v) => TensorData::F32(p.apply(v)),
        TensorData::F64(v) => TensorData::F64(p.apply(v)),
        TensorData::I64(v) => TensorData::I64(p.apply(v)),
    };
    Ok(())
}

fn permute_matrix(ckpt: &mut Checkpoint, name: &str, p: &Permutation, rows: bool) -> Result<()> {
    let e = ckpt.get_mut(name).ok_or_else(|| Error::Validation(format!("missing tensor {name}")))?;
    let [r, c] = e.shape[..] else {
        return Err(Error::Validation(format!("{name} is not a matrix")));
    };
    let index = |i: usize, j: usize| if rows { p.map()[i] * c + j } else { i * c + p.map()[j] };
    fn gather<T: Copy>(v: &[T], r: usize, c: usize, index: impl Fn(usize, usize) -> usize) -> Vec<T> {
        (0..r * c).map(|k| v[index(k / c, k % c)]).collect()
    }
    e.data = match &e.data {
        TensorData::F32(v) => TensorData::F32(gather(v, r, c, index)),
        TensorData::F64(v) => TensorData::F64(gather(v, r, c, index)),
        TensorData::I64(v) => TensorData::I64(gather(v, r, c, index)),
    };
    Ok(())
}

/// Reorders the hidden units of `ckpt`. Values are moved, never recomputed,
/// so the result has the same dtypes and the same network function.
pub fn apply_permutations(ckpt: &Checkpoint, perms: &PermutationSet, arch: &ArchSpec) -> Result<Checkpoint> {
    perms.check(arch)?;
    arch.check_checkpoint(ckpt)?;
    let mut out = ckpt.clone();
    for (g, p) in arch.hidden_groups().iter().zip(&perms.per_layer) {
        if p.is_identity() {
            continue;
        }
        permute_matrix(&mut out, &g.weight, p, true)?;
        for name in unit_vectors(g, true) {
            permute_vector(&mut out, &name, p)?;
        }
        permute_matrix(&mut out, &g.next_weight, p, false)?;
    }
    Ok(out)
}

/// Aligns `target` to `reference`, then interpolates `λ·reference + (1−λ)·π(target)`.
pub fn align_and_merge(
    reference: &Checkpoint,
    target: &Checkpoint,
    arch: &ArchSpec,
    lambda: f64,
    policy: BufferPolicy,
) -> Result<(Checkpoint, PermutationSet)> {
    let perms = weight_matching(reference, target, arch, DEFAULT_MAX_SWEEPS)?;
    let aligned = apply_permutations(target, &perms, arch)?;
    Ok((interpolate_with(reference, &aligned, lambda, policy)?, perms))
}
