//! Asymmetric Hausdorff distance and the transfer bound
//! `mean_{𝒟_l} ρ ≤ max_{𝒟_s} ρ + K ℋ_a(𝒟_l, 𝒟_s)` with an empirical `K`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::losses::{FrozenNet, Model};
use crate::nn::{Head, Network};
use crate::{Error, Result};

/// Relative slack on `lhs <= rhs` that absorbs floating-point rounding in
/// `K · ψ`.
pub const BOUND_RTOL: f64 = 1e-12;

pub type Embed = dyn Fn(&[f64]) -> Vec<f64> + Sync;

/// Euclidean distance after an optional embedding.
pub struct MetricSpace<'a> {
    embed: Option<&'a Embed>,
}

impl<'a> MetricSpace<'a> {
    pub fn identity() -> Self {
        MetricSpace { embed: None }
    }

    pub fn embedded(embed: &'a Embed) -> Self {
        MetricSpace { embed: Some(embed) }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        match self.embed {
            Some(f) => f(x),
            None => x.to_vec(),
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.embed {
            Some(f) => euclidean(&f(a), &f(b)),
            None => euclidean(a, b),
        }
    }

    fn embed_all(&self, pts: &[Vec<f64>]) -> Vec<Vec<f64>> {
        pts.par_iter().map(|p| self.embed(p)).collect()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hausdorff {
    pub value: f64,
    /// Index in `A` of the farthest point.
    pub witness_a: usize,
    /// Index in `B` of that point's nearest neighbour.
    pub witness_b: usize,
}

/// Nearest point of `b` for each point of `a`: `(index, distance)`, first
/// index on ties.
fn nearest(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<(usize, f64)> {
    a.par_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in b.iter().enumerate() {
                let d = euclidean(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

fn hausdorff_from(nn: &[(usize, f64)]) -> Hausdorff {
    let mut h = Hausdorff {
        value: f64::NEG_INFINITY,
        witness_a: 0,
        witness_b: 0,
    };
    for (i, &(j, d)) in nn.iter().enumerate() {
        if d > h.value {
            h = Hausdorff {
                value: d,
                witness_a: i,
                witness_b: j,
            };
        }
    }
    h
}

/// `ℋ_a(A, B) = max_{a∈A} min_{b∈B} ψ(a, b)` by brute force.
pub fn asymmetric_hausdorff(a: &[Vec<f64>], b: &[Vec<f64>], metric: &MetricSpace<'_>) -> Result<Hausdorff> {
    if a.is_empty() {
        return Err(Error::EmptySet("first"));
    }
    if b.is_empty() {
        return Err(Error::EmptySet("second"));
    }
    let (ea, eb) = (metric.embed_all(a), metric.embed_all(b));
    Ok(hausdorff_from(&nearest(&ea, &eb)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lipschitz {
    pub k: f64,
    /// Pairs skipped because `ψ = 0`.
    pub skipped: usize,
}

/// `K = max |ρ₁ - ρ₂| / ψ` over pairs `(ρ₁, ρ₂, ψ)` with `ψ > 0`.
pub fn empirical_lipschitz(pairs: &[(f64, f64, f64)]) -> Result<Lipschitz> {
    let mut k: Option<f64> = None;
    let mut skipped = 0;
    for &(r1, r2, d) in pairs {
        if d > 0.0 {
            let q = (r1 - r2).abs() / d;
            k = Some(k.map_or(q, |m: f64| m.max(q)));
        } else {
            skipped += 1;
        }
    }
    match k {
        Some(k) => Ok(Lipschitz { k, skipped }),
        None => Err(Error::InvalidArgument(
            "every pair has zero distance; the Lipschitz constant is undefined".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Mean of ρ over the source set.
    pub lhs: f64,
    /// Max of ρ over the target set.
    pub max_term: f64,
    pub hausdorff: f64,
    /// Empirical constant over the nearest-neighbour pairs; infinite if a
    /// zero-distance pair has different losses.
    pub lipschitz: f64,
    pub rhs: f64,
    pub holds: bool,
    /// Source and target indices realizing the Hausdorff distance.
    pub hausdorff_witness: (usize, usize),
    /// Target index realizing the max term.
    pub max_witness: usize,
    pub zero_distance_pairs: usize,
}

impl BoundReport {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Evaluates both sides of the bound for a per-point loss `rho`.
pub fn check_prop3_with(
    rho: &(dyn Fn(&[f64]) -> f64 + Sync),
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    metric: &MetricSpace<'_>,
) -> Result<BoundReport> {
    if source.is_empty() {
        return Err(Error::EmptySet("source"));
    }
    if target.is_empty() {
        return Err(Error::EmptySet("target"));
    }
    let rl: Vec<f64> = source.par_iter().map(|p| rho(p)).collect();
    let rs: Vec<f64> = target.par_iter().map(|p| rho(p)).collect();
    let (es, et) = (metric.embed_all(source), metric.embed_all(target));
    let nn = nearest(&es, &et);
    let h = hausdorff_from(&nn);

    let pairs: Vec<(f64, f64, f64)> = nn.iter().enumerate().map(|(i, &(j, d))| (rl[i], rs[j], d)).collect();
    let zero_mismatch = pairs.iter().any(|&(a, b, d)| d == 0.0 && a != b);
    let (k, zero_pairs) = match empirical_lipschitz(&pairs) {
        Ok(l) => (if zero_mismatch { f64::INFINITY } else { l.k }, l.skipped),
        // every source point coincides with a target point
        Err(_) => (if zero_mismatch { f64::INFINITY } else { 0.0 }, pairs.len()),
    };

    let lhs = rl.iter().sum::<f64>() / rl.len() as f64;
    let mut max_witness = 0;
    for (j, &v) in rs.iter().enumerate() {
        if v > rs[max_witness] {
            max_witness = j;
        }
    }
    let max_term = rs[max_witness];
    let rhs = if h.value == 0.0 { max_term } else { max_term + k * h.value };
    let holds = lhs <= rhs + BOUND_RTOL * rhs.abs().max(lhs.abs());
    Ok(BoundReport {
        lhs,
        max_term,
        hausdorff: h.value,
        lipschitz: k,
        rhs,
        holds,
        hausdorff_witness: (h.witness_a, h.witness_b),
        max_witness,
        zero_distance_pairs: zero_pairs,
    })
}

/// The bound with `ρ(x) = Σᵢ (tᵢ(x) - sᵢ(x))²` on the source heads.
pub fn check_prop3(
    teacher: &Network,
    student: &Network,
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    metric: &MetricSpace<'_>,
) -> Result<BoundReport> {
    let shape = teacher.input_shape().to_vec();
    let rho = |x: &[f64]| -> f64 {
        let mut s = vec![1];
        s.extend(&shape);
        let xt = jacmatch_autodiff::Tensor::new(x.to_vec(), &s).expect("input matches network shape");
        let t = FrozenNet {
            net: teacher,
            head: Head::Source,
        }
        .logits(&xt)
        .expect("teacher forward");
        let o = FrozenNet {
            net: student,
            head: Head::Source,
        }
        .logits(&xt)
        .expect("student forward");
        t.data().iter().zip(o.data()).map(|(a, b)| (a - b).powi(2)).sum()
    };
    for p in source.iter().chain(target) {
        if p.len() != teacher.input_len() || p.len() != student.input_len() {
            return Err(Error::InvalidArgument(format!(
                "point of length {} does not fit the networks",
                p.len()
            )));
        }
    }
    if teacher.outputs(Head::Source)? != student.outputs(Head::Source)? {
        return Err(Error::InvalidArgument("teacher and student output counts differ".into()));
    }
    check_prop3_with(&rho, source, target, metric)
}

/// `ℋ_a(𝒟_l, 𝒟_s)` and `ℋ_a(𝒟_l, 𝒟_s ∪ extra)`.
pub fn superset_monotonicity(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    extra: &[Vec<f64>],
    metric: &MetricSpace<'_>,
) -> Result<(f64, f64)> {
    let before = asymmetric_hausdorff(source, target, metric)?.value;
    let mut union = target.to_vec();
    union.extend_from_slice(extra);
    let after = asymmetric_hausdorff(source, &union, metric)?.value;
    Ok((before, after))
}
