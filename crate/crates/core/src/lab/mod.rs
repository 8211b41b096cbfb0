//! Noisy-input expectations against their Jacobian expansions.
//!
//! Inputs are flat vectors `x ∈ ℝ^D`; models receive batches `(N, D)`.
//! Ground truth in `D ≤ 4` is tensor-product Gauss–Hermite quadrature; Monte
//! Carlo draws sample `i` from its own ChaCha stream `i` under the run seed,
//! so estimates do not depend on the thread count.

mod quadrature;

use jacmatch_autodiff::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub use quadrature::gauss_hermite;

use crate::losses::{
    distill_ce_with_jacobian, jacobian_norm_penalty, match_activations_sq, match_jacobians_sq, Family,
    JacobianStrategy, Model,
};
use crate::nn::{Head, Network};
use crate::{Error, Result};

/// Models the lab evaluates from worker threads.
pub type SyncModel<'a> = &'a (dyn Model + Sync);

/// Largest input dimension for tensor-product quadrature.
pub const MAX_QUADRATURE_DIM: usize = 4;
/// Smallest accepted quadrature order per dimension.
pub const MIN_QUADRATURE_ORDER: usize = 20;
/// Smallest ratio between the largest and smallest σ of a scaling study.
pub const MIN_SIGMA_SPAN: f64 = 8.0;
/// Residuals below this are treated as quadrature round-off.
pub const PRECISION_FLOOR: f64 = 1e-12;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum NoiseKind {
    GaussianIid,
    /// Isotropic Gaussian conditioned on `‖ξ‖ ≤ radius`.
    Truncated { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub kind: NoiseKind,
}

impl NoiseModel {
    pub fn gaussian(sigma: f64) -> Self {
        NoiseModel {
            sigma,
            kind: NoiseKind::GaussianIid,
        }
    }

    pub fn truncated(sigma: f64, radius: f64) -> Self {
        NoiseModel {
            sigma,
            kind: NoiseKind::Truncated { radius },
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if let NoiseKind::Truncated { radius } = self.kind {
            if !(radius > 0.0) {
                return Err(Error::InvalidArgument(format!("truncation radius must be > 0, got {radius}")));
            }
        }
        Ok(())
    }

    /// Per-coordinate variance of the noise in dimension `d`.
    pub fn coordinate_variance(&self, d: usize) -> f64 {
        match self.kind {
            NoiseKind::GaussianIid => self.sigma * self.sigma,
            NoiseKind::Truncated { radius } => truncated_second_moment(self.sigma, radius, d),
        }
    }
}

/// `E[ξ₁²]` for `ξ ~ N(0, σ²I_d)` conditioned on `‖ξ‖ ≤ r`:
/// `σ² F_{χ²(d+2)}(a²) / F_{χ²(d)}(a²)` with `a = r/σ`.
pub fn truncated_second_moment(sigma: f64, radius: f64, d: usize) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let a2 = (radius / sigma).powi(2);
    let num = ChiSquared::new(d as f64 + 2.0).expect("positive dof").cdf(a2);
    let den = ChiSquared::new(d as f64).expect("positive dof").cdf(a2);
    if den == 0.0 {
        // deep truncation: the conditioned radius is ~uniform in the ball
        return radius * radius / (d as f64 + 2.0);
    }
    sigma * sigma * num / den
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Method {
    MonteCarlo { samples: usize, seed: u64 },
    GaussHermite { order: usize },
}

/// Loss whose noisy expectation is compared with its expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum LossKind {
    /// `Σᵢ (tᵢ - sᵢ)²`; expansion adds `σ² Σᵢ ‖∇tᵢ - ∇sᵢ‖²`.
    Distill,
    /// `Σᵢ (yᵢ - sᵢ)²`; expansion adds `σ² Σᵢ ‖∇sᵢ‖²`.
    Penalty { target: Vec<f64> },
    /// `-Σᵢ tᵢ log sᵢ` on softened outputs; expansion adds
    /// `-σ² Σᵢ (∇tᵢ · ∇sᵢ) / sᵢ`.
    CeDistill { temperature: f64 },
    /// `-Σᵢ yᵢ log sᵢ` on softened outputs; expansion adds
    /// `σ² Σᵢ yᵢ ‖∇sᵢ‖² / sᵢ²`.
    CePenalty { target: Vec<f64>, temperature: f64 },
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Distill => "squared-distill",
            LossKind::Penalty { .. } => "squared-penalty",
            LossKind::CeDistill { .. } => "ce-distill",
            LossKind::CePenalty { .. } => "ce-penalty",
        }
    }

    fn needs_teacher(&self) -> bool {
        matches!(self, LossKind::Distill | LossKind::CeDistill { .. })
    }
}

fn softmax_row(v: &[f64], t: f64) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&a| ((a - mx) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|a| a / s).collect()
}

fn log_softmax_row(v: &[f64], t: f64) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|&a| ((a - mx) / t).exp()).sum::<f64>().ln();
    v.iter().map(|&a| (a - mx) / t - lse).collect()
}

/// Teacher/student pair under study; the teacher is unused by penalty kinds.
#[derive(Clone, Copy)]
pub struct Pair<'a> {
    pub teacher: Option<SyncModel<'a>>,
    pub student: SyncModel<'a>,
}

impl<'a> Pair<'a> {
    pub fn new(teacher: SyncModel<'a>, student: SyncModel<'a>) -> Self {
        Pair {
            teacher: Some(teacher),
            student,
        }
    }

    pub fn student_only(student: SyncModel<'a>) -> Self {
        Pair { teacher: None, student }
    }

    fn teacher(&self, kind: &LossKind) -> Result<SyncModel<'a>> {
        self.teacher
            .ok_or_else(|| Error::InvalidArgument(format!("{} needs a teacher", kind.label())))
    }
}

fn logits_of(m: &dyn Model, points: &[f64], d: usize) -> Result<Vec<f64>> {
    let n = points.len() / d;
    Ok(m.logits(&Tensor::new(points.to_vec(), &[n, d])?)?.to_vec())
}

/// Loss at each row of `points` (`N x d`, flat).
pub fn pointwise_losses(kind: &LossKind, pair: Pair<'_>, points: &[f64], d: usize) -> Result<Vec<f64>> {
    let n = points.len() / d;
    let s = logits_of(pair.student, points, d)?;
    let k = s.len() / n;
    let t = if kind.needs_teacher() {
        let t = logits_of(pair.teacher(kind)?, points, d)?;
        if t.len() != s.len() {
            return Err(Error::InvalidArgument(format!(
                "teacher has {} outputs, student {k}",
                t.len() / n
            )));
        }
        t
    } else {
        Vec::new()
    };
    let check_target = |y: &[f64]| {
        if y.len() == k {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("target has {} entries, model {k} outputs", y.len())))
        }
    };
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let sr = &s[r * k..(r + 1) * k];
        let v = match kind {
            LossKind::Distill => {
                let tr = &t[r * k..(r + 1) * k];
                tr.iter().zip(sr).map(|(a, b)| (a - b).powi(2)).sum()
            }
            LossKind::Penalty { target } => {
                check_target(target)?;
                target.iter().zip(sr).map(|(a, b)| (a - b).powi(2)).sum()
            }
            LossKind::CeDistill { temperature } => {
                let tp = softmax_row(&t[r * k..(r + 1) * k], *temperature);
                let ls = log_softmax_row(sr, *temperature);
                -tp.iter().zip(&ls).map(|(a, b)| a * b).sum::<f64>()
            }
            LossKind::CePenalty { target, temperature } => {
                check_target(target)?;
                let ls = log_softmax_row(sr, *temperature);
                -target.iter().zip(&ls).map(|(a, b)| a * b).sum::<f64>()
            }
        };
        out.push(v);
    }
    Ok(out)
}

/// Losses at many points, evaluated in fixed-size chunks across threads and
/// returned in point order.
fn losses_parallel(kind: &LossKind, pair: Pair<'_>, points: &[f64], d: usize) -> Result<Vec<f64>> {
    let chunks: Vec<Result<Vec<f64>>> = points
        .par_chunks(CHUNK * d)
        .map(|c| pointwise_losses(kind, pair, c, d))
        .collect();
    let mut out = Vec::with_capacity(points.len() / d);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// Sample standard deviation over `√n`; Monte Carlo only.
    pub stderr: Option<f64>,
    pub method: Method,
}

/// Noise sample `i` of a Monte Carlo run.
pub fn noise_sample(noise: &NoiseModel, d: usize, seed: u64, i: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    loop {
        let z: Vec<f64> = (0..d).map(|_| noise.sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        match noise.kind {
            NoiseKind::GaussianIid => return z,
            NoiseKind::Truncated { radius } => {
                if z.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
                    return z;
                }
            }
        }
    }
}

/// `E_ξ[ℓ(x + ξ)]` by quadrature or Monte Carlo.
pub fn expected_value(kind: &LossKind, pair: Pair<'_>, x: &[f64], noise: &NoiseModel, method: Method) -> Result<Estimate> {
    noise.validate()?;
    let d = x.len();
    if d == 0 {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    if noise.sigma == 0.0 {
        let v = pointwise_losses(kind, pair, x, d)?[0];
        return Ok(Estimate {
            value: v,
            stderr: None,
            method,
        });
    }
    match method {
        Method::GaussHermite { order } => {
            if d > MAX_QUADRATURE_DIM {
                return Err(Error::InvalidArgument(format!(
                    "quadrature supports D <= {MAX_QUADRATURE_DIM}, got {d}"
                )));
            }
            if order < MIN_QUADRATURE_ORDER {
                return Err(Error::InvalidArgument(format!(
                    "quadrature order must be >= {MIN_QUADRATURE_ORDER}, got {order}"
                )));
            }
            if noise.kind != NoiseKind::GaussianIid {
                return Err(Error::InvalidArgument("quadrature needs untruncated Gaussian noise".into()));
            }
            let (nodes, weights) = gauss_hermite(order);
            let total = order.pow(d as u32);
            let scale = noise.sigma * std::f64::consts::SQRT_2;
            let mut points = Vec::with_capacity(total * d);
            let mut w = Vec::with_capacity(total);
            for flat in 0..total {
                let mut rem = flat;
                let mut wt = 1.0;
                for xi in x {
                    let j = rem % order;
                    rem /= order;
                    points.push(xi + scale * nodes[j]);
                    wt *= weights[j];
                }
                w.push(wt);
            }
            let losses = losses_parallel(kind, pair, &points, d)?;
            let norm = std::f64::consts::PI.powf(-(d as f64) / 2.0);
            let value = norm * losses.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>();
            Ok(Estimate {
                value,
                stderr: None,
                method,
            })
        }
        Method::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(Error::InvalidArgument(format!("Monte Carlo needs >= 2 samples, got {samples}")));
            }
            let points: Vec<f64> = (0..samples as u64)
                .into_par_iter()
                .flat_map_iter(|i| {
                    let z = noise_sample(noise, d, seed, i);
                    x.iter().zip(z).map(|(a, b)| a + b).collect::<Vec<_>>()
                })
                .collect();
            let losses = losses_parallel(kind, pair, &points, d)?;
            let n = samples as f64;
            let mean = losses.iter().sum::<f64>() / n;
            let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Ok(Estimate {
                value: mean,
                stderr: Some((var / n).sqrt()),
                method,
            })
        }
    }
}

/// Loss at `x` plus its second-order noise term with per-coordinate noise
/// variance `variance`, assembled from the training losses.
pub fn analytic_expansion(kind: &LossKind, pair: Pair<'_>, x: &[f64], variance: f64) -> Result<f64> {
    let d = x.len();
    let xt = Tensor::new(x.to_vec(), &[1, d])?;
    let tape = Tape::new();
    let sigma = variance.sqrt();
    let student = pair.student;
    let v = match kind {
        LossKind::Distill => {
            let teacher = pair.teacher(kind)?;
            let act = match_activations_sq(&teacher.logits(&xt)?, &student.logits(&xt)?)?;
            let jac = match_jacobians_sq(teacher, student, &xt, &tape, &JacobianStrategy::full(), None, sigma)?;
            act.item() + jac.item()
        }
        LossKind::Penalty { target } => {
            let s = student.logits(&xt)?;
            let y = Tensor::new(target.clone(), s.shape())?;
            let fit = match_activations_sq(&y, &s)?;
            let p = jacobian_norm_penalty(student, &xt, &tape, None, Family::SquaredError, sigma, 1.0)?;
            fit.item() + p.value.item()
        }
        LossKind::CeDistill { temperature } => {
            let teacher = pair.teacher(kind)?;
            distill_ce_with_jacobian(teacher, student, &xt, &tape, sigma, *temperature)?
                .total
                .item()
        }
        LossKind::CePenalty { target, temperature } => {
            let s = student.logits(&xt)?;
            let y = Tensor::new(target.clone(), s.shape())?;
            let fit = s.log_softmax(*temperature)?.mul(&y)?.sum()?.item();
            let p = jacobian_norm_penalty(student, &xt, &tape, Some(&y), Family::CrossEntropy, sigma, *temperature)?;
            -fit + p.value.item()
        }
    };
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub loss: String,
    pub expected_loss: f64,
    /// Monte Carlo only.
    pub stderr: Option<f64>,
    pub analytic_value: f64,
    pub residual: f64,
    pub sigma: f64,
    /// Per-coordinate noise variance used in the expansion.
    pub variance: f64,
    pub method: Method,
}

/// Noisy expectation and expansion side by side.
pub fn expected_loss(kind: &LossKind, pair: Pair<'_>, x: &[f64], noise: &NoiseModel, method: Method) -> Result<EquivalenceReport> {
    let est = expected_value(kind, pair, x, noise, method)?;
    let variance = noise.coordinate_variance(x.len());
    let analytic = analytic_expansion(kind, pair, x, variance)?;
    Ok(EquivalenceReport {
        loss: kind.label().into(),
        expected_loss: est.value,
        stderr: est.stderr,
        analytic_value: analytic,
        residual: (est.value - analytic).abs(),
        sigma: noise.sigma,
        variance,
        method,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingStatus {
    Fitted,
    /// Every residual is at the precision floor: the expansion is exact.
    ExactCase,
    /// Fewer than two residuals above the floor.
    TooFewPoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub loss: String,
    pub sigmas: Vec<f64>,
    pub expected: Vec<f64>,
    pub analytic: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Whether each point entered the fit.
    pub used: Vec<bool>,
    pub status: ScalingStatus,
    /// Least-squares slope of `ln residual` on `ln σ`.
    pub slope: Option<f64>,
    /// `exp(intercept)`: the fitted `C` in `residual ≈ C σ^slope`.
    pub coefficient: Option<f64>,
    pub notes: Vec<String>,
}

/// Least-squares fit of `y = a + b x`; returns `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

/// Quadrature residuals over a σ grid and their log-log slope.
pub fn residual_scaling_study(kind: &LossKind, pair: Pair<'_>, x: &[f64], sigmas: &[f64], order: usize) -> Result<ScalingReport> {
    if sigmas.len() < 4 {
        return Err(Error::InvalidArgument(format!("need >= 4 sigmas, got {}", sigmas.len())));
    }
    let lo = sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sigmas.iter().cloned().fold(0.0, f64::max);
    if !(lo > 0.0) || hi / lo < MIN_SIGMA_SPAN - 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "sigmas must be positive and span a factor of {MIN_SIGMA_SPAN}, got {sigmas:?}"
        )));
    }
    let mut report = ScalingReport {
        loss: kind.label().into(),
        sigmas: sigmas.to_vec(),
        expected: Vec::new(),
        analytic: Vec::new(),
        residuals: Vec::new(),
        used: Vec::new(),
        status: ScalingStatus::Fitted,
        slope: None,
        coefficient: None,
        notes: Vec::new(),
    };
    for &s in sigmas {
        let r = expected_loss(kind, pair, x, &NoiseModel::gaussian(s), Method::GaussHermite { order })?;
        let used = r.residual >= PRECISION_FLOOR;
        if !used {
            report
                .notes
                .push(format!("sigma {s}: residual {:.3e} below precision floor, excluded", r.residual));
        }
        report.expected.push(r.expected_loss);
        report.analytic.push(r.analytic_value);
        report.residuals.push(r.residual);
        report.used.push(used);
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = sigmas
        .iter()
        .zip(&report.residuals)
        .zip(&report.used)
        .filter(|(_, &u)| u)
        .map(|((s, r), _)| (s.ln(), r.ln()))
        .unzip();
    if lx.is_empty() {
        report.status = ScalingStatus::ExactCase;
    } else if lx.len() < 2 {
        report.status = ScalingStatus::TooFewPoints;
    } else {
        let (a, b) = linear_fit(&lx, &ly);
        report.slope = Some(b);
        report.coefficient = Some(a.exp());
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactnessCertificate {
    pub radius: f64,
    pub sigma: f64,
    pub samples: usize,
    /// Whether both nets are piecewise linear and the activation pattern was
    /// checked on the ball.
    pub pattern_checked: bool,
    pub pattern_samples: usize,
    /// Per-coordinate second moment of the truncated noise, used in place of
    /// `σ²` in the expansion.
    pub second_moment: f64,
    pub expected_loss: f64,
    pub stderr: f64,
    pub analytic_value: f64,
    pub residual: f64,
    /// `residual <= 3 stderr`.
    pub exact: bool,
}

/// Points on the sphere and inside the ball of radius `r` around `x` used to
/// test that the activation pattern is constant there.
fn ball_probes(x: &[f64], r: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let radius = if i < n { r } else { r * rng.random::<f64>().powf(1.0 / d as f64) };
        out.push(x.iter().zip(&z).map(|(a, b)| a + radius * b / norm).collect());
    }
    out
}

/// Checks that the squared-error expansion is exact under noise truncated to
/// a ball on which both piecewise-linear nets are affine.
///
/// The ball is probed with `pattern_samples` boundary points and as many
/// interior points; a pattern change is rejected with the offending point.
/// Smooth nets skip the probe and run the same comparison.
#[allow(clippy::too_many_arguments)]
pub fn piecewise_exactness_check(
    teacher: &Network,
    student: &Network,
    head: Head,
    x: &[f64],
    radius: f64,
    sigma: f64,
    samples: usize,
    pattern_samples: usize,
    seed: u64,
) -> Result<ExactnessCertificate> {
    use crate::losses::FrozenNet;
    let t = FrozenNet { net: teacher, head };
    let s = FrozenNet { net: student, head };
    let pair = Pair::new(&t, &s);
    let kind = LossKind::Distill;
    let d = x.len();
    if radius == 0.0 {
        let v = pointwise_losses(&kind, pair, x, d)?[0];
        return Ok(ExactnessCertificate {
            radius,
            sigma,
            samples: 0,
            pattern_checked: false,
            pattern_samples: 0,
            second_moment: 0.0,
            expected_loss: v,
            stderr: 0.0,
            analytic_value: v,
            residual: 0.0,
            exact: true,
        });
    }
    let pattern_checked = teacher.is_piecewise_linear() && student.is_piecewise_linear();
    if pattern_checked {
        let pt = teacher.activation_pattern(x)?;
        let ps = student.activation_pattern(x)?;
        for p in ball_probes(x, radius, pattern_samples, seed ^ 0x9e37_79b9_7f4a_7c15) {
            if teacher.activation_pattern(&p)? != pt || student.activation_pattern(&p)? != ps {
                return Err(Error::PatternViolation { sample: p });
            }
        }
    }
    let noise = NoiseModel::truncated(sigma, radius);
    let report = expected_loss(&kind, pair, x, &noise, Method::MonteCarlo { samples, seed })?;
    let stderr = report.stderr.expect("Monte Carlo reports a standard error");
    Ok(ExactnessCertificate {
        radius,
        sigma,
        samples,
        pattern_checked,
        pattern_samples: if pattern_checked { 2 * pattern_samples } else { 0 },
        second_moment: report.variance,
        expected_loss: report.expected_loss,
        stderr,
        analytic_value: report.analytic_value,
        residual: report.residual,
        exact: report.residual <= 3.0 * stderr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub reference: f64,
    pub repeats: usize,
    pub samples: usize,
    /// Repeats whose estimate lies within 2 stderr of the reference.
    pub within_two_stderr: usize,
}

impl CalibrationReport {
    pub fn fraction(&self) -> f64 {
        self.within_two_stderr as f64 / self.repeats as f64
    }
}

/// Repeated Monte Carlo estimates against the quadrature value.
#[allow(clippy::too_many_arguments)]
pub fn mc_calibration(
    kind: &LossKind,
    pair: Pair<'_>,
    x: &[f64],
    sigma: f64,
    samples: usize,
    repeats: usize,
    order: usize,
    seed: u64,
) -> Result<CalibrationReport> {
    let noise = NoiseModel::gaussian(sigma);
    let reference = expected_value(kind, pair, x, &noise, Method::GaussHermite { order })?.value;
    let mut within = 0;
    for r in 0..repeats as u64 {
        let est = expected_value(
            kind,
            pair,
            x,
            &noise,
            Method::MonteCarlo {
                samples,
                seed: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(r),
            },
        )?;
        if (est.value - reference).abs() <= 2.0 * est.stderr.expect("Monte Carlo stderr") {
            within += 1;
        }
    }
    Ok(CalibrationReport {
        reference,
        repeats,
        samples,
        within_two_stderr: within,
    })
}

/// Random sigmoid MLP pair `d -> hidden -> k` for the expansion studies.
pub fn smooth_pair(d: usize, hidden: usize, k: usize, seed: u64) -> Result<(Network, Network)> {
    use crate::nn::{Activation, Architecture};
    let arch = Architecture::Mlp {
        hidden: vec![hidden],
        activation: Activation::Sigmoid,
    };
    let t = arch.build(&[d], k, None, seed.wrapping_mul(2).wrapping_add(1))?;
    let s = arch.build(&[d], k, None, seed.wrapping_mul(2).wrapping_add(2))?;
    Ok((scale_weights(&t, 2.0)?, scale_weights(&s, 2.0)?))
}

/// Copy of `net` with every weight multiplied by `c` and biases drawn so
/// hidden units are not centred at the origin.
fn scale_weights(net: &Network, c: f64) -> Result<Network> {
    let names = net.param_names();
    let params = net
        .params()
        .into_iter()
        .zip(&names)
        .enumerate()
        .map(|(i, (mut p, name))| {
            if name.ends_with("weight") {
                p.data.iter_mut().for_each(|v| *v *= c);
            } else {
                for (j, v) in p.data.iter_mut().enumerate() {
                    *v = 0.3 * (((i * 7 + j * 3) as f64) * 1.3).sin();
                }
            }
            p
        })
        .collect();
    net.with_params(params)
}

/// Copy of `student` whose source-head bias is shifted so its outputs equal
/// `teacher`'s at `x`.
pub fn align_outputs(teacher: &Network, student: &Network, x: &[f64]) -> Result<Network> {
    let t = teacher.eval(x, Head::Source)?;
    let s = student.eval(x, Head::Source)?;
    if t.len() != s.len() {
        return Err(Error::InvalidArgument("teacher and student output counts differ".into()));
    }
    let names = student.param_names();
    let mut params = student.params();
    let idx = names
        .iter()
        .position(|n| n == "head.source.bias")
        .expect("every network has a source head");
    for (b, (tv, sv)) in params[idx].data.iter_mut().zip(t.iter().zip(&s)) {
        *b += tv - sv;
    }
    student.with_params(params)
}
