//! Verification commands: noise equivalence, piecewise-linear exactness and
//! the transfer bound.

use jacmatch::bound::{check_prop3, superset_monotonicity, MetricSpace};
use jacmatch::lab::{align_outputs, piecewise_exactness_check, residual_scaling_study, smooth_pair, ExactnessCertificate, LossKind, Pair, ScalingReport};
use jacmatch::losses::FrozenNet;
use jacmatch::nn::{Activation, Architecture, Head, Layer, LayerKind, Network, Param};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Accepted log-log slope of the expansion residual.
pub const SLOPE_RANGE: (f64, f64) = (3.5, 4.5);
const QUADRATURE_ORDER: usize = 24;
const HIDDEN: usize = 4;
const OUTPUTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    /// Squared-error distillation.
    Squared,
    /// Softmax cross-entropy distillation.
    CrossEntropy,
    /// Squared-error loss against fixed targets.
    SquaredPenalty,
    /// Cross-entropy loss against fixed targets.
    CrossEntropyPenalty,
}

impl std::str::FromStr for NoiseFamily {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "squared" => Ok(NoiseFamily::Squared),
            "cross-entropy" | "ce" => Ok(NoiseFamily::CrossEntropy),
            "squared-penalty" => Ok(NoiseFamily::SquaredPenalty),
            "cross-entropy-penalty" | "ce-penalty" => Ok(NoiseFamily::CrossEntropyPenalty),
            _ => Err(CliError::Config(format!("unknown loss family {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScaling {
    pub seed: u64,
    pub dim: usize,
    pub x: Vec<f64>,
    pub report: ScalingReport,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEquivReport {
    pub family: NoiseFamily,
    pub sigmas: Vec<f64>,
    pub pairs: Vec<PairScaling>,
    pub passed: usize,
    pub pass: bool,
}

/// Residual scaling of the noisy-loss expansion over `count` seeded sigmoid
/// pairs in dimensions 1 to `max_dim`. Student outputs are shifted to equal
/// the teacher's at the expansion point; penalty targets are the student's
/// own outputs there (softmax probabilities for cross-entropy).
pub fn noise_equiv(family: NoiseFamily, sigmas: &[f64], count: usize, max_dim: usize, seed: u64) -> CliResult<NoiseEquivReport> {
    if max_dim == 0 || max_dim > jacmatch::lab::MAX_QUADRATURE_DIM {
        return Err(CliError::Config(format!(
            "dimension must be in 1..={}",
            jacmatch::lab::MAX_QUADRATURE_DIM
        )));
    }
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let s = seed.wrapping_add(i);
        let d = 1 + (i as usize % max_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (t, st) = smooth_pair(d, HIDDEN, OUTPUTS, s)?;
        let st = align_outputs(&t, &st, &x)?;
        let tm = FrozenNet { net: &t, head: Head::Source };
        let sm = FrozenNet { net: &st, head: Head::Source };
        let y = st.eval(&x, Head::Source)?;
        let (kind, pair) = match family {
            NoiseFamily::Squared => (LossKind::Distill, Pair::new(&tm, &sm)),
            NoiseFamily::CrossEntropy => (LossKind::CeDistill { temperature: 1.0 }, Pair::new(&tm, &sm)),
            NoiseFamily::SquaredPenalty => (LossKind::Penalty { target: y }, Pair::student_only(&sm)),
            NoiseFamily::CrossEntropyPenalty => (
                LossKind::CePenalty {
                    target: softmax(&y),
                    temperature: 1.0,
                },
                Pair::student_only(&sm),
            ),
        };
        let report = residual_scaling_study(&kind, pair, &x, sigmas, QUADRATURE_ORDER)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let pass = report.slope.is_some_and(|m| (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&m));
        pairs.push(PairScaling {
            seed: s,
            dim: d,
            x,
            report,
            pass,
        });
    }
    let passed = pairs.iter().filter(|p| p.pass).count();
    Ok(NoiseEquivReport {
        family,
        sigmas: sigmas.to_vec(),
        pass: passed == pairs.len(),
        passed,
        pairs,
    })
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|a| (a - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|a| a / s).collect()
}

fn dense(inputs: usize, outputs: usize, w: Vec<f64>, b: Vec<f64>) -> Layer {
    Layer {
        kind: LayerKind::Dense { inputs, outputs },
        params: vec![
            Param {
                shape: vec![inputs, outputs],
                data: w,
            },
            Param {
                shape: vec![outputs],
                data: b,
            },
        ],
    }
}

/// `x -> Σⱼ vⱼ act(wⱼ x + bⱼ) + c` with two hidden units.
fn one_hidden(act: LayerKind, w: [f64; 2], b: [f64; 2], v: [f64; 2], c: f64) -> Network {
    Network::from_layers(
        &[1],
        vec![dense(1, 2, w.to_vec(), b.to_vec()), Layer { kind: act, params: vec![] }],
        vec![dense(2, 1, v.to_vec(), vec![c])],
        vec![],
    )
    .expect("fixture shapes are consistent")
}

/// ReLU teacher and student that bend only at 0.
pub fn relu_fixture() -> (Network, Network) {
    (
        one_hidden(LayerKind::Relu, [1.0, -1.0], [0.0, 0.0], [1.0, 0.5], 0.0),
        one_hidden(LayerKind::Relu, [2.0, -1.0], [0.0, 0.0], [0.3, 1.0], 0.1),
    )
}

/// Sigmoid teacher and student with visible curvature near 1.
pub fn sigmoid_control() -> (Network, Network) {
    (
        one_hidden(LayerKind::Sigmoid, [4.0, -3.0], [-2.0, 1.0], [3.0, 2.0], 0.0),
        one_hidden(LayerKind::Sigmoid, [2.0, 1.0], [0.0, -1.0], [1.0, -2.0], 0.5),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactnessReport {
    pub relu: ExactnessCertificate,
    pub sigmoid: ExactnessCertificate,
    /// ReLU pair exact and sigmoid control not exact.
    pub pass: bool,
}

/// Truncated-noise check at `x = 1`, radius 0.5, `σ = 0.4`.
pub fn exactness(samples: usize, seed: u64) -> CliResult<ExactnessReport> {
    let (t, s) = relu_fixture();
    let relu = piecewise_exactness_check(&t, &s, Head::Source, &[1.0], 0.5, 0.4, samples, 1000, seed)?;
    let (t, s) = sigmoid_control();
    let sigmoid = piecewise_exactness_check(&t, &s, Head::Source, &[1.0], 0.5, 0.4, samples, 1000, seed)?;
    Ok(ExactnessReport {
        pass: relu.exact && relu.pattern_checked && !sigmoid.exact,
        relu,
        sigmoid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub seed: u64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub trials: usize,
    pub holds: usize,
    /// Smallest `(rhs - lhs) / rhs` over trials with `rhs > 0`.
    pub min_relative_slack: f64,
    pub violations: Vec<BoundViolation>,
    pub superset_trials: usize,
    pub superset_holds: usize,
    pub pass: bool,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_net(seed: u64, d: usize) -> CliResult<Network> {
    let activation = if seed % 2 == 0 { Activation::Relu } else { Activation::Sigmoid };
    Ok(Architecture::Mlp {
        hidden: vec![8],
        activation,
    }
    .build(&[d], 3, None, seed)?)
}

/// `trials` seeded instances of the transfer bound with Gaussian source and
/// target sets (200 and 20 points in 2-D), plus `trials` superset checks
/// where the target set gains noisy copies of its points (even seeds) or
/// fresh Gaussian points (odd seeds).
pub fn bound(trials: usize, seed: u64) -> CliResult<BoundSummary> {
    let id = MetricSpace::identity();
    let mut holds = 0;
    let mut min_slack = f64::INFINITY;
    let mut violations = Vec::new();
    let mut superset_holds = 0;
    for i in 0..trials as u64 {
        let s = seed.wrapping_add(i);
        let (t, st) = (random_net(2 * s, 2)?, random_net(2 * s + 1, 2)?);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let large: Vec<Vec<f64>> = (0..200).map(|_| vec![normal(&mut rng), normal(&mut rng)]).collect();
        let small: Vec<Vec<f64>> = (0..20).map(|_| vec![normal(&mut rng), normal(&mut rng)]).collect();
        let r = check_prop3(&t, &st, &large, &small, &id)?;
        if r.holds {
            holds += 1;
        } else {
            violations.push(BoundViolation {
                seed: s,
                lhs: r.lhs,
                rhs: r.rhs,
            });
        }
        if r.rhs > 0.0 {
            min_slack = min_slack.min(r.slack() / r.rhs);
        }
        let extra: Vec<Vec<f64>> = if s % 2 == 0 {
            small
                .iter()
                .flat_map(|p| (0..5).map(|_| p.iter().map(|v| v + 0.3 * normal(&mut rng)).collect::<Vec<f64>>()).collect::<Vec<_>>())
                .collect()
        } else {
            (0..40).map(|_| vec![normal(&mut rng), normal(&mut rng)]).collect()
        };
        let (before, after) = superset_monotonicity(&large, &small, &extra, &id)?;
        if after <= before {
            superset_holds += 1;
        }
    }
    Ok(BoundSummary {
        trials,
        holds,
        min_relative_slack: min_slack,
        violations,
        superset_trials: trials,
        superset_holds,
        pass: holds == trials && superset_holds == trials,
    })
}
