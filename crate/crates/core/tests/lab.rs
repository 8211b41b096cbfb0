use jacmatch::autodiff::Tensor;
use jacmatch::lab::*;
use jacmatch::losses::FrozenNet;
use jacmatch::nn::{Head, Layer, LayerKind, Network, Param};
use jacmatch::{Error, Result};

const GRID: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

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

fn act(kind: LayerKind) -> Layer {
    Layer { kind, params: vec![] }
}

/// `x -> Σⱼ vⱼ act(wⱼ x + bⱼ) + c` with two hidden units.
fn one_hidden(act_kind: LayerKind, w: [f64; 2], b: [f64; 2], v: [f64; 2], c: f64) -> Network {
    Network::from_layers(
        &[1],
        vec![dense(1, 2, w.to_vec(), b.to_vec()), act(act_kind)],
        vec![dense(2, 1, v.to_vec(), vec![c])],
        vec![],
    )
    .unwrap()
}

fn frozen(net: &Network) -> FrozenNet<'_> {
    FrozenNet { net, head: Head::Source }
}

#[test]
fn linear_pair_expected_loss_is_closed_form() {
    let t = |x: &Tensor| -> Result<Tensor> { Ok(x.scale(2.0)?) };
    let s = |x: &Tensor| -> Result<Tensor> { Ok(x.clone()) };
    let pair = Pair::new(&t, &s);
    let noise = NoiseModel::gaussian(0.1);
    let r = expected_loss(&LossKind::Distill, pair, &[3.0], &noise, Method::GaussHermite { order: 20 }).unwrap();
    assert!((r.expected_loss - 9.01).abs() < 1e-12, "{}", r.expected_loss);
    assert!((r.analytic_value - 9.01).abs() < 1e-12);
    assert!(r.residual < 1e-12);
    assert_eq!(r.stderr, None);
}

#[test]
fn zero_sigma_returns_the_loss_at_x() {
    let (t, s) = smooth_pair(2, 3, 2, 1).unwrap();
    let (tm, sm) = (frozen(&t), frozen(&s));
    let x = [0.2, -0.5];
    let direct: f64 = t
        .eval(&x, Head::Source)
        .unwrap()
        .iter()
        .zip(s.eval(&x, Head::Source).unwrap())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    for m in [Method::GaussHermite { order: 20 }, Method::MonteCarlo { samples: 10, seed: 0 }] {
        let e = expected_value(&LossKind::Distill, Pair::new(&tm, &sm), &x, &NoiseModel::gaussian(0.0), m).unwrap();
        assert_eq!(e.value, direct);
    }
}

#[test]
fn preconditions_are_enforced() {
    let f = |x: &Tensor| -> Result<Tensor> { Ok(x.clone()) };
    let pair = Pair::new(&f, &f);
    let n = NoiseModel::gaussian(0.1);
    let k = LossKind::Distill;
    assert!(expected_value(&k, pair, &[0.0; 5], &n, Method::GaussHermite { order: 20 }).is_err());
    assert!(expected_value(&k, pair, &[0.0], &n, Method::GaussHermite { order: 10 }).is_err());
    assert!(expected_value(&k, pair, &[0.0], &n, Method::MonteCarlo { samples: 1, seed: 0 }).is_err());
    assert!(expected_value(&k, pair, &[0.0], &NoiseModel::gaussian(-1.0), Method::MonteCarlo { samples: 9, seed: 0 }).is_err());
    assert!(expected_value(&k, pair, &[0.0], &NoiseModel::truncated(1.0, 0.0), Method::MonteCarlo { samples: 9, seed: 0 }).is_err());
    assert!(expected_value(&k, Pair::student_only(&f), &[0.0], &n, Method::GaussHermite { order: 20 }).is_err());
    assert!(residual_scaling_study(&k, pair, &[0.0], &[0.1, 0.05, 0.02], 20).is_err());
    assert!(residual_scaling_study(&k, pair, &[0.0], &[0.1, 0.08, 0.06, 0.05], 20).is_err());
}

#[test]
fn quadrature_agrees_with_large_monte_carlo() {
    let (t, s) = smooth_pair(2, 4, 3, 7).unwrap();
    let (tm, sm) = (frozen(&t), frozen(&s));
    let pair = Pair::new(&tm, &sm);
    let x = [0.3, -0.2];
    let noise = NoiseModel::gaussian(0.5);
    let q = expected_value(&LossKind::Distill, pair, &x, &noise, Method::GaussHermite { order: 24 }).unwrap();
    let mc = expected_value(&LossKind::Distill, pair, &x, &noise, Method::MonteCarlo { samples: 1_000_000, seed: 3 }).unwrap();
    let se = mc.stderr.unwrap();
    assert!((q.value - mc.value).abs() <= 3.0 * se, "{} vs {} ± {se}", q.value, mc.value);
}

#[test]
fn monte_carlo_is_reproducible_and_thread_independent() {
    let (t, s) = smooth_pair(3, 4, 2, 2).unwrap();
    let (tm, sm) = (frozen(&t), frozen(&s));
    let x = [0.1, 0.2, 0.3];
    let m = Method::MonteCarlo { samples: 10_000, seed: 5 };
    let n = NoiseModel::gaussian(0.3);
    let a = expected_value(&LossKind::Distill, Pair::new(&tm, &sm), &x, &n, m).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| expected_value(&LossKind::Distill, Pair::new(&tm, &sm), &x, &n, m).unwrap());
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.stderr.unwrap().to_bits(), b.stderr.unwrap().to_bits());
}

#[test]
fn linear_nets_are_an_exact_case() {
    let w = vec![1.0, -2.0, 0.5, 0.25, 3.0, 1.0];
    let v = vec![0.5, 1.0, -1.0, 2.0, 0.0, 1.5];
    let t = move |x: &Tensor| -> Result<Tensor> { Ok(x.matmul(&Tensor::new(w.clone(), &[2, 3])?)?) };
    let s = move |x: &Tensor| -> Result<Tensor> { Ok(x.matmul(&Tensor::new(v.clone(), &[2, 3])?)?.add_scalar(0.3)?) };
    let pair = Pair::new(&t, &s);
    let r = residual_scaling_study(&LossKind::Distill, pair, &[0.4, -1.0], &GRID, 20).unwrap();
    assert_eq!(r.status, ScalingStatus::ExactCase);
    assert_eq!(r.slope, None);
    assert_eq!(r.notes.len(), 4);
}

#[test]
fn identical_nets_expand_to_zero() {
    let (t, _) = smooth_pair(2, 3, 2, 4).unwrap();
    let tm = frozen(&t);
    let v = analytic_expansion(&LossKind::Distill, Pair::new(&tm, &tm), &[0.1, 0.7], 0.04).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn penalty_expansion_of_linear_map() {
    let w = [1.0, -2.0, 0.5, 3.0];
    let s = move |x: &Tensor| -> Result<Tensor> { Ok(x.matmul(&Tensor::new(w.to_vec(), &[2, 2])?)?) };
    let x = [0.5, 1.0];
    // xW = (1, 2)
    let y = vec![1.0, 1.0];
    let var = 0.09;
    let v = analytic_expansion(&LossKind::Penalty { target: y.clone() }, Pair::student_only(&s), &x, var).unwrap();
    let want = 1.0 + var * w.iter().map(|a| a * a).sum::<f64>();
    assert!((v - want).abs() < 1e-14);
    let e = expected_value(
        &LossKind::Penalty { target: y },
        Pair::student_only(&s),
        &x,
        &NoiseModel::gaussian(0.3),
        Method::GaussHermite { order: 20 },
    )
    .unwrap();
    assert!((e.value - want).abs() < 1e-12);
}

#[test]
fn quadratic_pair_residual_scales_with_fourth_moment() {
    let t = |x: &Tensor| -> Result<Tensor> { Ok(x.square()?) };
    let s = |x: &Tensor| -> Result<Tensor> { Ok(x.scale(0.0)?) };
    let pair = Pair::new(&t, &s);
    let r = residual_scaling_study(&LossKind::Distill, pair, &[0.0], &GRID, 20).unwrap();
    for (res, sig) in r.residuals.iter().zip(GRID) {
        assert!((res - 3.0 * sig.powi(4)).abs() <= 1e-12 * res.max(1e-300) + 1e-18);
    }
    assert!((r.slope.unwrap() - 4.0).abs() < 1e-3, "{:?}", r.slope);
    assert!((r.coefficient.unwrap() - 3.0).abs() < 1e-2);
}

#[test]
fn mismatched_outputs_leave_a_sigma_squared_residual() {
    // E[(x+ξ)⁴] - x⁴ - 4x²σ² = 2x²σ² + 3σ⁴ at x = 1
    let t = |x: &Tensor| -> Result<Tensor> { Ok(x.square()?) };
    let s = |x: &Tensor| -> Result<Tensor> { Ok(x.scale(0.0)?) };
    let r = residual_scaling_study(&LossKind::Distill, Pair::new(&t, &s), &[1.0], &GRID, 20).unwrap();
    for (res, sig) in r.residuals.iter().zip(GRID) {
        let want = 2.0 * sig * sig + 3.0 * sig.powi(4);
        assert!((res - want).abs() <= 1e-12);
    }
    assert!(r.slope.unwrap() < 2.2);
}

#[test]
fn aligned_sigmoid_pair_in_one_dimension_has_fourth_order_residual() {
    let (t, s) = smooth_pair(1, 4, 2, 0).unwrap();
    let x = [0.3];
    let s = align_outputs(&t, &s, &x).unwrap();
    let (tm, sm) = (frozen(&t), frozen(&s));
    let r = residual_scaling_study(&LossKind::Distill, Pair::new(&tm, &sm), &x, &GRID, 24).unwrap();
    assert_eq!(r.status, ScalingStatus::Fitted);
    let slope = r.slope.unwrap();
    assert!((3.5..=4.5).contains(&slope), "{slope}");
}

#[test]
fn penalty_residual_is_fourth_order_at_the_fitted_point() {
    let (_, s) = smooth_pair(2, 4, 2, 3).unwrap();
    let x = [0.2, -0.1];
    let sm = frozen(&s);
    let y = s.eval(&x, Head::Source).unwrap();
    let r = residual_scaling_study(&LossKind::Penalty { target: y }, Pair::student_only(&sm), &x, &GRID, 24).unwrap();
    let slope = r.slope.unwrap();
    assert!((3.5..=4.5).contains(&slope), "{slope}");
}

#[test]
fn residuals_shrink_with_sigma() {
    let (t, s) = smooth_pair(2, 4, 2, 5).unwrap();
    let x = [0.1, 0.4];
    let s = align_outputs(&t, &s, &x).unwrap();
    let (tm, sm) = (frozen(&t), frozen(&s));
    let y = vec![0.5, -0.5];
    for kind in [
        LossKind::Distill,
        LossKind::Penalty { target: y.clone() },
        LossKind::CeDistill { temperature: 1.0 },
        LossKind::CePenalty {
            target: vec![0.3, 0.7],
            temperature: 2.0,
        },
    ] {
        let r = residual_scaling_study(&kind, Pair::new(&tm, &sm), &x, &GRID, 24).unwrap();
        // the grid is listed from large to small sigma
        for w in r.residuals.windows(2) {
            assert!(w[1] <= w[0], "{}: {:?}", kind.label(), r.residuals);
        }
    }
}

#[test]
fn monte_carlo_calibration() {
    let (t, s) = smooth_pair(2, 4, 2, 11).unwrap();
    let (tm, sm) = (frozen(&t), frozen(&s));
    let rep = mc_calibration(&LossKind::Distill, Pair::new(&tm, &sm), &[0.2, -0.3], 0.3, 4000, 100, 24, 0).unwrap();
    assert_eq!(rep.repeats, 100);
    assert!(rep.fraction() >= 0.95, "{}", rep.fraction());
}

#[test]
fn truncated_second_moment_matches_sampling() {
    let noise = NoiseModel::truncated(0.4, 0.5);
    let n = 200_000;
    for d in [1, 3] {
        let m: f64 = (0..n as u64).map(|i| noise_sample(&noise, d, 1, i)[0].powi(2)).sum::<f64>() / n as f64;
        let want = truncated_second_moment(0.4, 0.5, d);
        assert!((m - want).abs() / want < 0.01, "d={d}: {m} vs {want}");
        assert!(want < 0.16);
        for i in 0..100 {
            let z = noise_sample(&noise, d, 2, i);
            assert!(z.iter().map(|v| v * v).sum::<f64>() <= 0.25);
        }
    }
    // a loose truncation recovers the Gaussian variance
    assert!((truncated_second_moment(0.1, 5.0, 2) - 0.01).abs() < 1e-12);
}

fn relu_fixture() -> (Network, Network) {
    // both nets bend only at x = 0
    let t = one_hidden(LayerKind::Relu, [1.0, -1.0], [0.0, 0.0], [1.0, 0.5], 0.0);
    let s = one_hidden(LayerKind::Relu, [2.0, -1.0], [0.0, 0.0], [0.3, 1.0], 0.1);
    (t, s)
}

#[test]
fn relu_pair_is_exact_inside_a_linear_region() {
    let (t, s) = relu_fixture();
    let c = piecewise_exactness_check(&t, &s, Head::Source, &[1.0], 0.5, 0.4, 100_000, 1000, 7).unwrap();
    assert!(c.pattern_checked);
    assert_eq!(c.pattern_samples, 2000);
    assert!(c.second_moment < 0.16);
    assert!(c.exact, "{c:?}");
}

#[test]
fn relu_pair_rejects_a_ball_that_crosses_the_breakpoint() {
    let (t, s) = relu_fixture();
    match piecewise_exactness_check(&t, &s, Head::Source, &[1.0], 1.5, 0.4, 1000, 1000, 7) {
        Err(Error::PatternViolation { sample }) => assert!(sample[0] <= 0.0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_radius_is_trivially_exact() {
    let (t, s) = relu_fixture();
    let c = piecewise_exactness_check(&t, &s, Head::Source, &[1.0], 0.0, 0.4, 1000, 1000, 7).unwrap();
    assert!(c.exact);
    assert_eq!(c.residual, 0.0);
}

#[test]
fn sigmoid_pair_fails_the_exactness_harness() {
    let t = one_hidden(LayerKind::Sigmoid, [4.0, -3.0], [-2.0, 1.0], [3.0, 2.0], 0.0);
    let s = one_hidden(LayerKind::Sigmoid, [2.0, 1.0], [0.0, -1.0], [1.0, -2.0], 0.5);
    let c = piecewise_exactness_check(&t, &s, Head::Source, &[1.0], 0.5, 0.4, 100_000, 1000, 7).unwrap();
    assert!(!c.pattern_checked);
    assert!(!c.exact, "{c:?}");
}
