use jacmatch::autodiff::{Tape, Tensor};
use jacmatch::losses::*;
use jacmatch::nn::{Activation, Architecture, Head, Network, Param};
use jacmatch::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(v.to_vec(), shape).unwrap()
}

fn sigmoid_mlp(d: usize, k: usize, seed: u64) -> Network {
    Architecture::Mlp {
        hidden: vec![5],
        activation: Activation::Sigmoid,
    }
    .build(&[d], k, None, seed)
    .unwrap()
}

fn random_batch(b: usize, shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let mut s = vec![b];
    s.extend(shape);
    Tensor::new((0..b * n).map(|_| rng.random_range(-1.0..1.0)).collect(), &s).unwrap()
}

/// Input Jacobian `(k, D)` of one head at one point by central differences.
fn fd_input_jacobian(net: &Network, head: Head, x: &[f64]) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let k = net.eval(x, head).unwrap().len();
    let mut j = vec![vec![0.0; x.len()]; k];
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let (yp, ym) = (net.eval(&xp, head).unwrap(), net.eval(&xm, head).unwrap());
        for o in 0..k {
            j[o][i] = (yp[o] - ym[o]) / (2.0 * h);
        }
    }
    j
}

fn softmax(v: &[f64], temp: f64) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|a| ((a - m) / temp).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|a| a / s).collect()
}

#[test]
fn activation_matching_examples() {
    let a = t(&[1.0, 0.0], &[2]);
    assert_eq!(match_activations_sq(&a, &a).unwrap().item(), 0.0);
    assert_eq!(match_activations_sq(&a, &t(&[0.0, 1.0], &[2])).unwrap().item(), 2.0);
    let x = t(&[3.0], &[1, 1]);
    let loss = match_activations_sq(&x.scale(2.0).unwrap(), &x).unwrap();
    assert_eq!(loss.item(), 9.0);
}

#[test]
fn activation_matching_rejects_mismatched_lengths() {
    let err = match_activations_sq(&t(&[1.0, 0.0], &[2]), &t(&[1.0, 0.0, 0.0], &[3])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn jacobian_matching_of_linear_maps() {
    let teacher = |x: &Tensor| -> Result<Tensor> { Ok(x.scale(2.0)?) };
    let student = |x: &Tensor| -> Result<Tensor> { Ok(x.clone()) };
    let x = t(&[3.0], &[1, 1]);
    let tape = Tape::new();
    let full = match_jacobians_sq(&teacher, &student, &x, &tape, &JacobianStrategy::full(), None, 1.0).unwrap();
    assert_eq!(full.item(), 1.0);
    let cc = JacobianStrategy::with_mode(JacobianMode::CorrectClass);
    let one = match_jacobians_sq(&teacher, &student, &x, &tape, &cc, Some(&[0]), 1.0).unwrap();
    assert_eq!(one.item(), full.item());
    let same = match_jacobians_sq(&teacher, &teacher, &x, &tape, &JacobianStrategy::full(), None, 1.0).unwrap();
    assert_eq!(same.item(), 0.0);
    let s2 = match_jacobians_sq(&teacher, &student, &x, &tape, &JacobianStrategy::full(), None, 0.5).unwrap();
    assert_eq!(s2.item(), 0.25);
}

#[test]
fn correct_class_needs_labels() {
    let f = |x: &Tensor| -> Result<Tensor> { Ok(x.clone()) };
    let cc = JacobianStrategy::with_mode(JacobianMode::CorrectClass);
    let err = match_jacobians_sq(&f, &f, &t(&[1.0], &[1, 1]), &Tape::new(), &cc, None, 1.0).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn jacobian_matching_equals_fd_formula() {
    let (tn, sn) = (sigmoid_mlp(3, 4, 1), sigmoid_mlp(3, 4, 2));
    let x = random_batch(3, &[3], 7);
    let labels = [1, 3, 0];
    let tm = FrozenNet { net: &tn, head: Head::Source };
    let sm = FrozenNet { net: &sn, head: Head::Source };
    let tape = Tape::new();
    let sigma = 0.7;
    for (mode, pick) in [
        (JacobianMode::Full, None),
        (JacobianMode::CorrectClass, Some(labels.to_vec())),
        (JacobianMode::MaxOutput, None),
    ] {
        let got = match_jacobians_sq(&tm, &sm, &x, &tape, &JacobianStrategy::with_mode(mode), Some(&labels), sigma)
            .unwrap()
            .item();
        let mut want = 0.0;
        for b in 0..3 {
            let xb = &x.data()[b * 3..b * 3 + 3];
            let (jt, js) = (fd_input_jacobian(&tn, Head::Source, xb), fd_input_jacobian(&sn, Head::Source, xb));
            let rows: Vec<usize> = match (&pick, mode) {
                (Some(l), _) => vec![l[b]],
                (None, JacobianMode::MaxOutput) => {
                    let y = tn.eval(xb, Head::Source).unwrap();
                    vec![(0..4).fold(0, |m, i| if y[i] > y[m] { i } else { m })]
                }
                _ => (0..4).collect(),
            };
            for o in rows {
                want += jt[o].iter().zip(&js[o]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        want *= sigma * sigma / 3.0;
        assert!((got - want).abs() <= 1e-8 * want.max(1.0), "{mode:?}: {got} vs {want}");
    }
}

#[test]
fn max_attention_pixel_is_rejected_by_plain_jacobian_matching() {
    let f = |x: &Tensor| -> Result<Tensor> { Ok(x.clone()) };
    let s = JacobianStrategy::with_mode(JacobianMode::MaxAttentionPixel);
    assert!(match_jacobians_sq(&f, &f, &t(&[1.0], &[1, 1]), &Tape::new(), &s, None, 1.0).is_err());
}

#[test]
fn ce_distillation_with_zero_sigma_is_soft_cross_entropy() {
    let (tn, sn) = (sigmoid_mlp(2, 3, 3), sigmoid_mlp(2, 3, 4));
    let x = random_batch(4, &[2], 1);
    let tm = FrozenNet { net: &tn, head: Head::Source };
    let sm = FrozenNet { net: &sn, head: Head::Source };
    let d = distill_ce_with_jacobian(&tm, &sm, &x, &Tape::new(), 0.0, 2.0).unwrap();
    let soft = soft_cross_entropy(&tm.logits(&x).unwrap(), &sm.logits(&x).unwrap(), 2.0).unwrap();
    assert_eq!(d.total.item(), soft.item());
    assert_eq!(d.jacobian.item(), 0.0);
}

#[test]
fn ce_distillation_of_identical_nets() {
    let net = sigmoid_mlp(2, 3, 5);
    let x = [0.4, -0.3];
    let m = FrozenNet { net: &net, head: Head::Source };
    let (sigma, temp) = (0.3, 2.0);
    let d = distill_ce_with_jacobian(&m, &m, &t(&x, &[1, 2]), &Tape::new(), sigma, temp).unwrap();
    let p = softmax(&net.eval(&x, Head::Source).unwrap(), temp);
    let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
    assert!((d.soft_ce.item() - entropy).abs() < 1e-12);
    // probability gradients by central differences
    let h = 1e-5;
    let mut want = 0.0;
    for i in 0..3 {
        let mut g2 = 0.0;
        for j in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[j] += h;
            xm[j] -= h;
            let pp = softmax(&net.eval(&xp, Head::Source).unwrap(), temp);
            let pm = softmax(&net.eval(&xm, Head::Source).unwrap(), temp);
            g2 += ((pp[i] - pm[i]) / (2.0 * h)).powi(2);
        }
        want += g2 / p[i];
    }
    want *= -sigma * sigma;
    assert!((d.jacobian.item() - want).abs() <= 1e-7 * want.abs(), "{} vs {want}", d.jacobian.item());
}

#[test]
fn squared_penalty_of_linear_map_is_tikhonov() {
    let w = [1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
    let wt = t(&w, &[3, 2]);
    let s = move |x: &Tensor| -> Result<Tensor> { Ok(x.matmul(&wt)?) };
    let x = random_batch(2, &[3], 3);
    let sigma = 0.2;
    let p = jacobian_norm_penalty(&s, &x, &Tape::new(), None, Family::SquaredError, sigma, 1.0).unwrap();
    let fro: f64 = w.iter().map(|v| v * v).sum();
    assert!((p.value.item() - sigma * sigma * fro).abs() < 1e-14);
}

#[test]
fn penalties_of_constant_nets_vanish() {
    let c = |x: &Tensor| -> Result<Tensor> { Ok(x.index_select(1, &[0, 0, 0])?.scale(0.0)?) };
    let x = random_batch(2, &[2], 3);
    let tape = Tape::new();
    let sq = jacobian_norm_penalty(&c, &x, &tape, None, Family::SquaredError, 1.0, 1.0).unwrap();
    assert_eq!(sq.value.item(), 0.0);
    let y = one_hot(&[0, 2], 3).unwrap();
    let ce = jacobian_norm_penalty(&c, &x, &tape, Some(&y), Family::CrossEntropy, 1.0, 1.0).unwrap();
    assert_eq!(ce.value.item(), 0.0);
    assert_eq!(ce.clamped, 0);
}

#[test]
fn ce_penalty_matches_fd_formula() {
    let net = sigmoid_mlp(2, 3, 8);
    let x = [0.1, 0.9];
    let m = FrozenNet { net: &net, head: Head::Source };
    let y = t(&[0.2, 0.0, 0.8], &[1, 3]);
    let (sigma, temp) = (0.5, 1.5);
    let got = jacobian_norm_penalty(&m, &t(&x, &[1, 2]), &Tape::new(), Some(&y), Family::CrossEntropy, sigma, temp)
        .unwrap()
        .value
        .item();
    let p = softmax(&net.eval(&x, Head::Source).unwrap(), temp);
    let h = 1e-5;
    let mut want = 0.0;
    for (i, yi) in [0.2, 0.0, 0.8].into_iter().enumerate() {
        let mut g2 = 0.0;
        for j in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[j] += h;
            xm[j] -= h;
            let pp = softmax(&net.eval(&xp, Head::Source).unwrap(), temp);
            let pm = softmax(&net.eval(&xm, Head::Source).unwrap(), temp);
            g2 += ((pp[i] - pm[i]) / (2.0 * h)).powi(2);
        }
        want += yi * g2 / (p[i] * p[i]);
    }
    want *= sigma * sigma;
    assert!((got - want).abs() <= 1e-7 * want, "{got} vs {want}");
}

#[test]
fn ce_penalty_requires_targets() {
    let f = |x: &Tensor| -> Result<Tensor> { Ok(x.clone()) };
    let err = jacobian_norm_penalty(&f, &t(&[1.0, 2.0], &[1, 2]), &Tape::new(), None, Family::CrossEntropy, 1.0, 1.0);
    assert!(err.is_err());
}

#[test]
fn attention_map_examples() {
    let z = t(&[1.0, -2.0], &[2, 1, 1]);
    assert_eq!(attention_map(&z).unwrap().to_vec(), vec![5.0]);
    assert_eq!(attention_map(&z).unwrap().shape(), &[1, 1]);
    assert_eq!(attention_map(&Tensor::zeros(&[3, 2, 2])).unwrap().to_vec(), vec![0.0; 4]);
    let single = t(&[1.0, -3.0, 0.5, 2.0], &[1, 2, 2]);
    assert_eq!(attention_map(&single).unwrap().to_vec(), vec![1.0, 9.0, 0.25, 4.0]);
    assert!(attention_map(&t(&[1.0], &[1])).is_err());
}

#[test]
fn attention_matching_examples() {
    let a = t(&[1.0, 0.0], &[1, 2]);
    let b = t(&[0.0, 1.0], &[1, 2]);
    let (v, deg) = match_attention(&a, &b).unwrap();
    assert!((v.item() - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(deg, 0);
    assert_eq!(match_attention(&a, &a).unwrap().0.item(), 0.0);
    assert_eq!(match_attention(&a.scale(3.0).unwrap(), &a).unwrap().0.item(), 0.0);
    let (z, deg) = match_attention(&Tensor::zeros(&[1, 2]), &a).unwrap();
    assert_eq!((z.item(), deg), (0.0, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn attention_matching_is_scale_invariant(
        a in prop::collection::vec(0.01f64..5.0, 9),
        b in prop::collection::vec(0.01f64..5.0, 9),
        c in 1e-3f64..1e3,
    ) {
        let (at, bt) = (t(&a, &[3, 3]), t(&b, &[3, 3]));
        let base = match_attention(&at, &bt).unwrap().0.item();
        let left = match_attention(&at.scale(c).unwrap(), &bt).unwrap().0.item();
        let right = match_attention(&at, &bt.scale(c).unwrap()).unwrap().0.item();
        prop_assert!((base - left).abs() <= 1e-10);
        prop_assert!((base - right).abs() <= 1e-10);
    }

    #[test]
    fn full_strategy_bounds_single_index_strategies(seed in any::<u64>()) {
        let (tn, sn) = (sigmoid_mlp(3, 4, seed), sigmoid_mlp(3, 4, seed.wrapping_add(1)));
        let x = random_batch(4, &[3], seed);
        let labels: Vec<usize> = (0..4).map(|i| (seed as usize + i) % 4).collect();
        let tm = FrozenNet { net: &tn, head: Head::Source };
        let sm = FrozenNet { net: &sn, head: Head::Source };
        let tape = Tape::new();
        let run = |mode| match_jacobians_sq(&tm, &sm, &x, &tape, &JacobianStrategy::with_mode(mode), Some(&labels), 1.0).unwrap().item();
        let full = run(JacobianMode::Full);
        prop_assert!(full >= run(JacobianMode::CorrectClass));
        prop_assert!(full >= run(JacobianMode::MaxOutput));
    }

    #[test]
    fn jacobian_loss_vanishes_exactly_when_rows_match(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let tn = sigmoid_mlp(3, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let same = tn.permute_hidden(0, &perm).unwrap();
        let other = sigmoid_mlp(3, 2, seed ^ 0xdead);
        let x = random_batch(1, &[3], seed);
        let tape = Tape::new();
        let tm = FrozenNet { net: &tn, head: Head::Source };
        for (net, equal) in [(&same, true), (&other, false)] {
            let sm = FrozenNet { net, head: Head::Source };
            let v = match_jacobians_sq(&tm, &sm, &x, &tape, &JacobianStrategy::full(), None, 1.0).unwrap().item();
            let (jt, js) = (fd_input_jacobian(&tn, Head::Source, x.data()), fd_input_jacobian(net, Head::Source, x.data()));
            let rows_equal = jt.iter().flatten().zip(js.iter().flatten()).all(|(a, b)| (a - b).abs() <= 1e-8);
            prop_assert_eq!(rows_equal, equal);
            prop_assert_eq!(v <= 1e-20, equal, "loss {}", v);
        }
    }
}

/// Teacher model with its input scaled before the forward pass.
struct Scaled<'a>(FrozenNet<'a>, f64);

impl Model for Scaled<'_> {
    fn outputs(&self, x: &Tensor) -> Result<Outputs> {
        self.0.outputs(&x.scale(self.1)?)
    }
}

fn linear_trunk(seed: u64) -> Network {
    Network::builder(&[1, 6, 6]).conv(3).tap().gap().head(2).build(seed).unwrap()
}

#[test]
fn attention_jacobians_ignore_gradient_magnitude() {
    let net = linear_trunk(3);
    let x = random_batch(2, &[1, 6, 6], 4);
    let tm = FrozenNet { net: &net, head: Head::Source };
    let sm = Scaled(tm, 2.0);
    let tape = Tape::new();
    let (same, deg, _) = match_attention_jacobians(&tm, &tm, &x, &tape, (0, 0), 2).unwrap();
    assert_eq!((same.item(), deg), (0.0, 0));
    let (v, deg, _) = match_attention_jacobians(&tm, &sm, &x, &tape, (0, 0), 2).unwrap();
    assert!(v.item().abs() <= 1e-10, "{}", v.item());
    assert_eq!(deg, 0);
    let other = linear_trunk(9);
    let om = FrozenNet { net: &other, head: Head::Source };
    assert!(match_attention_jacobians(&tm, &om, &x, &tape, (0, 0), 2).unwrap().0.item() > 1e-6);
}

#[test]
fn attention_jacobian_peak_ties_take_lowest_index() {
    // zero input with a bias: every pixel of the feature map is equal
    let net = Network::builder(&[1, 4, 4]).conv(2).tap().gap().head(2).build(1).unwrap();
    let mut params = net.params();
    params[1] = Param {
        shape: vec![2],
        data: vec![0.5, -1.0],
    };
    let net = net.with_params(params).unwrap();
    let m = FrozenNet { net: &net, head: Head::Source };
    let x = Tensor::zeros(&[1, 1, 4, 4]);
    let (v, deg, idx) = match_attention_jacobians(&m, &m, &x, &Tape::new(), (0, 0), 1).unwrap();
    assert_eq!(idx, vec![0]);
    assert_eq!((v.item(), deg), (0.0, 0));
}

#[test]
fn attention_jacobians_name_mismatched_taps() {
    let a = Architecture::Vgg2t.build(&[1, 8, 8], 3, None, 1).unwrap();
    let b = Architecture::Vgg1s.build(&[1, 8, 8], 3, None, 1).unwrap();
    let x = random_batch(1, &[1, 8, 8], 1);
    let (am, bm) = (FrozenNet { net: &a, head: Head::Source }, FrozenNet { net: &b, head: Head::Source });
    match match_attention_jacobians(&am, &bm, &x, &Tape::new(), (0, 1), 1) {
        Err(Error::Shape { what, .. }) => assert!(what.contains("[1, 8, 8, 8]") && what.contains("[1, 8, 4, 4]"), "{what}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn pool_window_resolution() {
    assert_eq!(JacobianStrategy::full().window(16).unwrap(), 3);
    assert_eq!(PoolWindow::Fraction(7).resolve(4).unwrap(), 1);
    assert_eq!(PoolWindow::Full.resolve(8).unwrap(), 8);
    assert!(PoolWindow::Pixels(9).resolve(8).is_err());
    assert!(PoolWindow::Pixels(0).resolve(8).is_err());
}

/// Central-difference check of `d loss / d params` for a loss of the
/// student's parameter tensors.
fn sm<'a>(net: &'a Network, p: &[Tensor]) -> NetModel<'a> {
    NetModel::new(net, p.to_vec(), Head::Source)
}

fn check_param_gradient(student: &Network, loss: &dyn Fn(&Network, &Tape, &[Tensor]) -> Tensor) {
    let tape = Tape::new();
    let leaves = student.leaves(&tape);
    let value = loss(student, &tape, &leaves);
    let grads = jacmatch::autodiff::backward(&value, &leaves.iter().collect::<Vec<_>>(), false).unwrap();
    let params = student.params();
    let h = 1e-5;
    let eval = |p: Vec<Param>| -> f64 {
        let net = student.with_params(p).unwrap();
        let tape = Tape::new();
        let leaves = net.leaves(&tape);
        loss(&net, &tape, &leaves).item()
    };
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        let g = grads[pi].value.to_vec();
        for e in (0..p.data.len()).step_by(1 + p.data.len() / 6) {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[pi].data[e] += h;
            minus[pi].data[e] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let err = (g[e] - fd).abs() / fd.abs().max(1e-3);
            assert!(err <= 1e-4, "param {pi}[{e}]: {} vs {fd}", g[e]);
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let teacher = sigmoid_mlp(3, 3, 11);
    let student = sigmoid_mlp(3, 3, 12);
    let x = random_batch(2, &[3], 5);
    let labels = [2, 0];
    let tm = FrozenNet { net: &teacher, head: Head::Source };
    let tl = tm.logits(&x).unwrap();
    check_param_gradient(&student, &|n, _, p| {
        match_activations_sq(&tl, n.forward_with(p, &x).unwrap().head(Head::Source).unwrap()).unwrap()
    });
    check_param_gradient(&student, &|n, _, p| {
        cross_entropy(n.forward_with(p, &x).unwrap().head(Head::Source).unwrap(), &labels).unwrap()
    });
    for mode in [JacobianMode::Full, JacobianMode::CorrectClass, JacobianMode::MaxOutput] {
        check_param_gradient(&student, &|n, tape, p| {
            match_jacobians_sq(&tm, &sm(n, p), &x, tape, &JacobianStrategy::with_mode(mode), Some(&labels), 0.8).unwrap()
        });
    }
    check_param_gradient(&student, &|n, tape, p| {
        distill_ce_with_jacobian(&tm, &sm(n, p), &x, tape, 0.5, 2.0).unwrap().total
    });
    let y = one_hot(&labels, 3).unwrap();
    for family in [Family::SquaredError, Family::CrossEntropy] {
        check_param_gradient(&student, &|n, tape, p| {
            jacobian_norm_penalty(&sm(n, p), &x, tape, Some(&y), family, 0.6, 1.0).unwrap().value
        });
    }
}

#[test]
fn attention_loss_gradients_match_finite_differences() {
    let teacher = Network::builder(&[1, 5, 5]).conv(3).sigmoid().tap().gap().head(2).build(1).unwrap();
    let student = Network::builder(&[1, 5, 5]).conv(2).sigmoid().tap().gap().head(2).build(2).unwrap();
    let x = random_batch(2, &[1, 5, 5], 3);
    let tm = FrozenNet { net: &teacher, head: Head::Source };
    let at = attention_map(&teacher.forward_with(&teacher.param_tensors(), &x).unwrap().taps[0]).unwrap();
    check_param_gradient(&student, &|n, _, p| {
        let a_s = attention_map(&n.forward_with(p, &x).unwrap().taps[0]).unwrap();
        match_attention(&at, &a_s).unwrap().0
    });
    check_param_gradient(&student, &|n, tape, p| {
        let sm = NetModel::new(n, p.to_vec(), Head::Source);
        match_attention_jacobians(&tm, &sm, &x, tape, (0, 0), 2).unwrap().0
    });
}

#[test]
fn composite_loss_matches_independent_formula() {
    let teacher = sigmoid_mlp(2, 3, 21);
    let student = sigmoid_mlp(2, 3, 22);
    let x = random_batch(3, &[2], 9);
    let labels = [0, 2, 1];
    let spec = LossSpec {
        alpha: 0.5,
        beta: 2.0,
        gamma: 1.5,
        sigma: 0.4,
        ..LossSpec::default()
    };
    let tape = Tape::new();
    let leaves = student.leaves(&tape);
    let c = composite_loss(&spec, &x, &labels, &tape, Some(&teacher), &student, &leaves).unwrap();

    let (mut ce, mut act, mut jac) = (0.0, 0.0, 0.0);
    for b in 0..3 {
        let xb = &x.data()[b * 2..b * 2 + 2];
        let (yt, ys) = (teacher.eval(xb, Head::Source).unwrap(), student.eval(xb, Head::Source).unwrap());
        ce -= softmax(&ys, 1.0)[labels[b]].ln();
        act += yt.iter().zip(&ys).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let (jt, js) = (fd_input_jacobian(&teacher, Head::Source, xb), fd_input_jacobian(&student, Head::Source, xb));
        jac += jt.iter().flatten().zip(js.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let (ce, act, jac) = (ce / 3.0, act / 3.0, 0.16 * jac / 3.0);
    let want = 0.5 * ce + 2.0 * act + 1.5 * jac;
    assert!((c.term("ce").unwrap().raw - ce).abs() < 1e-12);
    assert!((c.term("act").unwrap().raw - act).abs() < 1e-12);
    assert!((c.term("jac").unwrap().raw - jac).abs() < 1e-8);
    assert!((c.total.item() - want).abs() < 1e-8);
    assert_eq!(c.term("jac").unwrap().weighted, 1.5 * c.term("jac").unwrap().raw);
}

#[test]
fn composite_rows_select_terms() {
    let teacher = sigmoid_mlp(2, 3, 1);
    let student = sigmoid_mlp(2, 3, 2);
    let x = random_batch(2, &[2], 1);
    let labels = [0, 1];
    let run = |spec: &LossSpec| {
        let tape = Tape::new();
        let leaves = student.leaves(&tape);
        let c = composite_loss(spec, &x, &labels, &tape, Some(&teacher), &student, &leaves).unwrap();
        (c.terms.iter().map(|t| t.name.clone()).collect::<Vec<_>>(), tape.len())
    };
    let (ce_only, ce_nodes) = run(&LossSpec::ce_only());
    assert_eq!(ce_only, vec!["ce"]);
    let act_only = LossSpec {
        alpha: 0.0,
        gamma: 0.0,
        ..LossSpec::default()
    };
    assert_eq!(run(&act_only).0, vec!["act"]);
    let (all, all_nodes) = run(&LossSpec::default());
    assert_eq!(all, vec!["ce", "act", "jac"]);
    assert!(all_nodes > ce_nodes);
}

#[test]
fn composite_warns_on_zero_sigma_and_tags_term_errors() {
    let teacher = sigmoid_mlp(2, 3, 1);
    let student = sigmoid_mlp(2, 3, 2);
    let x = random_batch(1, &[2], 1);
    let tape = Tape::new();
    let leaves = student.leaves(&tape);
    let spec = LossSpec {
        sigma: 0.0,
        ..LossSpec::default()
    };
    let c = composite_loss(&spec, &x, &[1], &tape, Some(&teacher), &student, &leaves).unwrap();
    assert!(c.term("jac").unwrap().warning.is_some());
    assert_eq!(c.term("jac").unwrap().raw, 0.0);

    let err = composite_loss(&LossSpec::default(), &x, &[1], &tape, None, &student, &leaves).unwrap_err();
    assert!(matches!(err, Error::Term { ref term, .. } if term == "act"));
    let err = composite_loss(&LossSpec::ce_only(), &x, &[7], &tape, None, &student, &leaves).unwrap_err();
    assert!(matches!(err, Error::Term { ref term, .. } if term == "ce"));
}

#[test]
fn loss_spec_validation_and_parsing() {
    assert!(LossSpec { alpha: -1.0, ..LossSpec::default() }.validate().is_err());
    assert!(LossSpec { temperature: 0.0, ..LossSpec::default() }.validate().is_err());
    assert!(LossSpec { attention: 1.0, ..LossSpec::default() }.validate().is_err());
    let s: LossSpec = serde_json::from_str(r#"{"gamma": 2.0, "family": "cross-entropy"}"#).unwrap();
    assert_eq!((s.alpha, s.gamma, s.family), (1.0, 2.0, Family::CrossEntropy));
    assert!(serde_json::from_str::<LossSpec>(r#"{"gama": 2.0}"#).is_err());
}
