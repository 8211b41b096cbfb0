use jacmatch_autodiff::numeric::{central_gradient, max_relative_error};
use jacmatch_autodiff::{backward, grad, jacobian, AutodiffError, Tape, Tensor};

#[test]
fn square_derivative() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0));
    let f = x.square().unwrap();
    assert_eq!(grad(&f, &x, false).unwrap().item(), 6.0);
}

#[test]
fn sigmoid_mixed_second_derivative() {
    // f = sigmoid(w x) at w = 0, x = 1: df/dx = s'(0) w = 0, d2f/dx dw = s'(0) = 0.25
    let tape = Tape::new();
    let w = tape.leaf(&Tensor::scalar(0.0));
    let x = tape.leaf(&Tensor::scalar(1.0));
    let f = w.mul(&x).unwrap().sigmoid().unwrap();
    let dfdx = grad(&f, &x, true).unwrap();
    assert_eq!(dfdx.item(), 0.0);
    let d2 = grad(&dfdx, &w, false).unwrap();
    assert!((d2.item() - 0.25).abs() < 1e-15);
}

/// `L(W) = ‖∇ₓ sum(relu(W x))‖²`, first-order backward only.
fn grad_norm_sq(w: &[f64], x: &[f64]) -> f64 {
    let tape = Tape::new();
    let wt = Tensor::new(w.to_vec(), &[3, 2]).unwrap();
    let xt = tape.leaf(&Tensor::new(x.to_vec(), &[2, 1]).unwrap());
    let f = wt.matmul(&xt).unwrap().relu().unwrap().sum().unwrap();
    let g = grad(&f, &xt, false).unwrap();
    g.data().iter().map(|v| v * v).sum()
}

#[test]
fn double_backward_matches_finite_differences() {
    let w0 = vec![0.3, -0.8, 1.1, 0.4, -0.5, 0.9];
    let x0 = vec![0.7, -0.2];
    let tape = Tape::new();
    let w = tape.leaf(&Tensor::new(w0.clone(), &[3, 2]).unwrap());
    let x = tape.leaf(&Tensor::new(x0.clone(), &[2, 1]).unwrap());
    let f = w.matmul(&x).unwrap().relu().unwrap().sum().unwrap();
    let gx = grad(&f, &x, true).unwrap();
    let l = gx.square().unwrap().sum().unwrap();
    let analytic = grad(&l, &w, false).unwrap();
    let numeric = central_gradient(|wv| grad_norm_sq(wv, &x0), &w0, 1e-5);
    assert!(max_relative_error(analytic.data(), &numeric) < 1e-4);
    assert!(tape.backward_recorded_nodes() > 0);
}

#[test]
fn unrelated_wrt_gets_zero() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(2.0));
    let z = tape.leaf(&Tensor::from_vec(vec![1.0, 1.0]));
    let f = x.square().unwrap();
    let g = backward(&f, &[&x, &z], false).unwrap();
    assert_eq!(g[1].value.data(), &[0.0, 0.0]);
    assert_eq!(g[1].value.shape(), z.shape());
    assert_eq!(g[0].wrt, x.node_id());
}

#[test]
fn non_scalar_output_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::ones(&[2]));
    let y = x.square().unwrap();
    assert_eq!(
        backward(&y, &[&x], false).unwrap_err(),
        AutodiffError::NonScalarOutput(vec![2])
    );
}

#[test]
fn detached_output_rejected() {
    let y = Tensor::scalar(1.0);
    assert_eq!(backward(&y, &[], false).unwrap_err(), AutodiffError::DetachedOutput);
}

#[test]
fn jacobian_of_linear_map() {
    let tape = Tape::new();
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let x = tape.leaf(&Tensor::new(vec![0.3, -0.1], &[2, 1]).unwrap());
    let y = a.matmul(&x).unwrap();
    let j = jacobian(&y, &x).unwrap();
    assert!(!j.disconnected);
    assert_eq!(j.value.shape(), &[2, 2]);
    assert_eq!(j.value.data(), a.data());
}

#[test]
fn jacobian_of_two_layer_relu_in_active_region() {
    // all pre-activations positive, so J = W2 W1
    let w1 = Tensor::new(vec![1.0, 0.5, 0.2, 1.0, 0.3, 0.3], &[3, 2]).unwrap();
    let w2 = Tensor::new(vec![1.0, -1.0, 2.0, 0.5, 0.5, 0.5], &[2, 3]).unwrap();
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![1.0, 1.0], &[2, 1]).unwrap());
    let h = w1.matmul(&x).unwrap().relu().unwrap();
    let y = w2.matmul(&h).unwrap().relu().unwrap();
    assert!(y.data().iter().all(|&v| v > 0.0));
    // W2 W1 by hand: [[1-0.2+0.6, 0.5-1+0.6], [0.5+0.1+0.15, 0.25+0.5+0.15]]
    let expected = [1.4, 0.1, 0.75, 0.9];
    let j = jacobian(&y, &x).unwrap();
    for (a, b) in j.value.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn jacobian_of_constant_is_zero() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let c = tape.constant(&Tensor::from_vec(vec![5.0, 6.0]));
    let j = jacobian(&c, &x).unwrap();
    assert!(j.disconnected);
    assert_eq!(j.value.shape(), &[2, 3]);
    assert!(j.value.data().iter().all(|&v| v == 0.0));
}

#[test]
fn local_linearity_of_relu_maxpool_net() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let w: Vec<f64> = (0..2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::new(w, &[2, 1, 3, 3]).unwrap();
    let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = Tensor::new(v, &[8, 1]).unwrap();
    let f = |x: &Tensor| -> Tensor {
        x.conv2d(&w, None)
            .unwrap()
            .relu()
            .unwrap()
            .max_pool2d()
            .unwrap()
            .reshape(&[1, 8])
            .unwrap()
            .matmul(&v)
            .unwrap()
    };
    let pattern = |x: &Tensor| -> Vec<u8> {
        let pre = x.conv2d(&w, None).unwrap();
        let mut p: Vec<u8> = pre.data().iter().map(|&a| (a > 0.0) as u8).collect();
        let act = pre.relu().unwrap();
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut best = (0usize, f64::NEG_INFINITY);
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = c * 16 + (2 * i + di) * 4 + 2 * j + dj;
                            if act.data()[idx] > best.1 {
                                best = (idx, act.data()[idx]);
                            }
                        }
                    }
                    p.push(best.0 as u8);
                }
            }
        }
        p
    };
    let mut checked = 0;
    for _ in 0..200 {
        let x0: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dx: Vec<f64> = (0..16).map(|_| rng.random_range(-1e-3..1e-3)).collect();
        let x = Tensor::new(x0.clone(), &[1, 1, 4, 4]).unwrap();
        let xd = Tensor::new(x0.iter().zip(&dx).map(|(a, b)| a + b).collect(), &[1, 1, 4, 4]).unwrap();
        if pattern(&x) != pattern(&xd) {
            continue;
        }
        let tape = Tape::new();
        let xl = tape.leaf(&x);
        let y = f(&xl);
        let j = jacobian(&y, &xl).unwrap();
        let lin: f64 = j.value.data().iter().zip(&dx).map(|(a, b)| a * b).sum();
        let fx = y.item();
        let fxd = f(&xd).item();
        assert!((fxd - fx - lin).abs() <= 1e-9 * (1.0 + fx.abs()));
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![0.1, -0.4, 0.9, 0.3], &[2, 2]).unwrap());
        let y = x.matmul(&x).unwrap().sigmoid().unwrap().softmax(1.5).unwrap();
        let g = grad(&y.ln().unwrap().sum().unwrap(), &x, true).unwrap();
        let h = grad(&g.square().unwrap().sum().unwrap(), &x, false).unwrap();
        (tape.dump(), g.to_vec(), h.to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn taped_grad_can_be_differentiated_again() {
    // f = x^3 -> f' = 3x^2 -> f'' = 6x
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(2.0));
    let f = x.square().unwrap().mul(&x).unwrap();
    let d1 = grad(&f, &x, true).unwrap();
    assert_eq!(d1.item(), 12.0);
    let d2 = grad(&d1, &x, false).unwrap();
    assert_eq!(d2.item(), 12.0);
    assert!(tape.generation() >= 2);
}
