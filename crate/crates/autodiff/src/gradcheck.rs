//! First- and second-order gradient checks for every recordable op kind.
//!
//! Each check contracts the op output with fixed weights to get a scalar
//! `h(inputs)`, then compares
//! - `∇h` from [`backward`] against central differences of `h`, and
//! - `∇⟨s, ∇h⟩` from a `create_graph` double backward against central
//!   differences of the first-order gradient contraction.

use crate::backward::backward;
use crate::error::Result;
use crate::numeric::{central_gradient, max_relative_error};
use crate::ops::{record, OpKind};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Every op kind with the parameters used when checking it.
pub fn catalogue() -> Vec<OpKind> {
    vec![
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Scale(-1.7),
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Square,
        OpKind::Sqrt,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d { window: 2, stride: 1 },
        OpKind::GlobalAvgPool,
        OpKind::Softmax { temperature: 2.0 },
        OpKind::LogSoftmax { temperature: 0.5 },
        OpKind::Sum,
        OpKind::SumAxis(1),
        OpKind::Reshape(vec![0]),
        OpKind::Concat { axis: 1 },
        OpKind::IndexSelect {
            axis: 1,
            indices: vec![0],
        },
    ]
}

/// Draws valid inputs for `kind`. `uniform` must yield values in `[0, 1)`;
/// `size` in `1..=3` scales the randomized extents.
///
/// Inputs to kinked ops (relu, max pooling) keep a margin of at least `1e-3`
/// from the kink so central differences with small steps stay on one side.
pub fn sample_inputs(kind: &OpKind, size: usize, uniform: &mut dyn FnMut() -> f64) -> (OpKind, Vec<Tensor>) {
    let size = size.clamp(1, 3);
    let r = 1 + (uniform() * size as f64) as usize;
    let c = 2 + (uniform() * size as f64) as usize;
    let tensor = |shape: &[usize], lo: f64, hi: f64, uniform: &mut dyn FnMut() -> f64| {
        let n: usize = shape.iter().product();
        let v = (0..n).map(|_| lo + (hi - lo) * uniform()).collect();
        Tensor::new(v, shape).expect("valid sample shape")
    };
    let mut kind = kind.clone();
    let inputs = match &mut kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![tensor(&[r, c], -2.0, 2.0, uniform), tensor(&[r, c], -2.0, 2.0, uniform)],
        OpKind::Div => vec![tensor(&[r, c], -2.0, 2.0, uniform), tensor(&[r, c], 0.5, 2.0, uniform)],
        OpKind::Log | OpKind::Sqrt => vec![tensor(&[r, c], 0.5, 2.0, uniform)],
        OpKind::Relu => {
            let t = tensor(&[r, c], -2.0, 2.0, uniform);
            let v = t.data().iter().map(|&x| if x.abs() < 1e-3 { x + 0.01 } else { x }).collect();
            vec![Tensor::new(v, &[r, c]).unwrap()]
        }
        OpKind::MatMul => {
            let k = c + 1;
            vec![tensor(&[2, r, k], -1.0, 1.0, uniform), tensor(&[k, c], -1.0, 1.0, uniform)]
        }
        OpKind::Transpose => vec![tensor(&[2, r, c], -1.0, 1.0, uniform)],
        OpKind::Conv2d => {
            let (ci, co, hw) = (r, c, 3 + size);
            vec![
                tensor(&[2, ci, hw, hw], -1.0, 1.0, uniform),
                tensor(&[co, ci, 3, 3], -0.5, 0.5, uniform),
                tensor(&[co], -0.5, 0.5, uniform),
            ]
        }
        OpKind::MaxPool2d => {
            // distinct values spaced 0.05 apart, shuffled, so windows have clear winners
            let (ch, hw) = (r, 2 * (1 + size));
            let n = ch * hw * hw;
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = (uniform() * (i + 1) as f64) as usize;
                order.swap(i, j.min(i));
            }
            let v = order.iter().map(|&o| o as f64 * 0.05 - 1.0 + 0.01 * uniform()).collect();
            vec![Tensor::new(v, &[1, ch, hw, hw]).unwrap()]
        }
        OpKind::AvgPool2d { .. } => vec![tensor(&[r, 2 + size, 3 + size], -1.0, 1.0, uniform)],
        OpKind::GlobalAvgPool => vec![tensor(&[2, r, 2, 3], -1.0, 1.0, uniform)],
        OpKind::Softmax { .. } | OpKind::LogSoftmax { .. } => vec![tensor(&[r, c + 1], -2.0, 2.0, uniform)],
        OpKind::SumAxis(_) => vec![tensor(&[r, c, 2], -1.0, 1.0, uniform)],
        OpKind::Reshape(shape) => {
            *shape = vec![c, r];
            vec![tensor(&[r, c], -1.0, 1.0, uniform)]
        }
        OpKind::Concat { .. } => vec![tensor(&[r, c], -1.0, 1.0, uniform), tensor(&[r, 1], -1.0, 1.0, uniform)],
        OpKind::IndexSelect { indices, .. } => {
            *indices = (0..c + 1).map(|_| (uniform() * c as f64) as usize).collect();
            vec![tensor(&[r, c], -1.0, 1.0, uniform)]
        }
        _ => vec![tensor(&[r, c], -1.5, 1.5, uniform)],
    };
    (kind, inputs)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub op: &'static str,
    /// Max relative error of the first-order gradient.
    pub first_order: f64,
    /// Max relative error of the second-order (Hessian-vector) gradient.
    pub second_order: f64,
}

fn weights(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|j| 1.0 + 0.5 * ((j as f64) * 0.7 + phase).sin()).collect()
}

/// `h = Σ w ⊙ kind(inputs)` evaluated on detached values.
fn contract(kind: &OpKind, inputs: &[Tensor]) -> Result<f64> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let y = record(kind, &refs)?;
    let w = weights(y.numel(), 0.3);
    Ok(y.data().iter().zip(&w).map(|(a, b)| a * b).sum())
}

/// `(h, [∇h per input])`, optionally with the graph kept for double backward.
fn first_order(kind: &OpKind, inputs: &[Tensor], create_graph: bool) -> Result<(Tape, Vec<Tensor>, Vec<Tensor>)> {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let y = record(kind, &refs)?;
    let w = Tensor::new(weights(y.numel(), 0.3), y.shape())?;
    let h = y.mul(&w)?.sum()?;
    let grads = backward(&h, &refs, create_graph)?;
    Ok((tape, leaves, grads.into_iter().map(|g| g.value).collect()))
}

/// `L = Σ_i ⟨s_i, ∇_i h⟩` on detached values.
fn grad_contraction(kind: &OpKind, inputs: &[Tensor]) -> Result<f64> {
    let (_, _, grads) = first_order(kind, inputs, false)?;
    Ok(grads
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let s = weights(g.numel(), 1.1 + i as f64);
            g.data().iter().zip(&s).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum())
}

fn split(flat: &[f64], like: &[Tensor]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let n = t.numel();
            let v = flat[off..off + n].to_vec();
            off += n;
            Tensor::new(v, t.shape()).unwrap()
        })
        .collect()
}

/// Runs both checks with central-difference step `h`.
pub fn check(kind: &OpKind, inputs: &[Tensor], h: f64) -> Result<GradCheck> {
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();

    let (_, _, grads) = first_order(kind, inputs, false)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let numeric = central_gradient(|x| contract(kind, &split(x, inputs)).unwrap(), &flat, h);
    let first = max_relative_error(&analytic, &numeric);

    let (_, leaves, grads) = first_order(kind, inputs, true)?;
    let mut l = Tensor::scalar(0.0);
    for (i, g) in grads.iter().enumerate() {
        let s = Tensor::new(weights(g.numel(), 1.1 + i as f64), g.shape())?;
        l = l.add(&g.mul(&s)?.sum()?)?;
    }
    let second_analytic: Vec<f64> = if l.is_detached() {
        // gradient is constant in the inputs
        vec![0.0; flat.len()]
    } else {
        let refs: Vec<&Tensor> = leaves.iter().collect();
        backward(&l, &refs, false)?
            .iter()
            .flat_map(|g| g.value.data().to_vec())
            .collect()
    };
    let second_numeric = central_gradient(|x| grad_contraction(kind, &split(x, inputs)).unwrap(), &flat, h);
    let second = max_relative_error(&second_analytic, &second_numeric);

    Ok(GradCheck {
        op: kind.name(),
        first_order: first,
        second_order: second,
    })
}
