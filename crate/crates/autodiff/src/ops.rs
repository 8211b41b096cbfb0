use std::rc::Rc;
use std::str::FromStr;

use crate::error::{AutodiffError, Result};
use crate::sparse::SparseMap;
use crate::tensor::Tensor;

/// Recorded operation together with whatever its backward rule needs.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sqrt,
    MatMul,
    Transpose,
    Reshape,
    Linear {
        map: Rc<SparseMap>,
        adjoint: bool,
        label: &'static str,
    },
    Softmax(f64),
    LogSoftmax(f64),
    Concat {
        axis: usize,
    },
}

impl Op {
    pub(crate) fn describe(&self) -> String {
        match self {
            Op::Scale(c) => format!("scale({c})"),
            Op::AddScalar(c) => format!("add_scalar({c})"),
            Op::Softmax(t) => format!("softmax(T={t})"),
            Op::LogSoftmax(t) => format!("log_softmax(T={t})"),
            Op::Concat { axis } => format!("concat(axis={axis})"),
            other => other.name().to_string(),
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Linear { label, adjoint, .. } => {
                if *adjoint {
                    match *label {
                        "max_pool2d" => "max_pool2d_backward",
                        "im2col" => "col2im",
                        "avg_pool2d" => "avg_pool2d_backward",
                        "sum" | "sum_axis" => "expand",
                        "expand_axis" => "sum_axis",
                        "broadcast" => "reduce_broadcast",
                        _ => "scatter",
                    }
                } else {
                    label
                }
            }
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Concat { .. } => "concat",
        }
    }
}

/// Public catalogue of recordable operations, for [`record`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Relu,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sqrt,
    MatMul,
    Transpose,
    /// Inputs: x, weight, and optionally bias.
    Conv2d,
    MaxPool2d,
    AvgPool2d { window: usize, stride: usize },
    GlobalAvgPool,
    Softmax { temperature: f64 },
    LogSoftmax { temperature: f64 },
    Sum,
    SumAxis(usize),
    Reshape(Vec<usize>),
    Concat { axis: usize },
    IndexSelect { axis: usize, indices: Vec<usize> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool",
            OpKind::AvgPool2d { .. } => "avgpool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LogSoftmax { .. } => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::IndexSelect { .. } => "index_select",
        }
    }
}

/// Parses parameter-free op names; parameterised kinds take defaults
/// (temperature 1, a 2x2 stride-1 average pool, scale 1, axis 0).
impl FromStr for OpKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "div" => OpKind::Div,
            "neg" => OpKind::Neg,
            "scale" => OpKind::Scale(1.0),
            "relu" => OpKind::Relu,
            "sigmoid" => OpKind::Sigmoid,
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "square" => OpKind::Square,
            "sqrt" => OpKind::Sqrt,
            "matmul" => OpKind::MatMul,
            "transpose" => OpKind::Transpose,
            "conv2d" => OpKind::Conv2d,
            "maxpool" => OpKind::MaxPool2d,
            "avgpool" => OpKind::AvgPool2d { window: 2, stride: 1 },
            "global_avg_pool" => OpKind::GlobalAvgPool,
            "softmax" => OpKind::Softmax { temperature: 1.0 },
            "log_softmax" => OpKind::LogSoftmax { temperature: 1.0 },
            "sum" => OpKind::Sum,
            "concat" => OpKind::Concat { axis: 0 },
            other => return Err(AutodiffError::UnknownOp(other.to_string())),
        })
    }
}

/// Records `kind` applied to `inputs`, computing the value eagerly.
pub fn record(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = |n: usize| {
        if inputs.len() != n {
            Err(AutodiffError::Arity {
                op: kind.name(),
                expected: n,
                got: inputs.len(),
            })
        } else {
            Ok(())
        }
    };
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => {
            arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            match kind {
                OpKind::Add => a.add(b),
                OpKind::Sub => a.sub(b),
                OpKind::Mul => a.mul(b),
                OpKind::Div => a.div(b),
                _ => a.matmul(b),
            }
        }
        OpKind::Conv2d => match inputs.len() {
            2 => inputs[0].conv2d(inputs[1], None),
            3 => inputs[0].conv2d(inputs[1], Some(inputs[2])),
            got => Err(AutodiffError::Arity {
                op: "conv2d",
                expected: 3,
                got,
            }),
        },
        OpKind::Concat { axis } => Tensor::concat(inputs, *axis),
        unary => {
            arity(1)?;
            let x = inputs[0];
            match unary {
                OpKind::Neg => x.neg(),
                OpKind::Scale(c) => x.scale(*c),
                OpKind::Relu => x.relu(),
                OpKind::Sigmoid => x.sigmoid(),
                OpKind::Exp => x.exp(),
                OpKind::Log => x.ln(),
                OpKind::Square => x.square(),
                OpKind::Sqrt => x.sqrt(),
                OpKind::Transpose => x.transpose(),
                OpKind::MaxPool2d => x.max_pool2d(),
                OpKind::AvgPool2d { window, stride } => x.avg_pool2d(*window, *stride),
                OpKind::GlobalAvgPool => x.global_avg_pool(),
                OpKind::Softmax { temperature } => x.softmax(*temperature),
                OpKind::LogSoftmax { temperature } => x.log_softmax(*temperature),
                OpKind::Sum => x.sum(),
                OpKind::SumAxis(axis) => x.sum_axis(*axis),
                OpKind::Reshape(shape) => x.reshape(shape),
                OpKind::IndexSelect { axis, indices } => x.index_select(*axis, indices),
                _ => unreachable!("binary kinds handled above"),
            }
        }
    }
}

/// Vector-Jacobian products of `op`, expressed with recordable tensor ops so
/// that, when the inputs live on a tape, the result is itself differentiable.
pub(crate) fn vjp(op: &Op, xs: &[Tensor], y: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        Op::Leaf | Op::Const => Ok(Vec::new()),
        Op::Add => Ok(vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())]),
        Op::Sub => Ok(vec![want(0).then(|| g.clone()), if want(1) { Some(g.neg()?) } else { None }]),
        Op::Mul => Ok(vec![
            if want(0) { Some(g.mul(&xs[1])?) } else { None },
            if want(1) { Some(g.mul(&xs[0])?) } else { None },
        ]),
        Op::Div => Ok(vec![
            if want(0) { Some(g.div(&xs[1])?) } else { None },
            if want(1) { Some(g.mul(y)?.div(&xs[1])?.neg()?) } else { None },
        ]),
        Op::Neg => one(g.neg()),
        Op::Scale(c) => one(g.scale(*c)),
        Op::AddScalar(_) => Ok(vec![Some(g.clone())]),
        Op::Relu => {
            let mask: Vec<f64> = xs[0].data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            one(g.mul(&Tensor::new(mask, xs[0].shape())?))
        }
        Op::Sigmoid => {
            let slope = y.mul(&y.neg()?.add_scalar(1.0)?)?;
            one(g.mul(&slope))
        }
        Op::Exp => one(g.mul(y)),
        Op::Log => one(g.div(&xs[0])),
        Op::Square => one(g.mul(&xs[0])?.scale(2.0)),
        Op::Sqrt => one(g.scale(0.5)?.div(y)),
        Op::Reshape => one(g.reshape(xs[0].shape())),
        Op::Transpose => one(g.transpose()),
        Op::MatMul => {
            let (a, b) = (&xs[0], &xs[1]);
            let da = if want(0) {
                let mut d = g.matmul(&b.transpose()?)?;
                if d.ndim() > a.ndim() {
                    d = d.sum_axis(0)?;
                }
                Some(d)
            } else {
                None
            };
            let db = if want(1) {
                let mut d = a.transpose()?.matmul(g)?;
                if d.ndim() > b.ndim() {
                    d = d.sum_axis(0)?;
                }
                Some(d)
            } else {
                None
            };
            Ok(vec![da, db])
        }
        Op::Linear { map, adjoint, label } => {
            let shape = xs[0].shape().to_vec();
            if *adjoint {
                one(g.linear(map.clone(), shape, label))
            } else {
                one(g.linear_adjoint(map.clone(), shape, label))
            }
        }
        Op::Softmax(t) => {
            let w = *y.shape().last().unwrap();
            let gy = g.mul(y)?;
            let s = gy.sum_last()?.expand_last(w)?;
            one(gy.sub(&y.mul(&s)?)?.scale(1.0 / t))
        }
        Op::LogSoftmax(t) => {
            let w = *y.shape().last().unwrap();
            let p = y.exp()?;
            let s = g.sum_last()?.expand_last(w)?;
            one(g.sub(&p.mul(&s)?)?.scale(1.0 / t))
        }
        Op::Concat { axis } => {
            let mut out = Vec::with_capacity(xs.len());
            let mut start = 0;
            for (i, x) in xs.iter().enumerate() {
                let len = x.shape()[*axis];
                if want(i) {
                    let map = crate::sparse::slice(g.shape(), *axis, start, len);
                    out.push(Some(g.linear(Rc::new(map), x.shape().to_vec(), "slice")?));
                } else {
                    out.push(None);
                }
                start += len;
            }
            Ok(out)
        }
    }
}
