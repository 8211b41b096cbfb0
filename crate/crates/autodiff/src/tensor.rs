use std::fmt;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::ops::Op;
use crate::sparse::{self, SparseMap};
use crate::tape::{NodeId, Tape};

/// Dense row-major `f64` array, optionally recorded on a [`Tape`].
///
/// An empty shape denotes a scalar. Cloning is cheap: data is shared.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<[f64]>,
    node: Option<(Tape, NodeId)>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &&self.data[..]);
        } else {
            s.field("numel", &self.data.len());
        }
        s.field("node", &self.node.as_ref().map(|(_, id)| id.0));
        s.finish()
    }
}

impl Tensor {
    pub(crate) fn from_parts(shape: Vec<usize>, data: Rc<[f64]>, node: Option<(Tape, NodeId)>) -> Self {
        Self { shape, data, node }
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(AutodiffError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data.into(), None))
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data.into(), None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(Vec::new(), Rc::from(vec![v]), None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n].into(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub(crate) fn shared_data(&self) -> Rc<[f64]> {
        self.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_detached(&self) -> bool {
        self.node.is_none()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|(t, _)| t)
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    /// Same values, no provenance.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.clone(), None)
    }

    // ---- recording -------------------------------------------------------

    pub(crate) fn emit(op: Op, inputs: &[&Tensor], shape: Vec<usize>, value: Vec<f64>) -> Result<Tensor> {
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some((tp, _)) = &t.node {
                match tape {
                    None => tape = Some(tp),
                    Some(existing) if !existing.same(tp) => return Err(AutodiffError::TapeMismatch),
                    _ => {}
                }
            }
        }
        let value: Rc<[f64]> = value.into();
        let Some(tape) = tape else {
            return Ok(Self::from_parts(shape, value, None));
        };
        let ids = inputs
            .iter()
            .map(|t| match &t.node {
                Some((_, id)) => *id,
                None => tape.constant(t).node_id().expect("constant is recorded"),
            })
            .collect();
        Ok(tape.push_node(op, ids, shape, value))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(AutodiffError::ShapeMismatch {
                op,
                shapes: vec![self.shape.clone(), other.shape.clone()],
            });
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op.name())?;
        let v = self.data.iter().zip(other.data.iter()).map(|(a, b)| f(*a, *b)).collect();
        Tensor::emit(op, &[self, other], self.shape.clone(), v)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let v = self.data.iter().map(|a| f(*a)).collect();
        Tensor::emit(op, &[self], self.shape.clone(), v)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(Op::Neg, |a| -a)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::Scale(c), |a| c * a)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::AddScalar(c), |a| a + c)
    }

    /// `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Op::Relu, |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.unary(Op::Log, f64::ln)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary(Op::Square, |a| a * a)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                shapes: vec![self.shape.clone(), shape.to_vec()],
            });
        }
        Tensor::emit(Op::Reshape, &[self], shape.to_vec(), self.data.to_vec())
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if !(2..=3).contains(&nd) {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                shapes: vec![self.shape.clone()],
            });
        }
        let (r, c) = (self.shape[nd - 2], self.shape[nd - 1]);
        let batch = if nd == 3 { self.shape[0] } else { 1 };
        let mut v = vec![0.0; self.numel()];
        for b in 0..batch {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    v[off + j * r + i] = self.data[off + i * c + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(nd - 2, nd - 1);
        Tensor::emit(Op::Transpose, &[self], shape, v)
    }

    /// Applies a sparse linear map to the flattened tensor.
    pub(crate) fn linear(&self, map: Rc<SparseMap>, out_shape: Vec<usize>, label: &'static str) -> Result<Tensor> {
        debug_assert_eq!(map.in_len(), self.numel());
        let v = map.apply(&self.data);
        Tensor::emit(Op::Linear { map, adjoint: false, label }, &[self], out_shape, v)
    }

    pub(crate) fn linear_adjoint(&self, map: Rc<SparseMap>, out_shape: Vec<usize>, label: &'static str) -> Result<Tensor> {
        debug_assert_eq!(map.out_len(), self.numel());
        let v = map.apply_adjoint(&self.data);
        Tensor::emit(Op::Linear { map, adjoint: true, label }, &[self], out_shape, v)
    }

    // ---- reductions and broadcasts -------------------------------------

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let mut b = SparseMap::builder(1, self.numel());
        b.row((0..self.numel()).map(|i| (i, 1.0)));
        self.linear(Rc::new(b.build()), Vec::new(), "sum")
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "sum_axis")?;
        let map = sparse::sum_axis(&self.shape, axis);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        self.linear(Rc::new(map), shape, "sum_axis")
    }

    /// Sums over the last axis.
    pub fn sum_last(&self) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(self.bad_axis("sum_last"));
        }
        self.sum_axis(self.ndim() - 1)
    }

    /// Inserts a new axis at `axis` with extent `n`, repeating values.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Tensor> {
        if axis > self.ndim() || n == 0 {
            return Err(self.bad_axis("expand_axis"));
        }
        let mut shape = self.shape.clone();
        shape.insert(axis, n);
        let map = sparse::sum_axis(&shape, axis);
        self.linear_adjoint(Rc::new(map), shape, "expand_axis")
    }

    /// Appends a trailing axis of extent `n`.
    pub fn expand_last(&self, n: usize) -> Result<Tensor> {
        self.expand_axis(self.ndim(), n)
    }

    /// Broadcasts into `target`; `kept[i]` names the target axis carrying this
    /// tensor's axis `i`.
    pub fn broadcast_to(&self, target: &[usize], kept: &[usize]) -> Result<Tensor> {
        let ok = kept.len() == self.ndim()
            && kept.windows(2).all(|w| w[0] < w[1])
            && kept.iter().zip(&self.shape).all(|(&a, &s)| a < target.len() && target[a] == s);
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast",
                shapes: vec![self.shape.clone(), target.to_vec()],
            });
        }
        let map = sparse::broadcast(&self.shape, target, kept);
        self.linear(Rc::new(map), target.to_vec(), "broadcast")
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        self.check_axis(axis, "index_select")?;
        if indices.is_empty() || indices.iter().any(|&i| i >= self.shape[axis]) {
            return Err(AutodiffError::InvalidArgument {
                op: "index_select",
                msg: format!("indices {indices:?} out of range for axis of size {}", self.shape[axis]),
            });
        }
        let map = sparse::index_select(&self.shape, axis, indices);
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        self.linear(Rc::new(map), shape, "index_select")
    }

    /// Single flat element as a scalar.
    pub fn element(&self, flat: usize) -> Result<Tensor> {
        if flat >= self.numel() {
            return Err(AutodiffError::InvalidArgument {
                op: "element",
                msg: format!("index {flat} out of range for {} elements", self.numel()),
            });
        }
        let mut b = SparseMap::builder(1, self.numel());
        b.row([(flat, 1.0)]);
        self.linear(Rc::new(b.build()), Vec::new(), "element")
    }

    /// `(B, k) -> (B)`, taking column `cols[b]` from row `b`.
    pub fn select_per_row(&self, cols: &[usize]) -> Result<Tensor> {
        if self.ndim() != 2 || cols.len() != self.shape[0] || cols.iter().any(|&c| c >= self.shape[1]) {
            return Err(AutodiffError::InvalidArgument {
                op: "select_per_row",
                msg: format!("{} column indices for shape {:?}", cols.len(), self.shape),
            });
        }
        let map = sparse::select_per_row(self.shape[0], self.shape[1], cols);
        self.linear(Rc::new(map), vec![self.shape[0]], "select_per_row")
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(AutodiffError::Arity {
            op: "concat",
            expected: 1,
            got: 0,
        })?;
        first.check_axis(axis, "concat")?;
        let compatible = parts.iter().all(|p| {
            p.ndim() == first.ndim()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b)
        });
        if !compatible {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                shapes: parts.iter().map(|p| p.shape.clone()).collect(),
            });
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut v = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = p.shape[axis] * inner;
                v.extend_from_slice(&p.data[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::emit(Op::Concat { axis }, parts, shape, v)
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix product with an optional shared leading batch axis:
    /// `(M,K)x(K,N)`, `(B,M,K)x(B,K,N)`, `(M,K)x(B,K,N)` or `(B,M,K)x(K,N)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let err = || AutodiffError::ShapeMismatch {
            op: "matmul",
            shapes: vec![self.shape.clone(), other.shape.clone()],
        };
        let (a, b) = (&self.shape, &other.shape);
        let (batch, m, k, n) = match (a.len(), b.len()) {
            (2, 2) => (None, a[0], a[1], b[1]),
            (3, 3) if a[0] == b[0] => (Some(a[0]), a[1], a[2], b[2]),
            (2, 3) => (Some(b[0]), a[0], a[1], b[2]),
            (3, 2) => (Some(a[0]), a[1], a[2], b[1]),
            _ => return Err(err()),
        };
        let k2 = if b.len() == 3 { b[1] } else { b[0] };
        if k != k2 {
            return Err(err());
        }
        let nb = batch.unwrap_or(1);
        let a_step = if a.len() == 3 { m * k } else { 0 };
        let b_step = if b.len() == 3 { k * n } else { 0 };
        let mut v = vec![0.0; nb * m * n];
        for bi in 0..nb {
            matmul_into(
                &self.data[bi * a_step..bi * a_step + m * k],
                &other.data[bi * b_step..bi * b_step + k * n],
                &mut v[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = match batch {
            Some(bs) => vec![bs, m, n],
            None => vec![m, n],
        };
        Tensor::emit(Op::MatMul, &[self, other], shape, v)
    }

    // ---- softmax -----------------------------------------------------------

    /// Softmax over the last axis of `x / temperature`.
    pub fn softmax(&self, temperature: f64) -> Result<Tensor> {
        self.check_temperature("softmax", temperature)?;
        let v = self.rowwise(|row, out| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = ((x - mx) / temperature).exp();
                s += *o;
            }
            out.iter_mut().for_each(|o| *o /= s);
        })?;
        Tensor::emit(Op::Softmax(temperature), &[self], self.shape.clone(), v)
    }

    /// Log-softmax over the last axis of `x / temperature`.
    pub fn log_softmax(&self, temperature: f64) -> Result<Tensor> {
        self.check_temperature("log_softmax", temperature)?;
        let v = self.rowwise(|row, out| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| ((x - mx) / temperature).exp()).sum::<f64>().ln();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - mx) / temperature - lse;
            }
        })?;
        Tensor::emit(Op::LogSoftmax(temperature), &[self], self.shape.clone(), v)
    }

    fn rowwise(&self, f: impl Fn(&[f64], &mut [f64])) -> Result<Vec<f64>> {
        if self.ndim() == 0 {
            return Err(self.bad_axis("softmax"));
        }
        let w = *self.shape.last().unwrap();
        let mut v = vec![0.0; self.numel()];
        for (row, out) in self.data.chunks(w).zip(v.chunks_mut(w)) {
            f(row, out);
        }
        Ok(v)
    }

    fn check_temperature(&self, op: &'static str, t: f64) -> Result<()> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("temperature must be positive, got {t}"),
            });
        }
        Ok(())
    }

    // ---- spatial ---------------------------------------------------------

    /// 2x2 stride-2 max pooling over the last two axes.
    pub fn max_pool2d(&self) -> Result<Tensor> {
        self.check_spatial("max_pool2d", 2)?;
        let (map, shape) = sparse::max_pool2d(&self.shape, &self.data);
        self.linear(Rc::new(map), shape, "max_pool2d")
    }

    /// Average pooling over the last two axes.
    pub fn avg_pool2d(&self, window: usize, stride: usize) -> Result<Tensor> {
        self.check_spatial("avg_pool2d", window.max(1))?;
        if window == 0 || stride == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "avg_pool2d",
                msg: format!("window {window} and stride {stride} must be positive"),
            });
        }
        let (map, shape) = sparse::avg_pool2d(&self.shape, window, stride);
        self.linear(Rc::new(map), shape, "avg_pool2d")
    }

    /// `(B, C, H, W) -> (B, C)` mean over spatial positions.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        if self.ndim() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "global_avg_pool",
                shapes: vec![self.shape.clone()],
            });
        }
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.reshape(&[b, c, h * w])?.sum_axis(2)?.scale(1.0 / (h * w) as f64)
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `x: (B, C, H, W)`, `weight: (O, C, 3, 3)`, `bias: (O)` -> `(B, O, H, W)`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let ok = self.ndim() == 4
            && weight.ndim() == 4
            && weight.shape[1] == self.shape[1]
            && weight.shape[2] == 3
            && weight.shape[3] == 3
            && bias.is_none_or(|b| b.shape == [weight.shape[0]]);
        if !ok {
            let mut shapes = vec![self.shape.clone(), weight.shape.clone()];
            if let Some(b) = bias {
                shapes.push(b.shape.clone());
            }
            return Err(AutodiffError::ShapeMismatch { op: "conv2d", shapes });
        }
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let o = weight.shape[0];
        let cols = self.linear(Rc::new(sparse::im2col3x3(&self.shape)), vec![b, c * 9, h * w], "im2col")?;
        let wm = weight.reshape(&[o, c * 9])?;
        let out = wm.matmul(&cols)?.reshape(&[b, o, h, w])?;
        match bias {
            Some(bias) => out.add(&bias.broadcast_to(&[b, o, h, w], &[1])?),
            None => Ok(out),
        }
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.ndim() {
            return Err(self.bad_axis(op));
        }
        Ok(())
    }

    fn bad_axis(&self, op: &'static str) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            shapes: vec![self.shape.clone()],
        }
    }

    fn check_spatial(&self, op: &'static str, min: usize) -> Result<()> {
        let nd = self.ndim();
        if nd < 2 || self.shape[nd - 2] < min || self.shape[nd - 1] < min {
            return Err(self.bad_axis(op));
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}
