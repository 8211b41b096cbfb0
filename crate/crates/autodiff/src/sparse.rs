//! Sparse linear index maps.
//!
//! Every op that only moves, sums or averages entries (reductions, broadcasts,
//! pooling, im2col, gathers, slices) is a fixed sparse matrix `M` applied to the
//! flattened input. Its vector-Jacobian product is `Mᵀ`, and the VJP of `Mᵀ` is
//! `M` again, so one op kind covers all of them to any derivative order.

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    out_len: usize,
    in_len: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    pub fn builder(out_len: usize, in_len: usize) -> SparseMapBuilder {
        SparseMapBuilder {
            map: SparseMap {
                out_len,
                in_len,
                row_ptr: vec![0],
                cols: Vec::new(),
                weights: Vec::new(),
            },
        }
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    /// `y = M x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_len);
        let mut y = vec![0.0; self.out_len];
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.weights[k] * x[self.cols[k]];
            }
            *out = acc;
        }
        y
    }

    /// `x = Mᵀ g`
    pub fn apply_adjoint(&self, g: &[f64]) -> Vec<f64> {
        debug_assert_eq!(g.len(), self.out_len);
        let mut x = vec![0.0; self.in_len];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                x[self.cols[k]] += self.weights[k] * gr;
            }
        }
        x
    }

    /// Iterates `(row, col, weight)` triples.
    #[cfg(test)]
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.out_len).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.weights[k]))
        })
    }
}

pub struct SparseMapBuilder {
    map: SparseMap,
}

impl SparseMapBuilder {
    pub fn row<I: IntoIterator<Item = (usize, f64)>>(&mut self, entries: I) -> &mut Self {
        for (c, w) in entries {
            debug_assert!(c < self.map.in_len);
            self.map.cols.push(c);
            self.map.weights.push(w);
        }
        self.map.row_ptr.push(self.map.cols.len());
        self
    }

    pub fn build(self) -> SparseMap {
        assert_eq!(
            self.map.row_ptr.len(),
            self.map.out_len + 1,
            "sparse map built with the wrong number of rows"
        );
        self.map
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Sum over `axis`; output shape drops that axis.
pub(crate) fn sum_axis(shape: &[usize], axis: usize) -> SparseMap {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut b = SparseMap::builder(outer * inner, outer * n * inner);
    for o in 0..outer {
        for i in 0..inner {
            b.row((0..n).map(|j| ((o * n + j) * inner + i, 1.0)));
        }
    }
    b.build()
}

/// Broadcast a tensor of shape `src` into `dst`, where `src` equals `dst`
/// restricted to `kept` axes (in order).
pub(crate) fn broadcast(src: &[usize], dst: &[usize], kept: &[usize]) -> SparseMap {
    let dst_strides = strides(dst);
    let src_strides = strides(src);
    let out_len: usize = dst.iter().product();
    let in_len: usize = src.iter().product();
    let mut b = SparseMap::builder(out_len, in_len);
    for flat in 0..out_len {
        let mut src_idx = 0;
        for (k, &axis) in kept.iter().enumerate() {
            let coord = (flat / dst_strides[axis]) % dst[axis];
            src_idx += coord * src_strides[k];
        }
        b.row([(src_idx, 1.0)]);
    }
    b.build()
}

/// Gather along `axis` with the given indices.
pub(crate) fn index_select(shape: &[usize], axis: usize, indices: &[usize]) -> SparseMap {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut b = SparseMap::builder(outer * indices.len() * inner, outer * n * inner);
    for o in 0..outer {
        for &j in indices {
            for i in 0..inner {
                b.row([((o * n + j) * inner + i, 1.0)]);
            }
        }
    }
    b.build()
}

/// `(B, k) -> (B)` picking column `cols[b]` of row `b`.
pub(crate) fn select_per_row(rows: usize, width: usize, cols: &[usize]) -> SparseMap {
    let mut b = SparseMap::builder(rows, rows * width);
    for (r, &c) in cols.iter().enumerate() {
        b.row([(r * width + c, 1.0)]);
    }
    b.build()
}

/// Average pooling over the last two axes of `(lead.., H, W)`.
pub(crate) fn avg_pool2d(shape: &[usize], window: usize, stride: usize) -> (SparseMap, Vec<usize>) {
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let lead: usize = shape[..nd - 2].iter().product();
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let scale = 1.0 / (window * window) as f64;
    let mut b = SparseMap::builder(lead * oh * ow, lead * h * w);
    for l in 0..lead {
        for i in 0..oh {
            for j in 0..ow {
                let mut row = Vec::with_capacity(window * window);
                for di in 0..window {
                    for dj in 0..window {
                        row.push((l * h * w + (i * stride + di) * w + j * stride + dj, scale));
                    }
                }
                b.row(row);
            }
        }
    }
    let mut out = shape[..nd - 2].to_vec();
    out.extend([oh, ow]);
    (b.build(), out)
}

/// 2x2 stride-2 max pooling over the last two axes. Ties go to the first
/// maximal entry in row-major window order.
pub(crate) fn max_pool2d(shape: &[usize], data: &[f64]) -> (SparseMap, Vec<usize>) {
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let lead: usize = shape[..nd - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let mut b = SparseMap::builder(lead * oh * ow, lead * h * w);
    for l in 0..lead {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = l * h * w + 2 * i * w + 2 * j;
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = l * h * w + (2 * i + di) * w + 2 * j + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                b.row([(best, 1.0)]);
            }
        }
    }
    let mut out = shape[..nd - 2].to_vec();
    out.extend([oh, ow]);
    (b.build(), out)
}

/// `(B, C, H, W) -> (B, C*9, H*W)` patches of a 3x3 kernel with zero padding 1.
pub(crate) fn im2col3x3(shape: &[usize]) -> SparseMap {
    let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut b = SparseMap::builder(bsz * c * 9 * h * w, bsz * c * h * w);
    for n in 0..bsz {
        for ch in 0..c {
            for ki in 0..3 {
                for kj in 0..3 {
                    for i in 0..h {
                        for j in 0..w {
                            let si = i as isize + ki as isize - 1;
                            let sj = j as isize + kj as isize - 1;
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                b.row([]);
                            } else {
                                let src = ((n * c + ch) * h + si as usize) * w + sj as usize;
                                b.row([(src, 1.0)]);
                            }
                        }
                    }
                }
            }
        }
    }
    b.build()
}

/// Contiguous block `[start, start+len)` along `axis`.
pub(crate) fn slice(shape: &[usize], axis: usize, start: usize, len: usize) -> SparseMap {
    index_select(shape, axis, &(start..start + len).collect::<Vec<_>>())
}
