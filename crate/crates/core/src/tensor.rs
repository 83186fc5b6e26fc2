//! Dense row-major `f64` tensors and the forward kernels shared by the tape
//! and the tape-free helpers.

use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Dense row-major tensor of doubles.
///
/// Every dimension is at least 1 and `product(shape) == data.len()`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return shape_err("tensor must have rank >= 1");
    }
    if shape.iter().any(|&d| d == 0) {
        return shape_err(format!("zero-sized dimension in {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; use [`Tensor::new`] for fallible construction.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// Slice `i` along the leading axis, e.g. one sample of a batch.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor> {
        if self.rank() < 2 {
            return shape_err("index_axis0 needs rank >= 2");
        }
        if i >= self.shape[0] {
            return shape_err(format!("index {i} out of range for {:?}", self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape() != first.shape() {
                return shape_err(format!(
                    "stack: {:?} vs {:?}",
                    t.shape(),
                    first.shape()
                ));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(shape, data)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Axis along which [`avg_pool`] keeps information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolView {
    /// Mean over H and W, result `[C,1,1]`.
    Channel,
    /// Mean over W, result `[C,H,1]`.
    Height,
    /// Mean over H, result `[C,1,W]`.
    Width,
}

impl PoolView {
    pub const ALL: [PoolView; 3] = [PoolView::Channel, PoolView::Height, PoolView::Width];

    pub fn name(self) -> &'static str {
        match self {
            PoolView::Channel => "channel",
            PoolView::Height => "height",
            PoolView::Width => "width",
        }
    }

    /// Output spatial extent `(h, w)` for an input of size `(h, w)`.
    pub(crate) fn pooled_hw(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            PoolView::Channel => (1, 1),
            PoolView::Height => (h, 1),
            PoolView::Width => (1, w),
        }
    }

    /// Axis of a rank-4 `[N,C,H,W]` pooled tensor that the 1-D kernel slides along.
    pub fn conv_axis_batched(self) -> usize {
        match self {
            PoolView::Channel => 1,
            PoolView::Height => 2,
            PoolView::Width => 3,
        }
    }
}

/// Splits a rank-3 or rank-4 shape into `(n, c, h, w)`.
pub(crate) fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(format!("expected [C,H,W] or [N,C,H,W], got {shape:?}")),
    }
}

pub(crate) fn avg_pool_kernel(x: &[f64], dims: (usize, usize, usize, usize), view: PoolView) -> Vec<f64> {
    let (n, c, h, w) = dims;
    let (oh, ow) = view.pooled_hw(h, w);
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &x[nc * h * w..(nc + 1) * h * w];
        let o = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        match view {
            PoolView::Channel => o[0] = plane.iter().sum::<f64>() / (h * w) as f64,
            PoolView::Height => {
                for (r, row) in plane.chunks_exact(w).enumerate() {
                    o[r] = row.iter().sum::<f64>() / w as f64;
                }
            }
            PoolView::Width => {
                for row in plane.chunks_exact(w) {
                    for (col, v) in row.iter().enumerate() {
                        o[col] += v;
                    }
                }
                o.iter_mut().for_each(|v| *v /= h as f64);
            }
        }
    }
    out
}

pub(crate) fn pooled_shape(shape: &[usize], view: PoolView) -> Vec<usize> {
    let r = shape.len();
    let (oh, ow) = view.pooled_hw(shape[r - 2], shape[r - 1]);
    let mut out = shape.to_vec();
    out[r - 2] = oh;
    out[r - 1] = ow;
    out
}

/// Average pooling of a `[C,H,W]` tensor for one view.
pub fn avg_pool(x: &Tensor, view: PoolView) -> Result<Tensor> {
    if x.rank() != 3 {
        return shape_err(format!("avg_pool expects rank 3, got {:?}", x.shape()));
    }
    let dims = nchw(x.shape())?;
    Tensor::new(pooled_shape(x.shape(), view), avg_pool_kernel(x.data(), dims, view))
}

/// Average pooling of a `[N,C,H,W]` batch, one result per sample.
pub fn avg_pool_batched(x: &Tensor, view: PoolView) -> Result<Tensor> {
    if x.rank() != 4 {
        return shape_err(format!(
            "avg_pool_batched expects rank 4, got {:?}",
            x.shape()
        ));
    }
    let dims = nchw(x.shape())?;
    Tensor::new(pooled_shape(x.shape(), view), avg_pool_kernel(x.data(), dims, view))
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn lane_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_odd_kernel(kernel: &Tensor) -> Result<usize> {
    if kernel.rank() != 1 {
        return shape_err(format!("1-D kernel expected, got {:?}", kernel.shape()));
    }
    let k = kernel.len();
    if k % 2 == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {k}")));
    }
    Ok(k)
}

pub(crate) fn conv1d_kernel(x: &[f64], shape: &[usize], kernel: &[f64], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = lane_layout(shape, axis);
    let pad = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..len {
            for (t, &kv) in kernel.iter().enumerate() {
                let src = i as isize + t as isize - pad;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let (dst, src) = (base + i * inner, base + src as usize * inner);
                for j in 0..inner {
                    out[dst + j] += kv * x[src + j];
                }
            }
        }
    }
    out
}

/// Zero-padded 1-D cross-correlation along `axis`, one shared kernel for
/// every lane. Output has the same shape as the input.
pub fn conv1d_shared(signal: &Tensor, kernel: &Tensor, axis: usize) -> Result<Tensor> {
    check_odd_kernel(kernel)?;
    if axis >= signal.rank() {
        return shape_err(format!(
            "axis {axis} out of range for {:?}",
            signal.shape()
        ));
    }
    Tensor::new(
        signal.shape().to_vec(),
        conv1d_kernel(signal.data(), signal.shape(), kernel.data(), axis),
    )
}

/// Result shape of broadcasting `a` against `b` (equal rank, size-1 dims stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return shape_err(format!("rank mismatch for broadcast: {a:?} vs {b:?}"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

/// Strides of `shape` seen from `out_shape`, with 0 on stretched axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    strides_of(shape)
        .into_iter()
        .zip(shape.iter().zip(out_shape))
        .map(|(s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Calls `f(out_offset, a_offset, b_offset)` for every output element.
pub(crate) fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Hadamard,
}

impl BinaryOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Hadamard => a * b,
        }
    }
}

/// Broadcasting elementwise sum or product.
pub fn elementwise(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Tensor::new(out_shape, data);
    }
    let mut data = vec![0.0; out_shape.iter().product()];
    for_each_broadcast(a.shape(), b.shape(), &out_shape, |o, ia, ib| {
        data[o] = op.apply(a.data()[ia], b.data()[ib]);
    });
    Tensor::new(out_shape, data)
}

pub fn sigmoid_scalar(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}
