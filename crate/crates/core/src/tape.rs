//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] is built fresh for every forward pass. Each recorded node keeps
//! its value plus whatever the backward rule needs; [`Tape::backward`] walks
//! the nodes in reverse insertion order, which is a valid reverse topological
//! order because inputs are always recorded before their consumers.

use crate::conv::{self, ConvGeom};
use crate::error::{shape_err, Error, Result};
use crate::norm::{bn_backward, bn_forward, BatchMoments, BatchNorm, Mode};
use crate::tensor::{
    self, avg_pool_kernel, conv1d_kernel, for_each_broadcast, lane_layout,
    nchw, pooled_shape, BinaryOp, PoolView, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    AvgPool {
        x: Var,
        view: PoolView,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
        mode: Mode,
    },
    Binary {
        a: Var,
        b: Var,
        op: BinaryOp,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        x: Var,
        weight: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    Downsample2 {
        x: Var,
    },
    SpatialMean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the parameter leaves (and the loss itself) produced by
/// [`Tape::backward`]; intermediate gradients are dropped during the sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.get(v)
            .ok_or_else(|| Error::Contract(format!("no gradient recorded for node {}", v.0)))
    }
}

/// Output of a recorded batch norm: the normalized node plus the batch
/// moments to fold into the running statistics (train mode only).
#[derive(Debug)]
pub struct BnOutput {
    pub y: Var,
    pub moments: Option<BatchMoments>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf; always receives a gradient after `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
            is_param: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Average pooling of a `[C,H,W]` or `[N,C,H,W]` node for one view.
    pub fn avg_pool(&mut self, x: Var, view: PoolView) -> Result<Var> {
        let xv = self.value(x);
        let dims = nchw(xv.shape())?;
        let out = Tensor::new(
            pooled_shape(xv.shape(), view),
            avg_pool_kernel(xv.data(), dims, view),
        )?;
        Ok(self.push(out, Op::AvgPool { x, view }, &[x]))
    }

    pub fn conv1d_shared(&mut self, x: Var, kernel: Var, axis: usize) -> Result<Var> {
        let out = tensor::conv1d_shared(self.value(x), self.value(kernel), axis)?;
        Ok(self.push(out, Op::Conv1d { x, kernel, axis }, &[x, kernel]))
    }

    /// Batch norm whose affine parameters are the nodes `gamma` and `beta`;
    /// `state` supplies layout, eps and (in eval) the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNorm,
        mode: Mode,
    ) -> Result<BnOutput> {
        let dims = state.layout.split(self.shape(x))?;
        let fwd = bn_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            mode,
        )?;
        let out = Tensor::new(self.shape(x).to_vec(), fwd.y)?;
        let y = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: fwd.mean,
                inv_std: fwd.inv_std,
                dims,
                mode,
            },
            &[x, gamma, beta],
        );
        Ok(BnOutput {
            y,
            moments: fwd.moments,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Hadamard)
    }

    fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let out = tensor::elementwise(self.value(a), self.value(b), op)?;
        Ok(self.push(out, Op::Binary { a, b, op }, &[a, b]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Same-padded, stride-1, bias-free 2-D convolution; weight is `[Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, weight: Var) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(weight))?;
        let (out, cols) =
            conv::conv2d_forward(self.value(x).data(), self.value(weight).data(), &geom);
        let out = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                weight,
                cols,
                geom,
            },
            &[x, weight],
        ))
    }

    /// 2x2 average downsampling of a `[N,C,H,W]` node.
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let (out, shape) = conv::downsample2_forward(self.value(x).data(), self.shape(x))?;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Downsample2 { x }, &[x]))
    }

    /// `[N,C,H,W]` to `[N,C]` by averaging over space.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = *self.shape(x) else {
            return shape_err(format!("spatial_mean expects rank 4, got {:?}", self.shape(x)));
        };
        let data = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::SpatialMean { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean { x }, &[x])
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = *self.shape(logits) else {
            return shape_err(format!("logits must be [N,K], got {:?}", self.shape(logits)));
        };
        if labels.len() != n {
            return shape_err(format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / denom;
            }
            loss += m + denom.ln() - row[label];
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if node.is_param || i == loss.0 {
                grads[i] = Some(g);
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match g {
                Some(g) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                None if node.is_param => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::AvgPool { x, view } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = nchw(xs).expect("validated in forward");
                let mut dx = vec![0.0; n * c * h * w];
                let (oh, ow) = view.pooled_hw(h, w);
                let scale = match view {
                    PoolView::Channel => 1.0 / (h * w) as f64,
                    PoolView::Height => 1.0 / w as f64,
                    PoolView::Width => 1.0 / h as f64,
                };
                for p in 0..n * c {
                    for r in 0..h {
                        for q in 0..w {
                            let o = match view {
                                PoolView::Channel => 0,
                                PoolView::Height => r,
                                PoolView::Width => q,
                            };
                            dx[(p * h + r) * w + q] = g[p * oh * ow + o] * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv1d { x, kernel, axis } => {
                let kv = self.value(*kernel).data();
                let shape = self.shape(*x);
                if self.wants(*x) {
                    // adjoint of cross-correlation is correlation with the flipped kernel
                    let flipped: Vec<f64> = kv.iter().rev().copied().collect();
                    self.accumulate(grads, *x, conv1d_kernel(g, shape, &flipped, *axis));
                }
                if self.wants(*kernel) {
                    let xs = self.value(*x).data();
                    let (outer, len, inner) = lane_layout(shape, *axis);
                    let pad = (kv.len() / 2) as isize;
                    let mut dk = vec![0.0; kv.len()];
                    for o in 0..outer {
                        let base = o * len * inner;
                        for i in 0..len {
                            for (t, d) in dk.iter_mut().enumerate() {
                                let src = i as isize + t as isize - pad;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let (gi, si) = (base + i * inner, base + src as usize * inner);
                                for j in 0..inner {
                                    *d += g[gi + j] * xs[si + j];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *kernel, dk);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                dims,
                mode,
            } => {
                let (dx, dgamma, dbeta) = bn_backward(
                    g,
                    self.value(*x).data(),
                    mean,
                    inv_std,
                    self.value(*gamma).data(),
                    *dims,
                    *mode,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Binary { a, b, op } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape();
                let mut da = self.wants(*a).then(|| vec![0.0; av.len()]);
                let mut db = self.wants(*b).then(|| vec![0.0; bv.len()]);
                for_each_broadcast(av.shape(), bv.shape(), out_shape, |o, ia, ib| {
                    let (ga, gb) = match op {
                        BinaryOp::Add => (g[o], g[o]),
                        BinaryOp::Hadamard => (g[o] * bv.data()[ib], g[o] * av.data()[ia]),
                    };
                    if let Some(da) = da.as_mut() {
                        da[ia] += ga;
                    }
                    if let Some(db) = db.as_mut() {
                        db[ib] += gb;
                    }
                });
                if let Some(da) = da {
                    self.accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(s, g)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d {
                x,
                weight,
                cols,
                geom,
            } => {
                let (dx, dw) = conv::conv2d_backward(
                    g,
                    cols,
                    self.value(*weight).data(),
                    geom,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *weight, dw);
            }
            Op::Downsample2 { x } => {
                let dx = conv::downsample2_backward(g, self.shape(*x));
                self.accumulate(grads, *x, dx);
            }
            Op::SpatialMean { x } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let dx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * g[0] / n as f64).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * k + l] -= g[0] / n as f64;
                }
                self.accumulate(grads, *logits, dz);
            }
        }
    }
}

/// Checks an equal-shape precondition, returning the shared shape.
pub(crate) fn same_shape<'a>(a: &'a [usize], b: &[usize], what: &str) -> Result<&'a [usize]> {
    if a != b {
        return shape_err(format!("{what}: {a:?} vs {b:?}"));
    }
    Ok(a)
}
