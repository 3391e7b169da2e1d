//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a single-use tape: builder methods evaluate eagerly and
//! append one node per operation, [`Graph::backward`] walks the tape in
//! reverse and returns per-node gradients. Training code builds a fresh
//! graph per step; parameters live outside the graph and are inserted as
//! leaves each time.
//!
//! Gradients only flow to nodes reachable from a leaf created with
//! [`Graph::param`]. Leaves created with [`Graph::input`] (and everything
//! computed solely from them) are skipped during the backward pass, which
//! is what keeps a frozen teacher network frozen.

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn};
use rayon::prelude::*;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise binary ops; the rhs is broadcast to the lhs shape.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// a * x + b; the shift is only needed at forward time.
    Affine(NodeId, f64, #[allow(dead_code)] f64),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Abs(NodeId),
    ClampMin(NodeId, f64),
    LeakyRelu(NodeId, f64),
    /// (m,k) x (k,n) -> (m,n)
    MatMul(NodeId, NodeId),
    /// (n,m) transpose of a 2-d node
    Transpose2(NodeId),
    /// A:(B,C,L), B:(B,C,M) -> (B,L,M) computing A[b]^T . B[b]
    BatchMatMulT1(NodeId, NodeId),
    /// W:(O,C), X:(B,C,L) -> (B,O,L) computing W . X[b]
    LinMap(NodeId, NodeId),
    Reshape(NodeId, #[allow(dead_code)] Vec<usize>),
    SumAll(NodeId),
    /// Sum over the given axes, keeping them as size-1 dims.
    SumAxes(NodeId, #[allow(dead_code)] Vec<usize>),
    /// Numerically stabilized softmax along one axis.
    Softmax(NodeId, usize),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    AvgPool2d {
        x: NodeId,
        k: usize,
    },
    MaxPool2d {
        x: NodeId,
        #[allow(dead_code)]
        k: usize,
        #[allow(dead_code)]
        stride: usize,
        #[allow(dead_code)]
        pad: usize,
        argmax: Vec<u32>,
    },
    UpsampleNearest2(NodeId),
    /// Concatenate along axis 1 (channels).
    ConcatC(Vec<NodeId>),
    /// Index-select along axis 0 (batch permutation / gathering).
    SelectRows(NodeId, Vec<usize>),
}

/// Single-use computation tape.
pub struct Graph {
    values: Vec<ArrayD<f64>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. the given node, if it was reached.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Move the gradient out of the container.
    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<f64>> {
        self.grads[id.0].take()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    /// Value of a 0-d or single-element node as a scalar.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.values[id.0];
        debug_assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().expect("empty node value")
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.needs_grad[id.0]
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        NodeId(self.values.len() - 1)
    }

    fn binary_needs_grad(&self, a: NodeId, b: NodeId) -> bool {
        self.needs_grad[a.0] || self.needs_grad[b.0]
    }

    /// Constant leaf; gradients never flow into it.
    pub fn input(&mut self, value: ArrayD<f64>) -> NodeId {
        let value = to_standard(value);
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; [`Gradients`] will hold its gradient after backward.
    pub fn param(&mut self, value: ArrayD<f64>) -> NodeId {
        let value = to_standard(value);
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        self.push(v, Op::Add(a, b), self.binary_needs_grad(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        self.push(v, Op::Sub(a, b), self.binary_needs_grad(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        self.push(v, Op::Mul(a, b), self.binary_needs_grad(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(&self.values[a.0], &self.values[b.0], |x, y| x / y);
        self.push(v, Op::Div(a, b), self.binary_needs_grad(a, b))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.values[x.0].mapv(|e| scale * e + shift);
        self.push(v, Op::Affine(x, scale, shift), self.needs_grad[x.0])
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].mapv(f64::exp);
        self.push(v, Op::Exp(x), self.needs_grad[x.0])
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].mapv(f64::ln);
        self.push(v, Op::Ln(x), self.needs_grad[x.0])
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].mapv(f64::sqrt);
        self.push(v, Op::Sqrt(x), self.needs_grad[x.0])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].mapv(|e| e * e);
        self.push(v, Op::Square(x), self.needs_grad[x.0])
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].mapv(f64::abs);
        self.push(v, Op::Abs(x), self.needs_grad[x.0])
    }

    pub fn clamp_min(&mut self, x: NodeId, min: f64) -> NodeId {
        let v = self.values[x.0].mapv(|e| e.max(min));
        self.push(v, Op::ClampMin(x, min), self.needs_grad[x.0])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.values[x.0].mapv(|e| if e >= 0.0 { e } else { slope * e });
        self.push(v, Op::LeakyRelu(x, slope), self.needs_grad[x.0])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    /// 2-d matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as_2d(&self.values[a.0]);
        let bv = as_2d(&self.values[b.0]);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b), self.binary_needs_grad(a, b))
    }

    /// Transpose of a 2-d node.
    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        let v = as_2d(&self.values[x.0]).t().to_owned().into_dyn();
        self.push(v, Op::Transpose2(x), self.needs_grad[x.0])
    }

    /// Per-sample Gram-style product: `out[b] = a[b]^T . b[b]` for
    /// `a: (B,C,L)`, `b: (B,C,M)`, giving `(B,L,M)`.
    pub fn batch_matmul_t1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        assert_eq!(av.shape()[0], bv.shape()[0], "batch dims");
        assert_eq!(av.shape()[1], bv.shape()[1], "channel dims");
        let (bs, l, m) = (av.shape()[0], av.shape()[2], bv.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[bs, l, m]));
        {
            let chunks: Vec<_> = out
                .as_slice_mut()
                .expect("standard layout")
                .par_chunks_mut(l * m)
                .collect();
            chunks.into_par_iter().enumerate().for_each(|(i, chunk)| {
                let ai = sample_2d(av, i);
                let bi = sample_2d(bv, i);
                let prod = ai.t().dot(&bi);
                chunk.copy_from_slice(prod.as_slice().expect("standard layout"));
            });
        }
        self.push(out, Op::BatchMatMulT1(a, b), self.binary_needs_grad(a, b))
    }

    /// Apply a 2-d matrix to every batched column block:
    /// `w: (O,C)`, `x: (B,C,L)` -> `(B,O,L)`.
    pub fn lin_map(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let wv = as_2d(&self.values[w.0]);
        let xv = &self.values[x.0];
        assert_eq!(xv.ndim(), 3);
        assert_eq!(wv.ncols(), xv.shape()[1], "lin_map inner dims");
        let (bs, o, l) = (xv.shape()[0], wv.nrows(), xv.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[bs, o, l]));
        {
            let chunks: Vec<_> = out
                .as_slice_mut()
                .expect("standard layout")
                .par_chunks_mut(o * l)
                .collect();
            chunks.into_par_iter().enumerate().for_each(|(i, chunk)| {
                let xi = sample_2d(xv, i);
                let prod = wv.dot(&xi);
                chunk.copy_from_slice(prod.as_slice().expect("standard layout"));
            });
        }
        self.push(out, Op::LinMap(w, x), self.binary_needs_grad(w, x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.values[x.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        self.push(v, Op::Reshape(x, shape.to_vec()), self.needs_grad[x.0])
    }

    /// Sum of all elements, as a 0-d node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.values[x.0].sum());
        self.push(v, Op::SumAll(x), self.needs_grad[x.0])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x.0].len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let mut v = self.values[x.0].clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let v = to_standard(v);
        self.push(v, Op::SumAxes(x, axes.to_vec()), self.needs_grad[x.0])
    }

    /// Stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let xv = &self.values[x.0];
        let mut v = xv.clone();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in lane.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in lane.iter_mut() {
                *e /= sum;
            }
        }
        self.push(v, Op::Softmax(x, axis), self.needs_grad[x.0])
    }

    /// 2-d convolution on NCHW tensors, no bias term.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        assert_eq!(xv.ndim(), 4, "conv2d input must be (B,C,H,W)");
        assert_eq!(wv.ndim(), 4, "conv2d weight must be (O,C,kh,kw)");
        assert_eq!(xv.shape()[1], wv.shape()[1], "conv2d channel dims");
        let v = conv2d_forward(xv, wv, stride, pad);
        self.push(
            v,
            Op::Conv2d { x, w, stride, pad },
            self.binary_needs_grad(x, w),
        )
    }

    /// Average pooling with window `k` and stride `k`.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> NodeId {
        let xv = &self.values[x.0];
        assert_eq!(xv.ndim(), 4);
        let (b, c, h, w) = dims4(xv);
        assert!(h % k == 0 && w % k == 0, "avg_pool2d requires exact tiling");
        let (ho, wo) = (h / k, w / k);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, ho, wo]));
        let xs = xv.as_slice().expect("standard layout");
        {
            let os = out.as_slice_mut().expect("standard layout");
            for bc in 0..b * c {
                let src = &xs[bc * h * w..(bc + 1) * h * w];
                let dst = &mut os[bc * ho * wo..(bc + 1) * ho * wo];
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = 0.0;
                        for di in 0..k {
                            for dj in 0..k {
                                s += src[(i * k + di) * w + (j * k + dj)];
                            }
                        }
                        dst[i * wo + j] = s / (k * k) as f64;
                    }
                }
            }
        }
        self.push(out, Op::AvgPool2d { x, k }, self.needs_grad[x.0])
    }

    /// Max pooling with explicit stride and zero padding (for the
    /// pretrained-backbone stem).
    pub fn max_pool2d(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let xv = &self.values[x.0];
        assert_eq!(xv.ndim(), 4);
        let (b, c, h, w) = dims4(xv);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = ArrayD::zeros(IxDyn(&[b, c, ho, wo]));
        let mut argmax = vec![0u32; b * c * ho * wo];
        let xs = xv.as_slice().expect("standard layout");
        {
            let os = out.as_slice_mut().expect("standard layout");
            for bc in 0..b * c {
                let src = &xs[bc * h * w..(bc + 1) * h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for di in 0..k {
                            for dj in 0..k {
                                let (si, sj) = (
                                    (i * stride + di) as isize - pad as isize,
                                    (j * stride + dj) as isize - pad as isize,
                                );
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                let v = src[si as usize * w + sj as usize];
                                if v > best {
                                    best = v;
                                    best_idx = (si as usize * w + sj as usize) as u32;
                                }
                            }
                        }
                        let o = bc * ho * wo + i * wo + j;
                        os[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        self.push(
            out,
            Op::MaxPool2d {
                x,
                k,
                stride,
                pad,
                argmax,
            },
            self.needs_grad[x.0],
        )
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        assert_eq!(xv.ndim(), 4);
        let (b, c, h, w) = dims4(xv);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        let xs = xv.as_slice().expect("standard layout");
        {
            let os = out.as_slice_mut().expect("standard layout");
            for bc in 0..b * c {
                let src = &xs[bc * h * w..(bc + 1) * h * w];
                let dst = &mut os[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        dst[i * 2 * w + j] = src[(i / 2) * w + (j / 2)];
                    }
                }
            }
        }
        self.push(out, Op::UpsampleNearest2(x), self.needs_grad[x.0])
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let views: Vec<ArrayViewD<f64>> = xs.iter().map(|id| self.values[id.0].view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let needs = xs.iter().any(|id| self.needs_grad[id.0]);
        self.push(to_standard(v), Op::ConcatC(xs.to_vec()), needs)
    }

    /// Index-select along axis 0. Used to realize batch pairings.
    pub fn select_rows(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let xv = &self.values[x.0];
        let v = xv.select(Axis(0), indices);
        self.push(
            to_standard(v),
            Op::SelectRows(x, indices.to_vec()),
            self.needs_grad[x.0],
        )
    }

    /// Reverse pass from a scalar root. Returns gradients for every node
    /// that requires them; constant-only subgraphs are skipped.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let seed = ArrayD::from_elem(self.values[root.0].raw_dim(), 1.0);
        self.backward_with_seed(root, seed)
    }

    /// Reverse pass with an explicit seed gradient (for non-scalar roots).
    pub fn backward_with_seed(&self, root: NodeId, seed: ArrayD<f64>) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.values[root.0].shape(),
            "seed shape must match root"
        );
        assert!(
            self.needs_grad[root.0],
            "backward from a node with no gradient path"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.ops[i], Op::Leaf) {
                grads[i] = Some(g); // leaves keep their gradient for readout
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], id: NodeId, contrib: ArrayD<f64>) {
        if !self.needs_grad[id.0] {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, reduce_to_shape(g.clone(), self.values[b.0].shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(
                    grads,
                    *b,
                    reduce_to_shape(g.mapv(|e| -e), self.values[b.0].shape()),
                );
            }
            Op::Mul(a, b) => {
                let av = &self.values[a.0];
                let bv = &self.values[b.0];
                if self.needs_grad[a.0] {
                    let da = broadcast_binary(g, bv, |x, y| x * y);
                    self.accumulate(grads, *a, da);
                }
                if self.needs_grad[b.0] {
                    let full = broadcast_binary(g, av, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to_shape(full, bv.shape()));
                }
            }
            Op::Div(a, b) => {
                let av = &self.values[a.0];
                let bv = &self.values[b.0];
                if self.needs_grad[a.0] {
                    let da = broadcast_binary(g, bv, |x, y| x / y);
                    self.accumulate(grads, *a, da);
                }
                if self.needs_grad[b.0] {
                    // d(a/b)/db = -a / b^2
                    let mut full = broadcast_binary(g, av, |x, y| x * y);
                    let bb = broadcast_binary(&full.clone(), bv, |_, y| y); // b broadcast to out shape
                    full.zip_mut_with(&bb, |e, &be| *e = -*e / (be * be));
                    self.accumulate(grads, *b, reduce_to_shape(full, bv.shape()));
                }
            }
            Op::Affine(x, scale, _) => {
                self.accumulate(grads, *x, g.mapv(|e| e * scale));
            }
            Op::Exp(x) => {
                let y = &self.values[i];
                self.accumulate(grads, *x, g * y);
            }
            Op::Ln(x) => {
                let xv = &self.values[x.0];
                let mut dx = g.clone();
                dx.zip_mut_with(xv, |e, &xe| *e /= xe);
                self.accumulate(grads, *x, dx);
            }
            Op::Sqrt(x) => {
                let y = &self.values[i];
                let mut dx = g.clone();
                dx.zip_mut_with(y, |e, &ye| *e /= 2.0 * ye);
                self.accumulate(grads, *x, dx);
            }
            Op::Square(x) => {
                let xv = &self.values[x.0];
                let mut dx = g.clone();
                dx.zip_mut_with(xv, |e, &xe| *e *= 2.0 * xe);
                self.accumulate(grads, *x, dx);
            }
            Op::Abs(x) => {
                let xv = &self.values[x.0];
                let mut dx = g.clone();
                dx.zip_mut_with(xv, |e, &xe| *e *= sign(xe));
                self.accumulate(grads, *x, dx);
            }
            Op::ClampMin(x, min) => {
                let xv = &self.values[x.0];
                let mut dx = g.clone();
                dx.zip_mut_with(xv, |e, &xe| {
                    if xe <= *min {
                        *e = 0.0;
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.values[x.0];
                let mut dx = g.clone();
                dx.zip_mut_with(xv, |e, &xe| {
                    if xe < 0.0 {
                        *e *= slope;
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::MatMul(a, b) => {
                let av = as_2d(&self.values[a.0]);
                let bv = as_2d(&self.values[b.0]);
                let gv = as_2d(g);
                if self.needs_grad[a.0] {
                    self.accumulate(grads, *a, gv.dot(&bv.t()).into_dyn());
                }
                if self.needs_grad[b.0] {
                    self.accumulate(grads, *b, av.t().dot(&gv).into_dyn());
                }
            }
            Op::Transpose2(x) => {
                let gv = as_2d(g);
                self.accumulate(grads, *x, gv.t().to_owned().into_dyn());
            }
            Op::BatchMatMulT1(a, b) => {
                // y[s] = a[s]^T b[s]; da[s] = b[s] g[s]^T, db[s] = a[s] g[s]
                let av = &self.values[a.0];
                let bv = &self.values[b.0];
                let bs = av.shape()[0];
                if self.needs_grad[a.0] {
                    let mut da = ArrayD::zeros(av.raw_dim());
                    let per = av.len() / bs;
                    let chunks: Vec<_> = da
                        .as_slice_mut()
                        .expect("standard layout")
                        .par_chunks_mut(per)
                        .collect();
                    chunks.into_par_iter().enumerate().for_each(|(s, chunk)| {
                        let bi = sample_2d(bv, s);
                        let gi = sample_2d(g, s);
                        let prod = bi.dot(&gi.t());
                        chunk.copy_from_slice(prod.as_slice().expect("standard layout"));
                    });
                    self.accumulate(grads, *a, da);
                }
                if self.needs_grad[b.0] {
                    let mut db = ArrayD::zeros(bv.raw_dim());
                    let per = bv.len() / bs;
                    let chunks: Vec<_> = db
                        .as_slice_mut()
                        .expect("standard layout")
                        .par_chunks_mut(per)
                        .collect();
                    chunks.into_par_iter().enumerate().for_each(|(s, chunk)| {
                        let ai = sample_2d(av, s);
                        let gi = sample_2d(g, s);
                        let prod = ai.dot(&gi);
                        chunk.copy_from_slice(prod.as_slice().expect("standard layout"));
                    });
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LinMap(w, x) => {
                // y[s] = W x[s]; dW = sum_s g[s] x[s]^T, dx[s] = W^T g[s]
                let wv = as_2d(&self.values[w.0]);
                let xv = &self.values[x.0];
                let bs = xv.shape()[0];
                if self.needs_grad[w.0] {
                    let partials: Vec<ndarray::Array2<f64>> = (0..bs)
                        .into_par_iter()
                        .map(|s| {
                            let xi = sample_2d(xv, s);
                            let gi = sample_2d(g, s);
                            gi.dot(&xi.t())
                        })
                        .collect();
                    let mut dw = ndarray::Array2::<f64>::zeros((wv.nrows(), wv.ncols()));
                    for p in partials {
                        dw += &p;
                    }
                    self.accumulate(grads, *w, dw.into_dyn());
                }
                if self.needs_grad[x.0] {
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    let per = xv.len() / bs;
                    let chunks: Vec<_> = dx
                        .as_slice_mut()
                        .expect("standard layout")
                        .par_chunks_mut(per)
                        .collect();
                    chunks.into_par_iter().enumerate().for_each(|(s, chunk)| {
                        let gi = sample_2d(g, s);
                        let prod = wv.t().dot(&gi);
                        chunk.copy_from_slice(prod.as_slice().expect("standard layout"));
                    });
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x, _) => {
                let dx = g
                    .clone()
                    .into_shape_with_order(self.values[x.0].raw_dim())
                    .expect("reshape grad");
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let gv = *g.iter().next().expect("scalar grad");
                let dx = ArrayD::from_elem(self.values[x.0].raw_dim(), gv);
                self.accumulate(grads, *x, dx);
            }
            Op::SumAxes(x, _) => {
                let xv = &self.values[x.0];
                let dx = g
                    .broadcast(xv.raw_dim())
                    .expect("sum_axes grad broadcast")
                    .to_owned();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x, axis) => {
                let y = &self.values[i];
                let mut dx = g * y;
                // dx = y * (g - sum(g*y, axis))
                let dots = dx.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                let mut sub = dots
                    .broadcast(y.raw_dim())
                    .expect("softmax grad broadcast")
                    .to_owned();
                sub.zip_mut_with(y, |e, &ye| *e *= ye);
                dx -= &sub;
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xv = &self.values[x.0];
                let wv = &self.values[w.0];
                let (dx, dw) = conv2d_backward(
                    xv,
                    wv,
                    g,
                    *stride,
                    *pad,
                    self.needs_grad[x.0],
                    self.needs_grad[w.0],
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::AvgPool2d { x, k } => {
                let xv = &self.values[x.0];
                let (b, c, h, w) = dims4(xv);
                let (ho, wo) = (h / k, w / k);
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let gs = g.as_slice().expect("standard layout");
                let ds = dx.as_slice_mut().expect("standard layout");
                let inv = 1.0 / (k * k) as f64;
                for bc in 0..b * c {
                    let gsrc = &gs[bc * ho * wo..(bc + 1) * ho * wo];
                    let dst = &mut ds[bc * h * w..(bc + 1) * h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = gsrc[i * wo + j] * inv;
                            for di in 0..*k {
                                for dj in 0..*k {
                                    dst[(i * k + di) * w + (j * k + dj)] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool2d { x, argmax, .. } => {
                let xv = &self.values[x.0];
                let (b, c, h, w) = dims4(xv);
                let (_, _, ho, wo) = dims4(&self.values[i]);
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let gs = g.as_slice().expect("standard layout");
                let ds = dx.as_slice_mut().expect("standard layout");
                for bc in 0..b * c {
                    for o in 0..ho * wo {
                        let flat = bc * ho * wo + o;
                        ds[bc * h * w + argmax[flat] as usize] += gs[flat];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::UpsampleNearest2(x) => {
                let xv = &self.values[x.0];
                let (b, c, h, w) = dims4(xv);
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let gs = g.as_slice().expect("standard layout");
                let ds = dx.as_slice_mut().expect("standard layout");
                for bc in 0..b * c {
                    let gsrc = &gs[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                    let dst = &mut ds[bc * h * w..(bc + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + (j / 2)] += gsrc[i * 2 * w + j];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatC(xs) => {
                let mut start = 0;
                for id in xs {
                    let cv = &self.values[id.0];
                    let nc = cv.shape()[1];
                    if self.needs_grad[id.0] {
                        let part = g
                            .slice_axis(Axis(1), ndarray::Slice::from(start..start + nc))
                            .to_owned();
                        self.accumulate(grads, *id, to_standard(part));
                    }
                    start += nc;
                }
            }
            Op::SelectRows(x, indices) => {
                let xv = &self.values[x.0];
                let mut dx = ArrayD::zeros(xv.raw_dim());
                for (row, &src) in indices.iter().enumerate() {
                    let gr = g.index_axis(Axis(0), row);
                    let mut dr = dx.index_axis_mut(Axis(0), src);
                    dr += &gr;
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn to_standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

fn as_2d(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("2-d node")
}

/// View of sample `i` of a (B,R,C) tensor as a 2-d (R,C) view.
fn sample_2d(a: &ArrayD<f64>, i: usize) -> ndarray::ArrayView2<'_, f64> {
    a.index_axis(Axis(0), i)
        .into_dimensionality()
        .expect("3-d node")
}

/// Elementwise binary op with the rhs broadcast to the lhs shape.
fn broadcast_binary(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        return out;
    }
    let bb = b
        .broadcast(a.raw_dim())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", b.shape(), a.shape()));
    let mut out = a.clone();
    out.zip_mut_with(&bb, |x, &y| *x = f(*x, y));
    out
}

/// Sum a gradient down to `shape` (inverse of broadcasting).
fn reduce_to_shape(mut g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if gd != sd {
            debug_assert_eq!(sd, 1, "reduce_to_shape target must be broadcast-compatible");
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    to_standard(g)
}

/// Plain conv2d forward used by both the graph op and frozen-network paths.
pub(crate) fn conv2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (b, c, h, wd) = dims4(x);
    let (o, _, kh, kw) = dims4(w);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let wmat = w
        .view()
        .into_shape_with_order((o, c * kh * kw))
        .expect("weight reshape");
    let mut out = ArrayD::zeros(IxDyn(&[b, o, ho, wo]));
    let chunks: Vec<_> = out
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(o * ho * wo)
        .collect();
    chunks.into_par_iter().enumerate().for_each(|(s, chunk)| {
        let xi = x.index_axis(Axis(0), s);
        let cols = im2col(&xi, kh, kw, stride, pad, ho, wo);
        let y = wmat.dot(&cols);
        chunk.copy_from_slice(y.as_slice().expect("standard layout"));
    });
    out
}

fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let (b, c, h, wd) = dims4(x);
    let (o, _, kh, kw) = dims4(w);
    let (_, _, ho, wo) = dims4(g);
    let wmat = w
        .view()
        .into_shape_with_order((o, c * kh * kw))
        .expect("weight reshape");

    let dx = if need_dx {
        let mut dx = ArrayD::zeros(x.raw_dim());
        let chunks: Vec<_> = dx
            .as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(c * h * wd)
            .collect();
        chunks.into_par_iter().enumerate().for_each(|(s, chunk)| {
            let gi: ndarray::ArrayView2<f64> = g
                .index_axis(Axis(0), s)
                .into_shape_with_order((o, ho * wo))
                .expect("grad reshape");
            let dcols = wmat.t().dot(&gi);
            col2im_into(chunk, &dcols, c, h, wd, kh, kw, stride, pad, ho, wo);
        });
        Some(dx)
    } else {
        None
    };

    let dw = if need_dw {
        let partials: Vec<ndarray::Array2<f64>> = (0..b)
            .into_par_iter()
            .map(|s| {
                let xi = x.index_axis(Axis(0), s);
                let cols = im2col(&xi, kh, kw, stride, pad, ho, wo);
                let gi: ndarray::ArrayView2<f64> = g
                    .index_axis(Axis(0), s)
                    .into_shape_with_order((o, ho * wo))
                    .expect("grad reshape");
                gi.dot(&cols.t())
            })
            .collect();
        let mut dwm = ndarray::Array2::<f64>::zeros((o, c * kh * kw));
        for p in partials {
            dwm += &p;
        }
        Some(
            dwm.into_shape_with_order(IxDyn(&[o, c, kh, kw]))
                .expect("dw reshape"),
        )
    } else {
        None
    };

    (dx, dw)
}

fn im2col(
    x: &ndarray::ArrayViewD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array2<f64> {
    let c = x.shape()[0];
    let h = x.shape()[1];
    let w = x.shape()[2];
    let xs = x.as_slice().expect("standard layout");
    let mut cols = ndarray::Array2::<f64>::zeros((c * kh * kw, ho * wo));
    let cs = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        let src = &xs[ch * h * w..(ch + 1) * h * w];
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ch * kh + di) * kw + dj;
                let dst = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let si = (i * stride + di) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let sj = (j * stride + dj) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        dst[i * wo + j] = src[si as usize * w + sj as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_into(
    dst: &mut [f64],
    dcols: &ndarray::Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let ds = dcols.as_slice().expect("standard layout");
    for ch in 0..c {
        let out = &mut dst[ch * h * w..(ch + 1) * h * w];
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ch * kh + di) * kw + dj;
                let src = &ds[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let si = (i * stride + di) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let sj = (j * stride + dj) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        out[si as usize * w + sj as usize] += src[i * wo + j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Central-difference check of d(sum of root)/d(leaf) for a builder.
    fn gradcheck(
        shape: &[usize],
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(shape, &mut rng);

        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x);
        let root = g.sum_all(y);
        let grads = g.backward(root);
        let analytic = grads.get(x).expect("leaf grad").clone();

        let eval = |arr: &ArrayD<f64>| -> f64 {
            let mut g = Graph::new();
            let x = g.param(arr.clone());
            let y = build(&mut g, x);
            let root = g.sum_all(y);
            g.scalar(root)
        };

        let h = 1e-5;
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom < tol,
                "grad mismatch at {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        gradcheck(&[3, 4], |g, x| g.exp(x), 0, 1e-6);
        gradcheck(&[3, 4], |g, x| g.square(x), 1, 1e-6);
        gradcheck(
            &[3, 4],
            |g, x| {
                let s = g.affine(x, 0.3, 2.5); // keep ln/sqrt args positive
                let l = g.ln(s);
                g.sqrt(l)
            },
            2,
            1e-6,
        );
        gradcheck(&[2, 8], |g, x| g.leaky_relu(x, 0.1), 3, 1e-6);
        gradcheck(&[2, 8], |g, x| g.softmax(x, 1), 4, 1e-6);
    }

    #[test]
    fn broadcast_mul_and_div_reduce_correctly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = randn(&[2, 3, 4], &mut rng);
        gradcheck(
            &[1, 3, 1],
            move |g, b| {
                let a = g.input(a0.clone());
                let m = g.mul(a, b);
                g.div(m, b)
            },
            8,
            1e-6,
        );
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b0 = randn(&[4, 2], &mut rng);
        gradcheck(
            &[3, 4],
            move |g, a| {
                let b = g.param(b0.clone());
                g.matmul(a, b)
            },
            10,
            1e-6,
        );
    }

    #[test]
    fn batch_matmul_t1_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&[2, 3, 4], &mut rng);
        let b = randn(&[2, 3, 5], &mut rng);
        let mut g = Graph::new();
        let an = g.input(a.clone());
        let bn = g.input(b.clone());
        let y = g.batch_matmul_t1(an, bn);
        for s in 0..2 {
            for l in 0..4 {
                for m in 0..5 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        acc += a[[s, c, l]] * b[[s, c, m]];
                    }
                    assert!((g.value(y)[[s, l, m]] - acc).abs() < 1e-12);
                }
            }
        }
        // gradients, including the a == b (Gram) case
        gradcheck(
            &[2, 3, 4],
            |g, x| {
                let y = g.batch_matmul_t1(x, x);
                g.abs(y)
            },
            12,
            1e-5,
        );
    }

    #[test]
    fn lin_map_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = randn(&[2, 3, 6], &mut rng);
        gradcheck(
            &[4, 3],
            move |g, w| {
                let x = g.param(x0.clone());
                g.lin_map(w, x)
            },
            14,
            1e-6,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w0 = randn(&[4, 3], &mut rng);
        gradcheck(
            &[2, 3, 6],
            move |g, x| {
                let w = g.param(w0.clone());
                g.lin_map(w, x)
            },
            16,
            1e-6,
        );
    }

    #[test]
    fn conv2d_grads_and_shapes() {
        let mut g = Graph::new();
        let x = g.input(ArrayD::zeros(IxDyn(&[2, 3, 8, 8])));
        let w = g.input(ArrayD::zeros(IxDyn(&[5, 3, 3, 3])));
        let y = g.conv2d(x, w, 2, 1);
        assert_eq!(g.value(y).shape(), &[2, 5, 4, 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w0 = randn(&[2, 3, 3, 3], &mut rng);
        gradcheck(
            &[1, 3, 5, 5],
            move |g, x| {
                let w = g.param(w0.clone());
                g.conv2d(x, w, 2, 1)
            },
            18,
            1e-5,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x0 = randn(&[1, 2, 6, 6], &mut rng);
        gradcheck(
            &[3, 2, 3, 3],
            move |g, w| {
                let x = g.param(x0.clone());
                g.conv2d(x, w, 1, 1)
            },
            20,
            1e-5,
        );
    }

    #[test]
    fn pool_upsample_concat_select_grads() {
        gradcheck(&[1, 2, 4, 4], |g, x| g.avg_pool2d(x, 2), 21, 1e-6);
        gradcheck(&[1, 2, 4, 4], |g, x| g.max_pool2d(x, 3, 2, 1), 22, 1e-5);
        gradcheck(&[1, 2, 3, 3], |g, x| g.upsample_nearest2(x), 23, 1e-6);
        gradcheck(
            &[2, 2, 3, 3],
            |g, x| {
                let y = g.square(x);
                g.concat_channels(&[x, y])
            },
            24,
            1e-6,
        );
        gradcheck(
            &[3, 2, 2],
            |g, x| {
                let y = g.select_rows(x, &[2, 0, 1]);
                g.mul(x, y)
            },
            25,
            1e-6,
        );
    }

    #[test]
    fn frozen_inputs_receive_no_gradient() {
        let mut g = Graph::new();
        let frozen = g.input(arr1(&[1.0, 2.0]).into_dyn());
        let live = g.param(arr1(&[3.0, 4.0]).into_dyn());
        let y = g.mul(frozen, live);
        let root = g.sum_all(y);
        let grads = g.backward(root);
        assert!(grads.get(frozen).is_none());
        assert_eq!(
            grads.get(live).unwrap().as_slice().unwrap(),
            &[1.0, 2.0] // d(sum(f*l))/dl = f
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(arr2(&[[0.0, f64::ln(3.0)], [5.0, 5.0]]).into_dyn());
        let y = g.softmax(x, 1);
        let v = g.value(y);
        assert!((v[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((v[[0, 1]] - 0.75).abs() < 1e-12);
        assert!((v[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shared_operand_accumulates_both_paths() {
        // y = x * x  =>  dy/dx = 2x
        let mut g = Graph::new();
        let x = g.param(arr1(&[3.0]).into_dyn());
        let y = g.mul(x, x);
        let root = g.sum_all(y);
        let grads = g.backward(root);
        assert_eq!(grads.get(x).unwrap()[[0]], 6.0);
    }
}
