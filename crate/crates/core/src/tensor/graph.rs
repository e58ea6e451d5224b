//! Operation tape and reverse-mode gradient computation.
//!
//! A [`Graph`] owns every intermediate value produced during a forward pass.
//! Nodes are appended in execution order, so the vector itself is a
//! topological order and one reverse sweep visits each node exactly once.
//! Leaves are inserted explicitly; gradients flow only into subgraphs that
//! contain a differentiable leaf.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node owned by a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    BiasAdd { x: Var, b: Var },
    Softmax { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Mean { x: Var },
    L2Norm { x: Var },
    RowL2Norm { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Reshape { x: Var },
    GlobalAvgPool { x: Var },
    Select { x: Var, index: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    /// True when this node is a differentiable leaf or depends on one.
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, if any gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a differentiable-or-not leaf holding a copy of `t`'s values.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
        )
    }

    /// Insert a leaf from raw parts.
    pub fn leaf_from(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, shape, values, requires_grad)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    /// Copy a node's current value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].values.clone())
            .expect("node shape/value invariant")
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite forward value"
        );
        self.nodes.push(Node {
            op,
            shape,
            values,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── forward primitives ──────────────────────────────────────────────

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.values(a), self.values(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], out, ng))
    }

    /// Cross-correlation of `x:[n,c,h,w]` with `w:[oc,c,kh,kw]`; symmetric
    /// zero padding, square stride.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (oc, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let dims = ConvDims {
            n,
            c,
            h,
            w: wd,
            oc,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        };
        let out = conv2d_forward(self.values(x), self.values(w), &dims);
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, vec![n, oc, oh, ow], out, ng))
    }

    /// Non-overlapping max pooling with window and stride `size`.
    /// Ties inside a window resolve to the first element in scan order.
    pub fn max_pool2(&mut self, x: Var, size: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::BadShape {
                op: "max_pool2",
                expected: "a [n,c,h,w] tensor",
                shape: sx,
            });
        }
        if size == 0 || sx[2] < size || sx[3] < size {
            return Err(Error::InvalidArgument(format!(
                "max_pool2 window {size} does not fit input {sx:?}"
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / size, w / size);
        let xv = self.values(x);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        let mut o = 0;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..size {
                            for dx in 0..size {
                                let i = base + (yo * size + dy) * w + (xo * size + dx);
                                if xv[i] > best {
                                    best = xv[i];
                                    best_i = i;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_i;
                        o += 1;
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::MaxPool2 { x, argmax }, vec![n, c, oh, ow], out, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.values(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(Op::Relu { x }, shape, out, ng)
    }

    /// Broadcast add: `x:[n,f] + b:[f]` per row, or `x:[n,c,h,w] + b:[c]`
    /// per channel.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let ok = sb.len() == 1
            && match sx.len() {
                2 => sb[0] == sx[1],
                4 => sb[0] == sx[1],
                _ => false,
            };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: sx,
                rhs: sb,
            });
        }
        let xv = self.values(x);
        let bv = self.values(b);
        let mut out = Vec::with_capacity(xv.len());
        if sx.len() == 2 {
            for row in xv.chunks_exact(sx[1]) {
                out.extend(row.iter().zip(bv).map(|(v, bb)| v + bb));
            }
        } else {
            let plane = sx[2] * sx[3];
            for (i, &v) in xv.iter().enumerate() {
                let ch = (i / plane) % sx[1];
                out.push(v + bv[ch]);
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::BiasAdd { x, b }, sx, out, ng))
    }

    /// Row-wise softmax of `[n,c]`, computed against the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::BadShape {
                op: "softmax",
                expected: "a [n,c] matrix",
                shape: sx,
            });
        }
        let mut out = Vec::with_capacity(self.values(x).len());
        for row in self.values(x).chunks_exact(sx[1]) {
            out.extend(softmax_row(row));
        }
        let ng = self.needs(x);
        Ok(self.push(Op::Softmax { x }, sx, out, ng))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits:[n,c]`, evaluated via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sx = self.shape(logits).to_vec();
        if sx.len() != 2 {
            return Err(Error::BadShape {
                op: "cross_entropy",
                expected: "a [n,c] logit matrix",
                shape: sx,
            });
        }
        if labels.len() != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: sx,
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= sx[1]) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                sx[1]
            )));
        }
        let mut total = 0.0;
        for (row, &y) in self.values(logits).chunks_exact(sx[1]).zip(labels) {
            total += log_sum_exp(row) - row[y];
        }
        let mean = total / sx[0] as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            vec![1],
            vec![mean],
            ng,
        ))
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.values(x).len() as f64;
        let m = self.values(x).iter().sum::<f64>() / n;
        let ng = self.needs(x);
        self.push(Op::Mean { x }, vec![1], vec![m], ng)
    }

    /// Euclidean norm of the whole tensor, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let ss: f64 = self.values(x).iter().map(|v| v * v).sum();
        let ng = self.needs(x);
        self.push(Op::L2Norm { x }, vec![1], vec![ss.sqrt()], ng)
    }

    /// Euclidean norm of each row of `[n,d]`, as `[n]`.
    pub fn row_l2_norm(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::BadShape {
                op: "row_l2_norm",
                expected: "a [n,d] matrix",
                shape: sx,
            });
        }
        let out: Vec<f64> = self
            .values(x)
            .chunks_exact(sx[1])
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Op::RowL2Norm { x }, vec![sx[0]], out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, sa, out, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub { a, b }, sa, out, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.values(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(Op::Scale { x, factor }, shape, out, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.values(x).len() {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {} elements into {shape:?}",
                self.values(x).len()
            )));
        }
        let out = self.values(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape { x }, shape, out, ng))
    }

    /// Mean over the spatial axes of `[n,c,h,w]`, as `[n,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::BadShape {
                op: "global_avg_pool",
                expected: "a [n,c,h,w] tensor",
                shape: sx,
            });
        }
        let plane = sx[2] * sx[3];
        let out: Vec<f64> = self
            .values(x)
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool { x }, vec![sx[0], sx[1]], out, ng))
    }

    /// Single element at flat `index`, as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        if index >= self.values(x).len() {
            return Err(Error::InvalidArgument(format!(
                "select index {index} out of range for {} elements",
                self.values(x).len()
            )));
        }
        let v = self.values(x)[index];
        let ng = self.needs(x);
        Ok(self.push(Op::Select { x, index }, vec![1], vec![v], ng))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `output`. Returns a gradient per node
    /// reached by the sweep; leaves that never feed `output` stay `None`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.values.len() != 1 {
            return Err(Error::NotScalar {
                shape: out_node.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of a scalar `output` with respect to the given leaves.
    /// Leaves off the computation path receive zero gradients; non-leaf
    /// variables are rejected.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        for v in wrt {
            match self.nodes.get(v.0) {
                Some(n) if matches!(n.op, Op::Leaf) => {}
                _ => return Err(Error::NotALeaf { index: v.0 }),
            }
        }
        let grads = self.backward(output)?;
        Ok(wrt
            .iter()
            .map(|&v| {
                let shape = self.nodes[v.0].shape.clone();
                match grads.get(v) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut into = |v: Var, f: &mut dyn FnMut(&mut Vec<f64>)| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].values.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                into(*a, &mut |da| {
                    // da += g · bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                into(*b, &mut |db| {
                    // db += aᵀ · g
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = &self.nodes[x.0].shape;
                let sw = &self.nodes[w.0].shape;
                let so = &node.shape;
                let dims = ConvDims {
                    n: sx[0],
                    c: sx[1],
                    h: sx[2],
                    w: sx[3],
                    oc: sw[0],
                    kh: sw[2],
                    kw: sw[3],
                    oh: so[2],
                    ow: so[3],
                    stride: *stride,
                    pad: *pad,
                };
                let (xv, wv) = (&self.nodes[x.0].values, &self.nodes[w.0].values);
                into(*x, &mut |dx| conv2d_backward_input(g, wv, dx, &dims));
                into(*w, &mut |dw| conv2d_backward_weight(g, xv, dw, &dims));
            }
            Op::MaxPool2 { x, argmax } => {
                into(*x, &mut |dx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                });
            }
            Op::Relu { x } => {
                let xv = &self.nodes[x.0].values;
                into(*x, &mut |dx| {
                    for (i, &v) in xv.iter().enumerate() {
                        if v > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::BiasAdd { x, b } => {
                let sx = &self.nodes[x.0].shape;
                into(*x, &mut |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                if sx.len() == 2 {
                    let f = sx[1];
                    into(*b, &mut |db| {
                        for row in g.chunks_exact(f) {
                            for (d, gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    });
                } else {
                    let plane = sx[2] * sx[3];
                    let c = sx[1];
                    into(*b, &mut |db| {
                        for (i, gv) in g.iter().enumerate() {
                            db[(i / plane) % c] += gv;
                        }
                    });
                }
            }
            Op::Softmax { x } => {
                let c = node.shape[1];
                let sv = &node.values;
                into(*x, &mut |dx| {
                    for r in 0..node.shape[0] {
                        let s = &sv[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += s[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let c = self.nodes[logits.0].shape[1];
                let n = labels.len() as f64;
                let lv = &self.nodes[logits.0].values;
                into(*logits, &mut |dl| {
                    for (r, &y) in labels.iter().enumerate() {
                        let p = softmax_row(&lv[r * c..(r + 1) * c]);
                        for j in 0..c {
                            let ind = if j == y { 1.0 } else { 0.0 };
                            dl[r * c + j] += g[0] * (p[j] - ind) / n;
                        }
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].values.len() as f64;
                into(*x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::L2Norm { x } => {
                let norm = node.values[0];
                let xv = &self.nodes[x.0].values;
                into(*x, &mut |dx| {
                    if norm > 0.0 {
                        for (d, &v) in dx.iter_mut().zip(xv) {
                            *d += g[0] * v / norm;
                        }
                    }
                    // subgradient 0 at the origin
                });
            }
            Op::RowL2Norm { x } => {
                let d = self.nodes[x.0].shape[1];
                let xv = &self.nodes[x.0].values;
                into(*x, &mut |dx| {
                    for (r, &norm) in node.values.iter().enumerate() {
                        if norm > 0.0 {
                            for j in 0..d {
                                dx[r * d + j] += g[r] * xv[r * d + j] / norm;
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                into(*a, &mut |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                into(*b, &mut |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                into(*a, &mut |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                into(*b, &mut |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                into(*x, &mut |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += f * gv;
                    }
                });
            }
            Op::Reshape { x } => {
                into(*x, &mut |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let sx = &self.nodes[x.0].shape;
                let plane = sx[2] * sx[3];
                into(*x, &mut |dx| {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i / plane] / plane as f64;
                    }
                });
            }
            Op::Select { x, index } => {
                let idx = *index;
                into(*x, &mut |dx| {
                    dx[idx] += g[0];
                });
            }
        }
    }
}

// ── dense kernels ───────────────────────────────────────────────────────

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn conv2d_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let sample_in = d.c * d.h * d.w;
    let sample_out = d.oc * d.oh * d.ow;
    let mut out = vec![0.0; d.n * sample_out];
    out.par_chunks_mut(sample_out)
        .zip(x.par_chunks(sample_in))
        .for_each(|(yo, xi)| conv2d_forward_sample(xi, w, yo, d));
    out
}

fn conv2d_forward_sample(x: &[f64], w: &[f64], out: &mut [f64], d: &ConvDims) {
    for oc in 0..d.oc {
        for yo in 0..d.oh {
            for xo in 0..d.ow {
                let mut acc = 0.0;
                for c in 0..d.c {
                    let xplane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
                    let wplane = &w[(oc * d.c + c) * d.kh * d.kw..];
                    for ky in 0..d.kh {
                        let iy = (yo * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (xo * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += xplane[iy as usize * d.w + ix as usize]
                                * wplane[ky * d.kw + kx];
                        }
                    }
                }
                out[(oc * d.oh + yo) * d.ow + xo] = acc;
            }
        }
    }
}

fn conv2d_backward_input(g: &[f64], w: &[f64], dx: &mut [f64], d: &ConvDims) {
    let sample_in = d.c * d.h * d.w;
    let sample_out = d.oc * d.oh * d.ow;
    dx.par_chunks_mut(sample_in)
        .zip(g.par_chunks(sample_out))
        .for_each(|(dxi, gi)| {
            for oc in 0..d.oc {
                for yo in 0..d.oh {
                    for xo in 0..d.ow {
                        let gv = gi[(oc * d.oh + yo) * d.ow + xo];
                        if gv == 0.0 {
                            continue;
                        }
                        for c in 0..d.c {
                            for ky in 0..d.kh {
                                let iy = (yo * d.stride + ky) as isize - d.pad as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = (xo * d.stride + kx) as isize - d.pad as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    dxi[(c * d.h + iy as usize) * d.w + ix as usize] +=
                                        gv * w[((oc * d.c + c) * d.kh + ky) * d.kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
}

fn conv2d_backward_weight(g: &[f64], x: &[f64], dw: &mut [f64], d: &ConvDims) {
    let sample_in = d.c * d.h * d.w;
    let sample_out = d.oc * d.oh * d.ow;
    // Per-sample partials computed in parallel, reduced in batch order so the
    // result does not depend on scheduling.
    let partials: Vec<Vec<f64>> = (0..d.n)
        .into_par_iter()
        .map(|ni| {
            let xi = &x[ni * sample_in..(ni + 1) * sample_in];
            let gi = &g[ni * sample_out..(ni + 1) * sample_out];
            let mut local = vec![0.0; dw.len()];
            for oc in 0..d.oc {
                for yo in 0..d.oh {
                    for xo in 0..d.ow {
                        let gv = gi[(oc * d.oh + yo) * d.ow + xo];
                        if gv == 0.0 {
                            continue;
                        }
                        for c in 0..d.c {
                            for ky in 0..d.kh {
                                let iy = (yo * d.stride + ky) as isize - d.pad as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = (xo * d.stride + kx) as isize - d.pad as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    local[((oc * d.c + c) * d.kh + ky) * d.kw + kx] += gv
                                        * xi[(c * d.h + iy as usize) * d.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
            local
        })
        .collect();
    for local in partials {
        for (dst, v) in dw.iter_mut().zip(local) {
            *dst += v;
        }
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
