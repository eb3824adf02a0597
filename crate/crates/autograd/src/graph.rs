use std::sync::Arc;

use indexmap::IndexMap;

use crate::kernels::{self, DepthwiseGeom};
use crate::tensor::Tensor;

/// Sentinel index for [`Graph::gather`]: the output element is zero.
pub const NONE: usize = usize::MAX;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    LeakyRelu(f64),
    Gelu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
}

#[derive(Clone, Copy, Debug)]
enum BroadcastKind {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Broadcast {
        x: Var,
        b: Var,
        inner: usize,
        kind: BroadcastKind,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Unary(Var, Unary),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Gather {
        x: Var,
        idx: Arc<[usize]>,
    },
    ScatterAdd {
        x: Var,
        idx: Arc<[usize]>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    Depthwise {
        x: Var,
        k: Var,
        geom: DepthwiseGeom,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Result of a backward pass: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Unnamed leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named parameter leaf. Frozen parameters are recorded as constants.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        let v = self.push(t.clone(), Op::Leaf, trainable);
        self.params.push((name.to_string(), v));
        v
    }

    /// Gradients of every trainable parameter registered through [`Graph::param`].
    pub fn param_grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        let mut out: IndexMap<String, Tensor> = IndexMap::new();
        for (name, v) in &self.params {
            let Some(g) = grads.get(*v) else { continue };
            let shape = self.shape(*v).to_vec();
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.clone(), Tensor::from_parts(shape, g.to_vec()));
                }
            }
        }
        out
    }

    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, data), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), Op::Scale(x, c), ng)
    }

    fn broadcast(&mut self, x: Var, b: Var, inner: usize, kind: BroadcastKind) -> Var {
        let blen = self.value(b).numel();
        let xv = self.value(x);
        assert!(
            inner > 0 && xv.numel() % (inner * blen) == 0,
            "broadcast: {:?} incompatible with {} (inner {inner})",
            xv.shape(),
            blen
        );
        let bv = self.value(b).data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let bj = bv[(i / inner) % blen];
                match kind {
                    BroadcastKind::Add => v + bj,
                    BroadcastKind::Mul => v * bj,
                }
            })
            .collect();
        let shape = xv.shape().to_vec();
        let ng = self.needs(x) || self.needs(b);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Broadcast { x, b, inner, kind },
            ng,
        )
    }

    /// `x + b` with `b` repeated along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        self.broadcast(x, b, 1, BroadcastKind::Add)
    }

    /// `x * b` with `b` repeated along the last axis.
    pub fn mul_bias(&mut self, x: Var, b: Var) -> Var {
        self.broadcast(x, b, 1, BroadcastKind::Mul)
    }

    /// `x + b` where element `i` of `x` pairs with `b[(i / inner) % len(b)]`.
    pub fn add_broadcast(&mut self, x: Var, b: Var, inner: usize) -> Var {
        self.broadcast(x, b, inner, BroadcastKind::Add)
    }

    /// Matrix product. Rank-2 operands multiply directly; rank-3 operands
    /// multiply batch-wise with matching leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n),
            _ => panic!("matmul: incompatible shapes {sa:?} x {sb:?}"),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                kernels::matmul_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            ng,
        )
    }

    fn unary(&mut self, x: Var, f: Unary) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| match f {
                Unary::Relu => v.max(0.0),
                Unary::LeakyRelu(a) => {
                    if v > 0.0 {
                        v
                    } else {
                        a * v
                    }
                }
                Unary::Gelu => gelu(v),
                Unary::Sigmoid => sigmoid(v),
                Unary::Tanh => v.tanh(),
                Unary::Softplus => softplus(v),
                Unary::Exp => v.exp(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), Op::Unary(x, f), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), Op::Softmax(x), ng)
    }

    /// Log-softmax over the last axis (log-sum-exp stabilised).
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), Op::LogSoftmax(x), ng)
    }

    /// Normalises each row of the last axis to zero mean and unit variance
    /// (no affine transform).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let shape = xv.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), Op::LayerNorm { x, rstd }, ng)
    }

    /// `out[i] = x[idx[i]]`, or zero where `idx[i] == NONE`.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            idx.len(),
            "gather: index count does not match output shape"
        );
        let xv = self.value(x).data();
        let data = idx
            .iter()
            .map(|&i| if i == NONE { 0.0 } else { xv[i] })
            .collect();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), Op::Gather { x, idx }, ng)
    }

    /// `out[idx[i]] += x[i]`, skipping `NONE`; the adjoint of [`Graph::gather`].
    pub fn scatter_add(&mut self, x: Var, idx: Arc<[usize]>, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let xv = self.value(x).data();
        assert_eq!(idx.len(), xv.len(), "scatter_add: index count mismatch");
        let mut data = vec![0.0; shape.iter().product()];
        for (&i, &v) in idx.iter().zip(xv) {
            if i != NONE {
                data[i] += v;
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, data), Op::ScatterAdd { x, idx }, ng)
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "transpose expects a matrix");
        let (r, c) = (s[0], s[1]);
        let idx: Arc<[usize]> = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(x, idx, vec![c, r])
    }

    /// Concatenates flat buffers; `shape` gives the result shape.
    pub fn concat(&mut self, xs: &[Var], shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.iter().product());
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push(Tensor::new(shape, data).expect("concat: bad shape"), Op::Concat(xs.to_vec()), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean over the first axis: `[n, ...] -> [...]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let rows = xv.shape()[0];
        let cols = xv.numel() / rows;
        let mut out = vec![0.0; cols];
        for row in xv.data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let shape = if xv.shape().len() > 1 {
            xv.shape()[1..].to_vec()
        } else {
            vec![1]
        };
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::MeanRows(x), ng)
    }

    /// Same-padded depthwise convolution of a token-major map `x: [h·w, c]`
    /// with `kernel: [k·k, c]`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, h: usize, w: usize) -> Var {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        assert_eq!(xs, vec![h * w, xs[1]], "depthwise: bad input shape");
        let k = (ks[0] as f64).sqrt().round() as usize;
        assert_eq!(k * k, ks[0], "depthwise: kernel taps must be square");
        assert_eq!(ks[1], xs[1], "depthwise: channel mismatch");
        assert!(k % 2 == 1, "depthwise: kernel side must be odd");
        let geom = DepthwiseGeom {
            h,
            w,
            channels: xs[1],
            kernel: k,
        };
        let out = geom.forward(self.value(x).data(), self.value(kernel).data());
        let ng = self.needs(x) || self.needs(kernel);
        self.push(
            Tensor::from_parts(xs, out),
            Op::Depthwise { x, k: kernel, geom },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape: element count changed");
        let ng = self.needs(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Reverse pass from `root`, seeding it with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = vec![1.0; self.value(root).numel()];
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.value(root).numel(), "backward: seed size");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| axpy(g, dy, 1.0));
                self.accumulate(grads, *b, |g| axpy(g, dy, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| axpy(g, dy, 1.0));
                self.accumulate(grads, *b, |g| axpy(g, dy, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for ((g, d), bv) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * bv;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((g, d), av) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * av;
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |g| axpy(g, dy, *c)),
            Op::Broadcast { x, b, inner, kind } => {
                let bv = self.value(*b).data();
                let blen = bv.len();
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| match kind {
                    BroadcastKind::Add => axpy(g, dy, 1.0),
                    BroadcastKind::Mul => {
                        for (j, (g, d)) in g.iter_mut().zip(dy).enumerate() {
                            *g += d * bv[(j / inner) % blen];
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for (j, d) in dy.iter().enumerate() {
                        let bi = (j / inner) % blen;
                        g[bi] += match kind {
                            BroadcastKind::Add => *d,
                            BroadcastKind::Mul => d * xv[j],
                        };
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for bi in 0..*batch {
                        kernels::matmul_grad_a(
                            &dy[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * k * n..(bi + 1) * k * n],
                            &mut g[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for bi in 0..*batch {
                        kernels::matmul_grad_b(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &dy[bi * m * n..(bi + 1) * m * n],
                            &mut g[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for (((g, d), &xi), &yi) in g.iter_mut().zip(dy).zip(xv).zip(y) {
                        let dydx = match f {
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::LeakyRelu(a) => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    *a
                                }
                            }
                            Unary::Gelu => gelu_grad(xi),
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Tanh => 1.0 - yi * yi,
                            Unary::Softplus => sigmoid(xi),
                            Unary::Exp => yi,
                        };
                        *g += d * dydx;
                    }
                });
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                self.accumulate(grads, *x, |g| {
                    for ((grow, dyrow), yrow) in g.chunks_mut(d).zip(dy.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = dyrow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((g, dv), yv) in grow.iter_mut().zip(dyrow).zip(yrow) {
                            *g += yv * (dv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = node.value.last_dim();
                self.accumulate(grads, *x, |g| {
                    for ((grow, dyrow), yrow) in g.chunks_mut(d).zip(dy.chunks(d)).zip(y.chunks(d)) {
                        let total: f64 = dyrow.iter().sum();
                        for ((g, dv), yv) in grow.iter_mut().zip(dyrow).zip(yrow) {
                            *g += dv - yv.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *x, |g| {
                    for (((grow, dyrow), yrow), r) in g
                        .chunks_mut(d)
                        .zip(dy.chunks(d))
                        .zip(y.chunks(d))
                        .zip(rstd)
                    {
                        let mean_dy = dyrow.iter().sum::<f64>() / d as f64;
                        let mean_dyy =
                            dyrow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((g, dv), yv) in grow.iter_mut().zip(dyrow).zip(yrow) {
                            *g += r * (dv - mean_dy - yv * mean_dyy);
                        }
                    }
                });
            }
            Op::Gather { x, idx } => self.accumulate(grads, *x, |g| {
                for (&j, d) in idx.iter().zip(dy) {
                    if j != NONE {
                        g[j] += d;
                    }
                }
            }),
            Op::ScatterAdd { x, idx } => self.accumulate(grads, *x, |g| {
                for (g, &j) in g.iter_mut().zip(idx.iter()) {
                    if j != NONE {
                        *g += dy[j];
                    }
                }
            }),
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    self.accumulate(grads, x, |g| axpy(g, &dy[offset..offset + len], 1.0));
                    offset += len;
                }
            }
            Op::Sum(x) => self.accumulate(grads, *x, |g| {
                for g in g.iter_mut() {
                    *g += dy[0];
                }
            }),
            Op::MeanRows(x) => {
                let cols = dy.len();
                let rows = self.value(*x).numel() / cols;
                self.accumulate(grads, *x, |g| {
                    for row in g.chunks_mut(cols) {
                        for (g, d) in row.iter_mut().zip(dy) {
                            *g += d / rows as f64;
                        }
                    }
                });
            }
            Op::Depthwise { x, k, geom } => {
                let (xv, kv) = (self.value(*x).data(), self.value(*k).data());
                if self.needs(*x) {
                    let mut buf = take_or_zero(grads, *x, xv.len());
                    geom.backward(xv, kv, dy, Some(buf.as_mut_slice()), None);
                    grads[x.0] = Some(buf);
                }
                if self.needs(*k) {
                    let mut buf = take_or_zero(grads, *k, kv.len());
                    geom.backward(xv, kv, dy, None, Some(buf.as_mut_slice()));
                    grads[k.0] = Some(buf);
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |g| axpy(g, dy, 1.0)),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).numel();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> Vec<f64> {
    grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
}

fn axpy(g: &mut [f64], x: &[f64], a: f64) {
    for (g, x) in g.iter_mut().zip(x) {
        *g += a * x;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
