//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! The graph is a flat tape: every operation computes its value eagerly and
//! records the parent ids plus whatever it needs for the backward pass.
//! Scalars are rank-0 arrays so one node type covers feature maps, vectors
//! and loss values. The op set is exactly what the synergic model needs;
//! there is no broadcasting beyond tensor-times-scalar.

mod adam;
mod conv;

pub use adam::Adam;
pub use conv::ConvSpec;

use ndarray::{ArrayD, IxDyn};

pub type Tensor<T> = ArrayD<T>;

/// Element type of the compute graph. Training uses `f32`; gradient checks
/// run the same code in `f64`.
pub trait Scalar: ndarray::NdFloat + Send + Sync + 'static {
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    /// C <- alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        f64::from(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv3d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
        in_dims: [usize; 3],
        /// im2col matrix [cin*k^3, out_voxels], cached for the backward GEMMs.
        cols: Tensor<T>,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    /// a * x + b with constant coefficients, elementwise.
    Affine {
        x: NodeId,
        a: T,
        b: T,
    },
    Log {
        x: NodeId,
    },
    Abs {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: T,
        hi: T,
    },
    Sum {
        x: NodeId,
    },
    /// Per-channel spatial mean: [K, D, H, W] -> [K].
    Gap {
        x: NodeId,
    },
    /// sum_k w[k] * f[k, ...]: ([K, D, H, W], [K]) -> [D, H, W].
    ChannelWeightedSum {
        f: NodeId,
        w: NodeId,
    },
    Dot {
        a: NodeId,
        b: NodeId,
    },
    /// Tensor times a rank-0 node.
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    /// (x - min) / (max - min); a constant input maps to all zeros.
    MinMaxNorm {
        x: NodeId,
        lo: T,
        hi: T,
        argmin: usize,
        argmax: usize,
        constant: bool,
    },
    Reshape {
        x: NodeId,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Eager tape of tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Value of a rank-0 node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar node")
    }

    pub fn scalar_f64(&self, id: NodeId) -> f64 {
        self.scalar(id).into_f64()
    }

    // -- leaves ------------------------------------------------------------

    /// Trainable leaf (parameters).
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(scalar_tensor(T::from_f64(v)))
    }

    // -- ops ----------------------------------------------------------------

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> NodeId {
        let xs = self.value(x).shape();
        let in_dims = [xs[1], xs[2], xs[3]];
        let (value, cols) = conv::forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b).clone()),
            &spec,
        );
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            value,
            Op::Conv3d {
                x,
                w,
                bias,
                spec,
                in_dims,
                cols,
            },
            needs,
        )
    }

    /// Group normalization over [C, D, H, W] with per-channel affine.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let eps = T::from_f64(1e-5);
        let xv = self.value(x);
        let c = xv.shape()[0];
        let spatial: usize = xv.shape()[1..].iter().product();
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let per = c / groups;
        let xs = xv.as_slice().expect("contiguous");
        let gv = self.value(gamma).as_slice().expect("contiguous").to_vec();
        let bv = self.value(beta).as_slice().expect("contiguous").to_vec();

        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = Vec::with_capacity(groups);
        let m = per * spatial;
        for g in 0..groups {
            let start = g * m;
            let chunk = &xs[start..start + m];
            let mut mean = T::zero();
            for v in chunk {
                mean = mean + *v;
            }
            mean = mean / T::from_f64(m as f64);
            let mut var = T::zero();
            for v in chunk {
                let d = *v - mean;
                var = var + d * d;
            }
            var = var / T::from_f64(m as f64);
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (i, v) in chunk.iter().enumerate() {
                let idx = start + i;
                let ch = idx / spatial;
                let h = (*v - mean) * inv;
                xhat[idx] = h;
                out[idx] = gv[ch] * h + bv[ch];
            }
        }
        let shape = xv.raw_dim();
        let xhat = Tensor::from_shape_vec(shape.clone(), xhat).unwrap();
        let value = Tensor::from_shape_vec(shape, out).unwrap();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self
            .value(x)
            .mapv(|v| T::one() / (T::one() + (-v).exp()));
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) - self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul { a, b }, needs)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) / self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Div { a, b }, needs)
    }

    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let (av, bv) = (T::from_f64(a), T::from_f64(b));
        let value = self.value(x).mapv(|v| av * v + bv);
        let needs = self.needs(x);
        self.push(value, Op::Affine { x, a: av, b: bv }, needs)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| v.ln());
        let needs = self.needs(x);
        self.push(value, Op::Log { x }, needs)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).mapv(|v| v.abs());
        let needs = self.needs(x);
        self.push(value, Op::Abs { x }, needs)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let value = self.value(x).mapv(|v| v.min(h).max(l));
        let needs = self.needs(x);
        self.push(value, Op::Clamp { x, lo: l, hi: h }, needs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = scalar_tensor(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum { x }, needs)
    }

    pub fn gap(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let k = xv.shape()[0];
        let spatial: usize = xv.shape()[1..].iter().product();
        let xs = xv.as_slice().expect("contiguous");
        let inv = T::from_f64(1.0 / spatial as f64);
        let mut out = Vec::with_capacity(k);
        for c in 0..k {
            let mut acc = T::zero();
            for v in &xs[c * spatial..(c + 1) * spatial] {
                acc = acc + *v;
            }
            out.push(acc * inv);
        }
        let value = Tensor::from_shape_vec(IxDyn(&[k]), out).unwrap();
        let needs = self.needs(x);
        self.push(value, Op::Gap { x }, needs)
    }

    pub fn channel_weighted_sum(&mut self, f: NodeId, w: NodeId) -> NodeId {
        let fv = self.value(f);
        let k = fv.shape()[0];
        let spatial_shape: Vec<usize> = fv.shape()[1..].to_vec();
        let spatial: usize = spatial_shape.iter().product();
        let fs = fv.as_slice().expect("contiguous");
        let ws = self.value(w).as_slice().expect("contiguous");
        assert_eq!(ws.len(), k);
        let mut out = vec![T::zero(); spatial];
        for c in 0..k {
            let wc = ws[c];
            let row = &fs[c * spatial..(c + 1) * spatial];
            for (o, v) in out.iter_mut().zip(row) {
                *o = *o + wc * *v;
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&spatial_shape), out).unwrap();
        let needs = self.needs(f) || self.needs(w);
        self.push(value, Op::ChannelWeightedSum { f, w }, needs)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).as_slice().expect("contiguous");
        let bv = self.value(b).as_slice().expect("contiguous");
        assert_eq!(av.len(), bv.len());
        let mut acc = T::zero();
        for (x, y) in av.iter().zip(bv) {
            acc = acc + *x * *y;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(scalar_tensor(acc), Op::Dot { a, b }, needs)
    }

    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let value = self.value(x).mapv(|v| v * sv);
        let needs = self.needs(x) || self.needs(s);
        self.push(value, Op::ScaleBy { x, s }, needs)
    }

    /// Min-max rescaling to [0, 1]. A constant input (max == min) maps to the
    /// all-zero tensor and propagates zero gradient.
    pub fn min_max_norm(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let xs = xv.as_slice().expect("contiguous");
        let (mut lo, mut hi) = (xs[0], xs[0]);
        let (mut argmin, mut argmax) = (0usize, 0usize);
        for (i, v) in xs.iter().enumerate() {
            if *v < lo {
                lo = *v;
                argmin = i;
            }
            if *v > hi {
                hi = *v;
                argmax = i;
            }
        }
        let constant = hi == lo;
        let value = if constant {
            Tensor::zeros(xv.raw_dim())
        } else {
            let range = hi - lo;
            xv.mapv(|v| (v - lo) / range)
        };
        let needs = self.needs(x);
        self.push(
            value,
            Op::MinMaxNorm {
                x,
                lo,
                hi,
                argmin,
                argmax,
                constant,
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    // -- backward ------------------------------------------------------------

    /// Reverse-mode gradients of a rank-0 `loss` with respect to every node.
    /// Entries are `None` for nodes the loss does not depend on (or that do
    /// not require gradients).
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.nodes[loss.0].value.len(), 1);
        grads[loss.0] = Some(scalar_tensor(T::one()));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv3d {
                    x,
                    w,
                    bias,
                    spec,
                    in_dims,
                    cols,
                } => {
                    let (dx, dw, db) = conv::backward(
                        &g,
                        self.value(*w),
                        cols,
                        spec,
                        *in_dims,
                        self.needs(*x),
                        self.needs(*w),
                        bias.is_some(),
                    );
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx.expect("dx"));
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, dw.expect("dw"));
                    }
                    if let Some(b) = bias {
                        if self.needs(*b) {
                            accumulate(&mut grads, *b, db.expect("db"));
                        }
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let gs = g.as_slice().expect("contiguous");
                    let hs = xhat.as_slice().expect("contiguous");
                    let c = node.value.shape()[0];
                    let spatial: usize = node.value.shape()[1..].iter().product();
                    let gv = self.value(*gamma).as_slice().expect("contiguous");
                    let per = c / groups;
                    let m = per * spatial;

                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut dgamma = vec![T::zero(); c];
                        let mut dbeta = vec![T::zero(); c];
                        for ch in 0..c {
                            let s = ch * spatial;
                            for j in 0..spatial {
                                dgamma[ch] = dgamma[ch] + gs[s + j] * hs[s + j];
                                dbeta[ch] = dbeta[ch] + gs[s + j];
                            }
                        }
                        if self.needs(*gamma) {
                            accumulate(
                                &mut grads,
                                *gamma,
                                Tensor::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                            );
                        }
                        if self.needs(*beta) {
                            accumulate(
                                &mut grads,
                                *beta,
                                Tensor::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
                            );
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); gs.len()];
                        let minv = T::from_f64(1.0 / m as f64);
                        for grp in 0..*groups {
                            let start = grp * m;
                            let inv = inv_std[grp];
                            let mut mean_dh = T::zero();
                            let mut mean_dh_h = T::zero();
                            for j in 0..m {
                                let idx = start + j;
                                let ch = idx / spatial;
                                let dh = gs[idx] * gv[ch];
                                mean_dh = mean_dh + dh;
                                mean_dh_h = mean_dh_h + dh * hs[idx];
                            }
                            mean_dh = mean_dh * minv;
                            mean_dh_h = mean_dh_h * minv;
                            for j in 0..m {
                                let idx = start + j;
                                let ch = idx / spatial;
                                let dh = gs[idx] * gv[ch];
                                dx[idx] = inv * (dh - mean_dh - hs[idx] * mean_dh_h);
                            }
                        }
                        accumulate(
                            &mut grads,
                            *x,
                            Tensor::from_shape_vec(node.value.raw_dim(), dx).unwrap(),
                        );
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let dx = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|gv, v| if *v > T::zero() { *gv } else { T::zero() });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let y = &node.value;
                    let dx = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|gv, yv| *gv * *yv * (T::one() - *yv));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.mapv(|v| -v));
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Div { a, b } => {
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g / bv);
                    }
                    if self.needs(*b) {
                        let av = self.value(*a);
                        let db = ndarray::Zip::from(&g)
                            .and(av)
                            .and(bv)
                            .map_collect(|gv, a, b| -*gv * *a / (*b * *b));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Affine { x, a, .. } => {
                    let a = *a;
                    accumulate(&mut grads, *x, g.mapv(|v| v * a));
                }
                Op::Log { x } => {
                    let dx = &g / self.value(*x);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Abs { x } => {
                    let xv = self.value(*x);
                    let dx = ndarray::Zip::from(&g).and(xv).map_collect(|gv, v| {
                        if *v > T::zero() {
                            *gv
                        } else if *v < T::zero() {
                            -*gv
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x);
                    let (lo, hi) = (*lo, *hi);
                    let dx = ndarray::Zip::from(&g).and(xv).map_collect(|gv, v| {
                        if *v > lo && *v < hi {
                            *gv
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum { x } => {
                    let gs = *g.iter().next().unwrap();
                    let dx = Tensor::from_elem(self.value(*x).raw_dim(), gs);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gap { x } => {
                    let xv = self.value(*x);
                    let k = xv.shape()[0];
                    let spatial: usize = xv.shape()[1..].iter().product();
                    let inv = T::from_f64(1.0 / spatial as f64);
                    let gs = g.as_slice().expect("contiguous");
                    let mut dx = vec![T::zero(); xv.len()];
                    for c in 0..k {
                        let gc = gs[c] * inv;
                        for v in &mut dx[c * spatial..(c + 1) * spatial] {
                            *v = gc;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_shape_vec(xv.raw_dim(), dx).unwrap(),
                    );
                }
                Op::ChannelWeightedSum { f, w } => {
                    let fv = self.value(*f);
                    let k = fv.shape()[0];
                    let spatial: usize = fv.shape()[1..].iter().product();
                    let fs = fv.as_slice().expect("contiguous");
                    let ws = self.value(*w).as_slice().expect("contiguous");
                    let gs = g.as_slice().expect("contiguous");
                    if self.needs(*f) {
                        let mut df = vec![T::zero(); fs.len()];
                        for c in 0..k {
                            let wc = ws[c];
                            let row = &mut df[c * spatial..(c + 1) * spatial];
                            for (d, gv) in row.iter_mut().zip(gs) {
                                *d = wc * *gv;
                            }
                        }
                        accumulate(
                            &mut grads,
                            *f,
                            Tensor::from_shape_vec(fv.raw_dim(), df).unwrap(),
                        );
                    }
                    if self.needs(*w) {
                        let mut dw = vec![T::zero(); k];
                        for c in 0..k {
                            let row = &fs[c * spatial..(c + 1) * spatial];
                            let mut acc = T::zero();
                            for (v, gv) in row.iter().zip(gs) {
                                acc = acc + *v * *gv;
                            }
                            dw[c] = acc;
                        }
                        accumulate(
                            &mut grads,
                            *w,
                            Tensor::from_shape_vec(IxDyn(&[k]), dw).unwrap(),
                        );
                    }
                }
                Op::Dot { a, b } => {
                    let gs = *g.iter().next().unwrap();
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, self.value(*b).mapv(|v| v * gs));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, self.value(*a).mapv(|v| v * gs));
                    }
                }
                Op::ScaleBy { x, s } => {
                    let sv = self.scalar(*s);
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g.mapv(|v| v * sv));
                    }
                    if self.needs(*s) {
                        let mut acc = T::zero();
                        for (gv, xv) in g.iter().zip(self.value(*x).iter()) {
                            acc = acc + *gv * *xv;
                        }
                        accumulate(&mut grads, *s, scalar_tensor(acc));
                    }
                }
                Op::MinMaxNorm {
                    x,
                    lo,
                    hi,
                    argmin,
                    argmax,
                    constant,
                } => {
                    if *constant {
                        continue;
                    }
                    let xv = self.value(*x);
                    let xs = xv.as_slice().expect("contiguous");
                    let gs = g.as_slice().expect("contiguous");
                    let range = *hi - *lo;
                    let range2 = range * range;
                    let mut sum_g_x_hi = T::zero(); // sum g_i * (x_i - hi)
                    let mut sum_g_x_lo = T::zero(); // sum g_i * (x_i - lo)
                    for (gv, v) in gs.iter().zip(xs) {
                        sum_g_x_hi = sum_g_x_hi + *gv * (*v - *hi);
                        sum_g_x_lo = sum_g_x_lo + *gv * (*v - *lo);
                    }
                    let mut dx: Vec<T> = gs.iter().map(|gv| *gv / range).collect();
                    dx[*argmin] = dx[*argmin] + sum_g_x_hi / range2;
                    dx[*argmax] = dx[*argmax] - sum_g_x_lo / range2;
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_shape_vec(xv.raw_dim(), dx).unwrap(),
                    );
                }
                Op::Reshape { x } => {
                    let dx = g
                        .into_shape_with_order(self.value(*x).raw_dim())
                        .expect("reshape grad");
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients by node id, as produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

pub fn scalar_tensor<T: Scalar>(v: T) -> Tensor<T> {
    Tensor::from_elem(IxDyn(&[]), v)
}

#[cfg(test)]
mod tests;
