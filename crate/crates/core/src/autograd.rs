//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations execute eagerly and append a node to the [`Graph`]. Calling
//! [`Graph::backward`] walks the tape in reverse. Nodes created with
//! [`Graph::constant`] (or [`Graph::detach`]) never receive gradients, which is
//! how stop-gradient is expressed.
//!
//! Shape errors inside the graph are programming errors and panic; callers
//! validate user-facing inputs before building a graph.

use crate::kernels::{self, ConvDims, ConvGeom, Exec, Layout};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Silu,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Square,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Unary::Silu => x / (1.0 + (-x).exp()),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Tanh => x.tanh(),
            Unary::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Square => 2.0 * x,
        }
    }
}

/// How the right operand of a binary op maps onto the output.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// rhs is a trailing block repeated over the leading axes.
    Cycle(usize),
    /// Explicit rhs index per output element.
    Map(Vec<usize>),
}

impl Bcast {
    fn new(lhs: &[usize], rhs: &[usize]) -> Bcast {
        if lhs == rhs {
            return Bcast::Same;
        }
        assert!(
            rhs.len() <= lhs.len(),
            "cannot broadcast {rhs:?} onto {lhs:?}"
        );
        let lead = rhs.iter().take_while(|&&d| d == 1).count();
        let core = &rhs[lead..];
        if lhs.ends_with(core) {
            return Bcast::Cycle(numel(core).max(1));
        }
        let offset = lhs.len() - rhs.len();
        let mut rhs_strides = vec![0usize; lhs.len()];
        let mut stride = 1;
        for (i, &d) in rhs.iter().enumerate().rev() {
            let l = lhs[offset + i];
            assert!(d == l || d == 1, "cannot broadcast {rhs:?} onto {lhs:?}");
            if d != 1 {
                rhs_strides[offset + i] = stride;
            }
            stride *= d;
        }
        let total = numel(lhs);
        let mut map = Vec::with_capacity(total);
        let mut counter = vec![0usize; lhs.len()];
        let mut idx = 0usize;
        for _ in 0..total {
            map.push(idx);
            for ax in (0..lhs.len()).rev() {
                counter[ax] += 1;
                idx += rhs_strides[ax];
                if counter[ax] < lhs[ax] {
                    break;
                }
                idx -= rhs_strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }

    fn reduce(&self, grad: &[f64], rhs_len: usize) -> Vec<f64> {
        if let Bcast::Same = self {
            return grad.to_vec();
        }
        let mut out = vec![0.0; rhs_len];
        for (i, g) in grad.iter().enumerate() {
            out[self.at(i)] += g;
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul {
        a: Var,
        b: Var,
        layout: Layout,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    NormalizeLast(Var, Vec<f64>),
    L2NormalizeLast(Var, Vec<f64>),
    SumAll(Var),
    SumAxis(Var, usize),
    Conv2d(Var, Var, ConvDims),
    MaxPool2d(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Pad(Var, usize, usize),
    IndexSelect(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// (outer, axis length, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    let mut counter = vec![0usize; nd];
    let mut idx = 0usize;
    for _ in 0..total {
        out.push(data[idx]);
        for ax in (0..nd).rev() {
            counter[ax] += 1;
            idx += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            idx -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

fn row_softmax(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
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

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Tensor, Bcast) {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = Bcast::new(av.shape(), bv.shape());
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[bc.at(i)]))
            .collect();
        (Tensor::from_parts(av.shape().to_vec(), data), bc)
    }

    /// Elementwise sum; `b` broadcasts onto `a` (right-aligned, size-1 axes stretch).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (t, bc) = self.binary(a, b, |x, y| x + y);
        let g = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b, bc), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (t, bc) = self.binary(a, b, |x, y| x - y);
        let g = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b, bc), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (t, bc) = self.binary(a, b, |x, y| x * y);
        let g = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b, bc), g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (t, bc) = self.binary(a, b, |x, y| x / y);
        let g = self.needs(a) || self.needs(b);
        self.push(t, Op::Div(a, b, bc), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let g = self.needs(a);
        self.push(t, Op::Scale(a, c), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let g = self.needs(a);
        self.push(t, Op::AddScalar(a), g)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a).map(|x| kind.apply(x));
        let g = self.needs(a);
        self.push(t, Op::Unary(a, kind), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, layout: Layout) -> Var {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let batch = numel(&ash[..ash.len() - 2]);
        let shared_b = bsh.len() == 2;
        let (bk, n) = match layout {
            Layout::NN => (bsh[bsh.len() - 2], bsh[bsh.len() - 1]),
            Layout::NT => (bsh[bsh.len() - 1], bsh[bsh.len() - 2]),
            Layout::TN => unreachable!(),
        };
        assert_eq!(k, bk, "matmul inner dims {ash:?} x {bsh:?}");
        if !shared_b {
            assert_eq!(
                ash[..ash.len() - 2],
                bsh[..bsh.len() - 2],
                "matmul batch dims {ash:?} x {bsh:?}"
            );
        }
        let (flat_batch, flat_m) = if shared_b { (1, batch * m) } else { (batch, m) };
        let data = kernels::matmul(
            self.exec,
            layout,
            self.value(a).data(),
            self.value(b).data(),
            flat_batch,
            flat_m,
            k,
            n,
            shared_b,
        );
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let g = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_parts(shape, data),
            Op::MatMul {
                a,
                b,
                layout,
                batch: flat_batch,
                m: flat_m,
                k,
                n,
                shared_b,
            },
            g,
        )
    }

    /// `a @ b` for `a: (..., m, k)` and `b: (k, n)` or `b: (..., k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, Layout::NN)
    }

    /// `a @ b^T` for `a: (..., m, k)` and `b: (n, k)` or `b: (..., n, k)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, Layout::NT)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(perm.len(), v.ndim(), "permute rank");
        let (data, shape) = permute_data(v.data(), v.shape(), perm);
        let g = self.needs(a);
        self.push(Tensor::from_parts(shape, data), Op::Permute(a, perm.to_vec()), g)
    }

    pub fn transpose_last(&mut self, a: Var) -> Var {
        let nd = self.shape(a).len();
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshape(shape.to_vec())
            .unwrap_or_else(|e| panic!("{e}"));
        let g = self.needs(a);
        self.push(t, Op::Reshape(a), g)
    }

    fn last_dim(&self, a: Var) -> usize {
        *self.shape(a).last().expect("rank >= 1")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = self.last_dim(a);
        let v = self.value(a);
        let mut out = vec![0.0; v.numel()];
        for (x, o) in v.data().chunks(n).zip(out.chunks_mut(n)) {
            row_softmax(x, o);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let g = self.needs(a);
        self.push(t, Op::Softmax(a), g)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let n = self.last_dim(a);
        let v = self.value(a);
        let mut out = vec![0.0; v.numel()];
        for (x, o) in v.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in o.iter_mut().zip(x) {
                *o = v - lse;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let g = self.needs(a);
        self.push(t, Op::LogSoftmax(a), g)
    }

    /// `(x - mean) / sqrt(var + eps)` over the last axis (no affine terms).
    pub fn normalize_last(&mut self, a: Var, eps: f64) -> Var {
        let n = self.last_dim(a);
        let v = self.value(a);
        let mut out = vec![0.0; v.numel()];
        let mut inv = Vec::with_capacity(v.numel() / n.max(1));
        for (x, o) in v.data().chunks(n).zip(out.chunks_mut(n)) {
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, &v) in o.iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
            inv.push(is);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let g = self.needs(a);
        self.push(t, Op::NormalizeLast(a, inv), g)
    }

    /// Rows scaled to unit L2 norm over the last axis.
    pub fn l2_normalize_last(&mut self, a: Var) -> Var {
        let n = self.last_dim(a);
        let v = self.value(a);
        let mut out = vec![0.0; v.numel()];
        let mut norms = Vec::with_capacity(v.numel() / n.max(1));
        for (x, o) in v.data().chunks(n).zip(out.chunks_mut(n)) {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (o, &v) in o.iter_mut().zip(x) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let g = self.needs(a);
        self.push(t, Op::L2NormalizeLast(a, norms), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let g = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let g = self.needs(a);
        self.push(Tensor::from_parts(shape, out), Op::SumAxis(a, axis), g)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let len = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / len)
    }

    /// 2-D convolution: `x: (B, C, H, W)`, `w: (O, C/groups, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OIHW, got {ws:?}");
        assert!(
            xs[1] % geom.groups == 0 && ws[0] % geom.groups == 0 && ws[1] * geom.groups == xs[1],
            "conv2d channels {xs:?} vs weight {ws:?} with {} groups",
            geom.groups
        );
        let oh = geom.out_size(xs[2], ws[2]).expect("conv2d kernel larger than input");
        let ow = geom.out_size(xs[3], ws[3]).expect("conv2d kernel larger than input");
        let dims = ConvDims {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            out_ch: ws[0],
            kh: ws[2],
            kw: ws[3],
            oh,
            ow,
            geom,
        };
        let data = kernels::conv2d_forward(self.exec, &dims, self.value(x).data(), self.value(w).data());
        let g = self.needs(x) || self.needs(w);
        self.push(
            Tensor::from_parts(vec![xs[0], ws[0], oh, ow], data),
            Op::Conv2d(x, w, dims),
            g,
        )
    }

    /// Max pooling over NCHW input; padded positions never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Var {
        let v = self.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 4, "max_pool2d needs NCHW");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut arg = Vec::with_capacity(b * c * oh * ow);
        let d = v.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            let ix = (xx * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if d[i] > best || best_i == usize::MAX {
                                best = d[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
        let g = self.needs(x);
        self.push(
            Tensor::from_parts(vec![b, c, oh, ow], out),
            Op::MaxPool2d(x, arg),
            g,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len()
                    && s[..axis] == first[..axis]
                    && s[axis + 1..] == first[axis + 1..],
                "concat shapes {:?} vs {:?}",
                s,
                first
            );
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis), g)
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let (outer, full, inner) = split_axis(v.shape(), axis);
        assert!(start + len <= full, "narrow {start}+{len} > {full}");
        let d = v.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let g = self.needs(a);
        self.push(Tensor::from_parts(shape, out), Op::Narrow(a, axis, start), g)
    }

    /// Zero-pad `before`/`after` entries along `axis`.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Var {
        if before == 0 && after == 0 {
            return a;
        }
        let v = self.value(a);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let full = before + len + after;
        let d = v.data();
        let mut out = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = (o * full + before) * inner;
            out[dst..dst + len * inner].copy_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = full;
        let g = self.needs(a);
        self.push(Tensor::from_parts(shape, out), Op::Pad(a, axis, before), g)
    }

    /// Gather rows along axis 0.
    pub fn index_select(&mut self, table: Var, indices: &[usize]) -> Var {
        let v = self.value(table);
        let rows = v.shape()[0];
        let inner: usize = v.shape()[1..].iter().product();
        let d = v.data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            assert!(i < rows, "index {i} out of {rows}");
            out.extend_from_slice(&d[i * inner..(i + 1) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let g = self.needs(table);
        self.push(
            Tensor::from_parts(shape, out),
            Op::IndexSelect(table, indices.to_vec()),
            g,
        )
    }

    /// Gradients of the scalar `loss` with respect to every differentiable node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Grads {
                grads,
                shapes: vec![],
            };
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Grads { grads, shapes }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, bc.reduce(g, self.value(*b).numel()));
                }
            }
            Op::Sub(a, b, bc) => {
                if self.needs(*a) {
                    self.acc(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    let r = bc.reduce(g, self.value(*b).numel());
                    self.acc(grads, *b, r.into_iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let ga = g.iter().enumerate().map(|(i, gi)| gi * bv[bc.at(i)]).collect();
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                    self.acc(grads, *b, bc.reduce(&prod, bv.len()));
                }
            }
            Op::Div(a, b, bc) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let ga = g.iter().enumerate().map(|(i, gi)| gi / bv[bc.at(i)]).collect();
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let part: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let bi = bv[bc.at(i)];
                            -gi * av[i] / (bi * bi)
                        })
                        .collect();
                    self.acc(grads, *b, bc.reduce(&part, bv.len()));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => self.acc(grads, *a, g.to_vec()),
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::MatMul {
                a,
                b,
                layout,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (batch, m, k, n, shared) = (*batch, *m, *k, *n, *shared_b);
                match layout {
                    Layout::NN => {
                        if self.needs(*a) {
                            // dA = dC B^T
                            let ga = kernels::matmul(self.exec, Layout::NT, g, bv, batch, m, n, k, shared);
                            self.acc(grads, *a, ga);
                        }
                        if self.needs(*b) {
                            // dB = A^T dC
                            let gb = kernels::matmul(self.exec, Layout::TN, av, g, batch, k, m, n, false);
                            self.acc(grads, *b, gb);
                        }
                    }
                    Layout::NT => {
                        if self.needs(*a) {
                            // dA = dC B
                            let ga = kernels::matmul(self.exec, Layout::NN, g, bv, batch, m, n, k, shared);
                            self.acc(grads, *a, ga);
                        }
                        if self.needs(*b) {
                            // dB = dC^T A
                            let gb = kernels::matmul(self.exec, Layout::TN, g, av, batch, n, m, k, false);
                            self.acc(grads, *b, gb);
                        }
                    }
                    Layout::TN => unreachable!(),
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (ga, _) = permute_data(g, node.value.shape(), &inv);
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let n = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gi - yi.exp() * total;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::NormalizeLast(a, inv) => {
                let n = *node.value.shape().last().unwrap();
                let nf = n as f64;
                let mut ga = vec![0.0; g.len()];
                for (r, ((gr, yr), out)) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = inv[r] * (gi - mg - yi * mgy);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::L2NormalizeLast(a, norms) => {
                let n = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for (r, ((gr, yr), out)) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (gi - yi * dot) / norms[r];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Conv2d(x, w, dims) => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.exec,
                    dims,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
            }
            Op::MaxPool2d(x, arg) => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gi, &i) in g.iter().zip(arg) {
                    gx[i] += gi;
                }
                self.acc(grads, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.acc(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let (outer, full, inner) = split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                let mut ga = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *a, ga);
            }
            Op::Pad(a, axis, before) => {
                let (outer, full, inner) = split_axis(node.value.shape(), *axis);
                let len = self.shape(*a)[*axis];
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * full + before) * inner;
                    ga.extend_from_slice(&g[base..base + len * inner]);
                }
                self.acc(grads, *a, ga);
            }
            Op::IndexSelect(table, indices) => {
                let tv = self.value(*table);
                let inner: usize = tv.shape()[1..].iter().product();
                let mut gt = vec![0.0; tv.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, s) in gt[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[r * inner..(r + 1) * inner])
                    {
                        *d += s;
                    }
                }
                self.acc(grads, *table, gt);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient for `v`, or `None` when `v` does not influence the loss
    /// through differentiable paths (constants, detached values).
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn has(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }
}
