//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use super::tensor::{cst, gemm, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Upsample2(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        groups: usize,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Silu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    requires_grad: bool,
    /// Op-specific forward state needed by backward.
    saved: Vec<T>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(shape_err("leaf", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn constant_f32(&mut self, shape: &[usize], data: &[f32]) -> Result<Var> {
        self.leaf(shape, data.iter().map(|&v| T::from_f32(v)).collect(), false)
    }

    /// Loads a parameter; differentiable iff `t.requires_grad`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let data = t.data.iter().map(|&v| T::from_f32(v)).collect();
        self.push(t.shape.clone(), data, Op::Leaf, t.requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        node: Op,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, node, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, node: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = cst::<T>(s);
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let k = cst::<T>(s);
        self.unary(a, |x| x * k, Op::MulScalar(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (T::one() + (-x).exp()), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), Op::Cos(a))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let inp = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[1] != inp || inp == 0 {
            return Err(shape_err("linear", &sx, &sw));
        }
        let out_f = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(shape_err("linear bias", self.shape(b), &[out_f]));
            }
        }
        let rows = self.value(x).len() / inp;
        let mut out = vec![T::zero(); rows * out_f];
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                out[r * out_f..(r + 1) * out_f].copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            inp,
            out_f,
            self.value(x),
            false,
            self.value(w),
            true,
            &mut out,
            b.is_some(),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_f;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, out, Op::Linear { x, w, b }, rg))
    }

    /// 3×3 convolution, zero padding 1, stride 1 or 2. `x: [Cin, H, W]`,
    /// `w: [Cout, Cin, 3, 3]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != 3 || sw[3] != 3 {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!("conv2d stride {stride}")));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geo = ConvGeom::new(cin, h, wd, stride);
        let col = geo.im2col(self.value(x));
        let hw = geo.out_len();
        let mut out = vec![T::zero(); cout * hw];
        if let Some(b) = b {
            for (o, &bv) in self.value(b).iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        gemm(
            cout,
            cin * 9,
            hw,
            self.value(w),
            false,
            &col,
            false,
            &mut out,
            b.is_some(),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![cout, geo.ho, geo.wo],
            out,
            Op::Conv2d { x, w, b, stride },
            rg,
        ))
    }

    /// Nearest-neighbour ×2 upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2", &s, &[0, 0, 0]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let v = self.value(x);
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = v[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample2(x), rg))
    }

    /// Normalizes each channel group of `[C, ...]` to zero mean, unit variance.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || groups == 0 || s[0] % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "group_norm: {groups} groups for shape {s:?}"
            )));
        }
        let v = self.value(x);
        let glen = v.len() / groups;
        let mut out = vec![T::zero(); v.len()];
        let mut rstds = Vec::with_capacity(groups);
        let n = cst::<T>(glen as f64);
        for g in 0..groups {
            let seg = &v[g * glen..(g + 1) * glen];
            let mean = seg.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = seg
                .iter()
                .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
                / n;
            let rstd = T::one() / (var + cst(GROUP_NORM_EPS)).sqrt();
            for (o, &xv) in out[g * glen..(g + 1) * glen].iter_mut().zip(seg) {
                *o = (xv - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let rg = self.rg(x);
        let var = self.push(s, out, Op::GroupNorm { x, groups }, rg);
        self.nodes[var.0].saved = rstds;
        Ok(var)
    }

    /// Per-channel `x·(1 + scale) + shift` for `x: [C, ...]`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = s.first().copied().unwrap_or(0);
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(shape_err("film", &s, self.shape(scale)));
        }
        let inner = numel(&s) / c.max(1);
        let (xv, sc, sh) = (self.value(x), self.value(scale), self.value(shift));
        let mut out = Vec::with_capacity(xv.len());
        for ch in 0..c {
            let k = T::one() + sc[ch];
            out.extend(
                xv[ch * inner..(ch + 1) * inner]
                    .iter()
                    .map(|&v| v * k + sh[ch]),
            );
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(s, out, Op::Film { x, scale, shift }, rg))
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().fold(T::zero(), |a, &b| a + b) / cst(v.len() as f64);
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Mean squared difference, a scalar.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let n = cst::<T>(self.value(a).len() as f64);
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![s], Op::Mse(a, b), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(loss, vec![T::one()])
    }

    /// Reverse sweep seeded with an explicit output cotangent.
    pub fn backward_seeded(&self, out: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.value(out).len() {
            return Err(shape_err("backward seed", self.shape(out), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(&mut grads[v.0], len(v), |g| {
                            g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], len(*a), |g| {
                        g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
                    });
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], len(*b), |g| {
                        g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    add_into(&mut grads[a.0], av.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * bv[i];
                        }
                    });
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], bv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * av[i];
                        }
                    });
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                add_into(&mut grads[a.0], len(*a), |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
                });
            }
            Op::MulScalar(a, s) => {
                let k = cst::<T>(*s);
                add_into(&mut grads[a.0], len(*a), |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * k)
                });
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                add_into(&mut grads[a.0], xv.len(), |g| {
                    for i in 0..g.len() {
                        let s = T::one() / (T::one() + (-xv[i]).exp());
                        g[i] += gy[i] * s * (T::one() + xv[i] * (T::one() - s));
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &node.value;
                add_into(&mut grads[a.0], yv.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * yv[i] * (T::one() - yv[i]);
                    }
                });
            }
            Op::Sin(a) => {
                let xv = self.value(*a);
                add_into(&mut grads[a.0], xv.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * xv[i].cos();
                    }
                });
            }
            Op::Cos(a) => {
                let xv = self.value(*a);
                add_into(&mut grads[a.0], xv.len(), |g| {
                    for i in 0..g.len() {
                        g[i] -= gy[i] * xv[i].sin();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let bv = self.value(*b);
                    add_into(&mut grads[a.0], m * k, |g| {
                        gemm(m, n, k, gy, false, bv, true, g, true)
                    });
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    add_into(&mut grads[b.0], k * n, |g| {
                        gemm(k, m, n, av, true, gy, false, g, true)
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (out_f, inp) = (sw[0], sw[1]);
                let rows = len(*x) / inp;
                if self.rg(*x) {
                    let wv = self.value(*w);
                    add_into(&mut grads[x.0], rows * inp, |g| {
                        gemm(rows, out_f, inp, gy, false, wv, false, g, true)
                    });
                }
                if self.rg(*w) {
                    let xv = self.value(*x);
                    add_into(&mut grads[w.0], out_f * inp, |g| {
                        gemm(out_f, rows, inp, gy, true, xv, false, g, true)
                    });
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    add_into(&mut grads[b.0], out_f, |g| {
                        for r in 0..rows {
                            for o in 0..out_f {
                                g[o] += gy[r * out_f + o];
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let sx = self.shape(*x);
                let cout = self.shape(*w)[0];
                let geo = ConvGeom::new(sx[0], sx[1], sx[2], *stride);
                let hw = geo.out_len();
                let kdim = geo.cin * 9;
                if self.rg(*w) {
                    let col = geo.im2col(self.value(*x));
                    add_into(&mut grads[w.0], cout * kdim, |g| {
                        gemm(cout, hw, kdim, gy, false, &col, true, g, true)
                    });
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    add_into(&mut grads[b.0], cout, |g| {
                        for o in 0..cout {
                            g[o] += gy[o * hw..(o + 1) * hw]
                                .iter()
                                .fold(T::zero(), |a, &v| a + v);
                        }
                    });
                }
                if self.rg(*x) {
                    let mut dcol = vec![T::zero(); kdim * hw];
                    gemm(
                        kdim,
                        cout,
                        hw,
                        self.value(*w),
                        true,
                        gy,
                        false,
                        &mut dcol,
                        false,
                    );
                    add_into(&mut grads[x.0], geo.in_len(), |g| geo.col2im_add(&dcol, g));
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                add_into(&mut grads[x.0], c * h * w, |g| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                g[(ch * h + y / 2) * w + xx / 2] +=
                                    gy[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::GroupNorm { x, groups } => {
                let n = node.value.len();
                let glen = n / groups;
                let xhat = &node.value;
                let rstd = &node.saved;
                let nf = cst::<T>(glen as f64);
                add_into(&mut grads[x.0], n, |g| {
                    for gi in 0..*groups {
                        let r = gi * glen..(gi + 1) * glen;
                        let (mut sg, mut sgx) = (T::zero(), T::zero());
                        for i in r.clone() {
                            sg += gy[i];
                            sgx += gy[i] * xhat[i];
                        }
                        let (mg, mgx) = (sg / nf, sgx / nf);
                        for i in r {
                            g[i] += rstd[gi] * (gy[i] - mg - xhat[i] * mgx);
                        }
                    }
                });
            }
            Op::Film { x, scale, shift } => {
                let c = self.shape(*x)[0];
                let inner = node.value.len() / c.max(1);
                let xv = self.value(*x);
                let sc = self.value(*scale);
                if self.rg(*x) {
                    add_into(&mut grads[x.0], xv.len(), |g| {
                        for ch in 0..c {
                            let k = T::one() + sc[ch];
                            for i in ch * inner..(ch + 1) * inner {
                                g[i] += gy[i] * k;
                            }
                        }
                    });
                }
                if self.rg(*scale) {
                    add_into(&mut grads[scale.0], c, |g| {
                        for ch in 0..c {
                            for i in ch * inner..(ch + 1) * inner {
                                g[ch] += gy[i] * xv[i];
                            }
                        }
                    });
                }
                if self.rg(*shift) {
                    add_into(&mut grads[shift.0], c, |g| {
                        for ch in 0..c {
                            for i in ch * inner..(ch + 1) * inner {
                                g[ch] += gy[i];
                            }
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len(p);
                    if self.rg(p) {
                        add_into(&mut grads[p.0], l, |g| {
                            g.iter_mut()
                                .zip(&gy[off..off + l])
                                .for_each(|(g, &d)| *g += d)
                        });
                    }
                    off += l;
                }
            }
            Op::Mean(x) => {
                let l = len(*x);
                let d = gy[0] / cst(l as f64);
                add_into(&mut grads[x.0], l, |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Sum(x) => {
                let d = gy[0];
                add_into(&mut grads[x.0], len(*x), |g| {
                    g.iter_mut().for_each(|g| *g += d)
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = gy[0] * cst(2.0 / av.len() as f64);
                if self.rg(*a) {
                    add_into(&mut grads[a.0], av.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += k * (av[i] - bv[i]);
                        }
                    });
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], bv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] -= k * (av[i] - bv[i]);
                        }
                    });
                }
            }
        }
    }
}

/// Geometry of a padded 3×3 convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, stride: usize) -> Self {
        Self {
            cin,
            h,
            w,
            stride,
            ho: (h - 1) / stride + 1,
            wo: (w - 1) / stride + 1,
        }
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// Calls `f(row, out_index, in_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let hw = self.out_len();
        for c in 0..self.cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (c * 9 + ky * 3 + kx) * hw;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base_in = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.wo + ox, base_in + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, x: &[T]) -> Vec<T> {
        let mut col = vec![T::zero(); self.cin * 9 * self.out_len()];
        self.for_each_tap(|row, o, i| col[row + o] = x[i]);
        col
    }

    fn col2im_add<T: Element>(&self, col: &[T], g: &mut [T]) {
        self.for_each_tap(|row, o, i| g[i] += col[row + o]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diamond_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&[1], vec![3.0], true).unwrap();
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn mse_self_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&[4], vec![0.5, -1.0, 2.0, 0.0], true).unwrap();
        let l = g.mse_loss(x, x).unwrap();
        assert_eq!(g.item(l), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_conv() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..2 * 5 * 4).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = g.constant(&[2, 5, 4], data.clone()).unwrap();
        let mut w = vec![0.0f32; 2 * 2 * 9];
        w[4] = 1.0; // out 0 <- in 0 center
        w[27 + 4] = 1.0; // out 1 <- in 1 center
        let w = g.constant(&[2, 2, 3, 3], w).unwrap();
        let y = g.conv2d(x, w, None, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 4]);
        assert_eq!(g.value(y), &data[..]);
    }

    #[test]
    fn strided_conv_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[3, 8, 8], vec![1.0; 192]).unwrap();
        let w = g.constant(&[5, 3, 3, 3], vec![0.1; 135]).unwrap();
        let y = g.conv2d(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[5, 4, 4]);
        // interior output sees all 27 taps
        assert!((g.value(y)[5] - 2.7).abs() < 1e-5);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
        let c = g.constant(&[6], vec![0.0; 6]).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn group_norm_moments() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..4 * 6 * 6)
            .map(|i| ((i * 7919) % 97) as f32 * 0.3 - 5.0)
            .collect();
        let x = g.constant(&[4, 6, 6], data).unwrap();
        let y = g.group_norm(x, 2).unwrap();
        for grp in g.value(y).chunks(72) {
            let m: f32 = grp.iter().sum::<f32>() / 72.0;
            let v: f32 = grp.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / 72.0;
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(g.backward(x).is_err());
    }
}
