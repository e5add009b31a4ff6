//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse. Only nodes downstream of a leaf created with
//! `requires_grad = true` receive gradients, so frozen network weights cost
//! nothing on the backward pass.
//!
//! Image tensors are NCHW. Convolutions are stride 1 with symmetric zero
//! padding and square kernels.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, S),
    Relu(Var),
    Silu(Var),
    Clamp(Var, S, S),
    RoundSte(Var),
    Sum(Var),
    SumSquares(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    AvgPool { x: Var, factor: usize },
    Upsample { x: Var, factor: usize },
    Concat(Var, Var),
    AddChannel { x: Var, e: Var },
    Reshape(Var),
    CrossEntropy { logits: Var, probs: Vec<S>, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims4(t: &Tensor<impl Scalar>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidArgument(format!("expected NCHW tensor, got {:?}", t.shape()))),
    }
}

fn dims2(t: &Tensor<impl Scalar>) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, d] => Ok([n, d]),
        _ => Err(Error::InvalidArgument(format!("expected 2-d tensor, got {:?}", t.shape()))),
    }
}

/// Unfold one CHW image into a `(c*k*k) x (ho*wo)` column matrix.
fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [S]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox + kj) as isize - pad as isize;
                        *out = if ix < 0 || ix >= w as isize { S::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a CHW image.
fn col2im<S: Scalar>(col: &[S], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [S]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn silu<S: Scalar>(v: S) -> S {
    v / (S::one() + (-v).exp())
}

fn silu_grad<S: Scalar>(v: S) -> S {
    let s = S::one() / (S::one() + (-v).exp());
    s * (S::one() + v * (S::one() - s))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: S, shift: S) -> Var {
        let out = self.value(a).map(|v| v * scale + shift);
        let ng = self.needs(a);
        self.push(out, Op::Affine(a, scale), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(S::zero()));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        let ng = self.needs(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let out = self.value(a).map(|v| v.max(lo).min(hi));
        let ng = self.needs(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// Round half away from zero; the backward pass treats it as identity.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.round());
        let ng = self.needs(a);
        self.push(out, Op::RoundSte(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.dot(t));
        let ng = self.needs(a);
        self.push(out, Op::SumSquares(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// 2-d convolution: `x` is `[n, cin, h, w]`, `w` is `[cout, cin, k, k]`, `b` is `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = dims4(self.value(x))?;
        let [cout, wcin, k, k2] = dims4(self.value(w))?;
        if wcin != cin || k != k2 || k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::Shape { expected: vec![cout, cin, k, k], got: self.value(w).shape().to_vec() });
        }
        self.value(b).check_shape(&[cout])?;
        let ho = h + 2 * pad + 1 - k;
        let wo = wd + 2 * pad + 1 - k;
        let rows = cin * k * k;
        let mut out = vec![S::zero(); n * cout * ho * wo];
        let mut col = vec![S::zero(); rows * ho * wo];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        for i in 0..n {
            im2col(&xs[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, k, pad, &mut col);
            let dst = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
            for (co, plane) in dst.chunks_mut(ho * wo).enumerate() {
                plane.fill(bs[co]);
            }
            S::gemm(
                cout,
                rows,
                ho * wo,
                S::one(),
                ws,
                (rows as isize, 1),
                &col,
                ((ho * wo) as isize, 1),
                S::one(),
                dst,
                ((ho * wo) as isize, 1),
            );
        }
        let out = Tensor::new(&[n, cout, ho, wo], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, ng))
    }

    /// Dense layer: `x` is `[n, in]`, `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, din] = dims2(self.value(x))?;
        let [dout, win] = dims2(self.value(w))?;
        if win != din {
            return Err(Error::Shape { expected: vec![dout, din], got: vec![dout, win] });
        }
        self.value(b).check_shape(&[dout])?;
        let bs = self.value(b).data();
        let mut out: Vec<S> = (0..n * dout).map(|i| bs[i % dout]).collect();
        S::gemm(
            n,
            din,
            dout,
            S::one(),
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            S::one(),
            &mut out,
            (dout as isize, 1),
        );
        let out = Tensor::new(&[n, dout], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Mean over non-overlapping `factor x factor` spatial blocks.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::InvalidArgument(format!("pool factor {factor} does not divide {h}x{w}")));
        }
        let (ho, wo) = (h / factor, w / factor);
        let inv = S::one() / S::of((factor * factor) as f64);
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / factor) * wo + xx / factor] += src[y * w + xx];
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::AvgPool { x, factor }, ng))
    }

    /// Nearest-neighbour upsampling.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        let (ho, wo) = (h * factor, w * factor);
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Upsample { x, factor }, ng))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = dims4(self.value(a))?;
        let [nb, cb, hb, wb] = dims4(self.value(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape { expected: vec![n, cb, h, w], got: vec![nb, cb, hb, wb] });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * h * w..(i + 1) * ca * h * w]);
            out.extend_from_slice(&bv[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), ng))
    }

    /// Broadcast-add a per-sample channel vector `e` (`[n, c]`) onto `x` (`[n, c, h, w]`).
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x))?;
        self.value(e).check_shape(&[n, c])?;
        let ev = self.value(e).data();
        let mut out = self.value(x).clone();
        for (p, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            for v in plane {
                *v += ev[p];
            }
        }
        let ng = self.needs(x) || self.needs(e);
        Ok(self.push(out, Op::AddChannel { x, e }, ng))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = dims2(self.value(logits))?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::InvalidArgument("labels do not match logits".into()));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let z: S = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[i]];
        }
        let out = Tensor::scalar(loss / S::of(n as f64));
        let ng = self.needs(logits);
        Ok(self.push(out, Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, ng))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!("backward from non-scalar {:?}", lv.shape())));
        }
        self.backward_with(loss, Tensor::ones(lv.shape()))
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        self.value(out).same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // keep the gradient of interior nodes available to callers
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Affine(a, scale) => {
                let s = *scale;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > S::zero() { gv } else { S::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv * silu_grad(x));
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g.zip_map(self.value(*a), |gv, x| if x > lo && x < hi { gv } else { S::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::RoundSte(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::SumSquares(a) => {
                let two_g = g.data()[0] + g.data()[0];
                self.accumulate(grads, *a, self.value(*a).map(|v| v * two_g));
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.value(*a).shape()).expect("reshape grad");
                self.accumulate(grads, *a, d);
            }
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(*x, *w, *b, *pad, g, grads),
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, g, grads),
            Op::AvgPool { x, factor } => {
                let f = *factor;
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h / f, w / f);
                let inv = S::one() / S::of((f * f) as f64);
                let mut d = Tensor::zeros(&shape);
                for (p, dst) in d.data_mut().chunks_mut(h * w).enumerate() {
                    let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y / f) * wo + xx / f] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Upsample { x, factor } => {
                let f = *factor;
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h * f, w * f);
                let mut d = Tensor::zeros(&shape);
                for (p, dst) in d.data_mut().chunks_mut(h * w).enumerate() {
                    let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    for y in 0..ho {
                        for xx in 0..wo {
                            dst[(y / f) * w + xx / f] += src[y * wo + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat(a, b) => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let (n, hw) = (sa[0], sa[2] * sa[3]);
                let (la, lb) = (sa[1] * hw, sb[1] * hw);
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for chunk in g.data().chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, Tensor::new(&sa, da).expect("concat grad"));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, Tensor::new(&sb, db).expect("concat grad"));
                }
            }
            Op::AddChannel { x, e } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*e) {
                    let es = self.value(*e).shape().to_vec();
                    let hw = g.len() / (es[0] * es[1]);
                    let d: Vec<S> = g.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
                    self.accumulate(grads, *e, Tensor::new(&es, d).expect("channel grad"));
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let k = probs.len() / labels.len();
                let scale = g.data()[0] / S::of(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= S::one();
                }
                for v in d.iter_mut() {
                    *v *= scale;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(&shape, d).expect("ce grad"));
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Var, pad: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let xs = self.value(x);
        let ws = self.value(w);
        let [n, cin, h, wd] = dims4(xs).expect("conv input");
        let [cout, _, k, _] = dims4(ws).expect("conv weight");
        let ho = h + 2 * pad + 1 - k;
        let wo = wd + 2 * pad + 1 - k;
        let rows = cin * k * k;
        let hw = ho * wo;
        let (need_x, need_w) = (self.needs(x), self.needs(w));

        if self.needs(b) {
            let mut db = vec![S::zero(); cout];
            for (p, plane) in g.data().chunks(hw).enumerate() {
                db[p % cout] += plane.iter().copied().sum::<S>();
            }
            self.accumulate(grads, b, Tensor::new(&[cout], db).expect("bias grad"));
        }
        if !need_x && !need_w {
            return;
        }
        let mut col = vec![S::zero(); rows * hw];
        let mut dw = vec![S::zero(); cout * rows];
        let mut dx = if need_x { vec![S::zero(); n * cin * h * wd] } else { Vec::new() };
        for i in 0..n {
            let gi = &g.data()[i * cout * hw..(i + 1) * cout * hw];
            if need_w {
                im2col(&xs.data()[i * cin * h * wd..(i + 1) * cin * h * wd], cin, h, wd, k, pad, &mut col);
                // dW += dY (cout x hw) * col^T (hw x rows)
                S::gemm(
                    cout,
                    hw,
                    rows,
                    S::one(),
                    gi,
                    (hw as isize, 1),
                    &col,
                    (1, hw as isize),
                    S::one(),
                    &mut dw,
                    (rows as isize, 1),
                );
            }
            if need_x {
                // dcol = W^T (rows x cout) * dY (cout x hw)
                S::gemm(
                    rows,
                    cout,
                    hw,
                    S::one(),
                    ws.data(),
                    (1, rows as isize),
                    gi,
                    (hw as isize, 1),
                    S::zero(),
                    &mut col,
                    (hw as isize, 1),
                );
                col2im(&col, cin, h, wd, k, pad, &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd]);
            }
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(ws.shape(), dw).expect("weight grad"));
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(xs.shape(), dx).expect("input grad"));
        }
    }

    fn linear_backward(&self, x: Var, w: Var, b: Var, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let [n, din] = dims2(self.value(x)).expect("linear input");
        let dout = self.value(w).shape()[0];
        if self.needs(b) {
            let mut db = vec![S::zero(); dout];
            for row in g.data().chunks(dout) {
                for (a, &v) in db.iter_mut().zip(row) {
                    *a += v;
                }
            }
            self.accumulate(grads, b, Tensor::new(&[dout], db).expect("bias grad"));
        }
        if self.needs(w) {
            let mut dw = vec![S::zero(); dout * din];
            // dW = dY^T (dout x n) * X (n x din)
            S::gemm(
                dout,
                n,
                din,
                S::one(),
                g.data(),
                (1, dout as isize),
                self.value(x).data(),
                (din as isize, 1),
                S::zero(),
                &mut dw,
                (din as isize, 1),
            );
            self.accumulate(grads, w, Tensor::new(&[dout, din], dw).expect("weight grad"));
        }
        if self.needs(x) {
            let mut dx = vec![S::zero(); n * din];
            S::gemm(
                n,
                dout,
                din,
                S::one(),
                g.data(),
                (dout as isize, 1),
                self.value(w).data(),
                (din as isize, 1),
                S::zero(),
                &mut dx,
                (din as isize, 1),
            );
            self.accumulate(grads, x, Tensor::new(&[n, din], dx).expect("input grad"));
        }
    }
}
