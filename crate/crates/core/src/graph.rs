//! Reverse-mode differentiation over a closed set of tensor operations.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and the handles of its inputs. [`Graph::backward`] walks the tape in
//! reverse from a scalar root and accumulates gradients into the leaves that
//! were created with [`Graph::param`]. Gradients accumulate across repeated
//! `backward` calls until [`Graph::zero_grads`] is called.
//!
//! Broadcasting is limited to a single-element tensor against a full tensor
//! ([`Graph::gate_mul`]); every other binary op requires identical shapes.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate gradient-rule corruption, used to verify that gradient checking
/// catches a broken rule.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFault {
    /// Doubles the gradient flowing into the scalar side of [`Graph::gate_mul`].
    GateScalar,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    GateMul { gate: Var, x: Var },
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    L2Norm { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool, dims: (usize, usize, usize, usize) },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    SwapLast2(Var),
    Squash(Var),
    CapsPredict { u: Var, w: Var },
    CapsWeightedSum { c: Var, uhat: Var },
    CapsAgreement { uhat: Var, v: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_leaf_param: bool,
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    retain_all: bool,
    fault: Option<GradFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: shapes {a:?} and {b:?} do not match"))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            retain_all: false,
            fault: None,
        }
    }

    /// Keep gradients of intermediate nodes too, not just of parameters.
    pub fn with_retained_grads(mut self) -> Self {
        self.retain_all = true;
        self
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: GradFault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_leaf_param: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            is_leaf_param: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            is_leaf_param: true,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of the root with respect to `v`, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn binary_check(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddConst(x), &[x])
    }

    /// `gate · x` where `gate` holds a single element.
    pub fn gate_mul(&mut self, gate: Var, x: Var) -> Result<Var> {
        let g = self.value(gate);
        if g.len() != 1 {
            return Err(Error::Shape(format!(
                "gate_mul: gate must be a single element, got {:?}",
                g.shape()
            )));
        }
        let s = g.data()[0];
        let v = self.value(x).map(|e| s * e);
        Ok(self.push(v, Op::GateMul { gate, x }, &[gate, x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| {
            if e >= T::zero() {
                T::one() / (T::one() + (-e).exp())
            } else {
                let z = e.exp();
                z / (T::one() + z)
            }
        });
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x), &[x])
    }

    /// Elementwise square root. Negative inputs are rejected.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&e| e < T::zero()) {
            return Err(Error::InvalidArgument("sqrt of negative value".into()));
        }
        let v = self.value(x).map(|e| e.sqrt());
        Ok(self.push(v, Op::Sqrt(x), &[x]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::InvalidArgument(format!(
                "sum_axis: axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = t.axis_split(axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[base + i];
                }
            }
        }
        let v = Tensor::from_parts(reduced_shape(t.shape(), axis), out);
        Ok(self.push(v, Op::SumAxis { x, axis }, &[x]))
    }

    /// Euclidean norm over one axis, which is removed from the shape. The
    /// norm of a zero slice is 0 and its gradient is defined as 0.
    pub fn l2norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::InvalidArgument(format!(
                "l2norm: axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = t.axis_split(axis);
        let d = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for k in 0..n {
                    let e = d[(o * n + k) * inner + i];
                    acc = acc + e * e;
                }
                out[o * inner + i] = acc.sqrt();
            }
        }
        let v = Tensor::from_parts(reduced_shape(t.shape(), axis), out);
        Ok(self.push(v, Op::L2Norm { x, axis }, &[x]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::InvalidArgument(format!(
                "softmax: axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let v = softmax_forward(t, axis);
        Ok(self.push(v, Op::Softmax { x, axis }, &[x]))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * p];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let v = Tensor::from_parts(vec![m, p], out);
        Ok(self.push(
            v,
            Op::BatchMatMul { a, b, ta: false, tb: false, dims: (1, m, k, p) },
            &[a, b],
        ))
    }

    /// Batched product `op(a[n]) · op(b[n])` of rank-3 tensors, where `op`
    /// transposes the last two axes when the matching flag is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape(format!(
            "batch_matmul: cannot multiply {sa:?}{} by {sb:?}{}",
            if ta { "ᵀ" } else { "" },
            if tb { "ᵀ" } else { "" }
        ));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, p) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(bad());
        }
        let n = sa[0];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * m * p];
        for i in 0..n {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * p..(i + 1) * k * p];
            let oi = &mut out[i * m * p..(i + 1) * m * p];
            match (ta, tb) {
                (false, false) => kernels::matmul_acc(ai, bi, oi, m, k, p),
                (true, false) => kernels::matmul_tn_acc(ai, bi, oi, m, k, p),
                (false, true) => kernels::matmul_nt_acc(ai, bi, oi, m, k, p),
                (true, true) => {
                    let at = kernels::transpose(ai, k, m);
                    kernels::matmul_nt_acc(&at, bi, oi, m, k, p)
                }
            }
        }
        let v = Tensor::from_parts(vec![n, m, p], out);
        Ok(self.push(
            v,
            Op::BatchMatMul { a, b, ta, tb, dims: (n, m, k, p) },
            &[a, b],
        ))
    }

    /// 2-D cross-correlation. `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`,
    /// optional `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::Shape(format!(
                "conv2d: input {sx:?} incompatible with weight {sw:?}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} does not match {} output channels",
                    self.shape(b),
                    sw[0]
                )));
            }
        }
        let geom = ConvGeometry::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad)?;
        let (batch, cout) = (sx[0], sw[0]);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let plane = sx[1] * sx[2] * sx[3];
        let mut out = vec![T::zero(); batch * cout * ncols];
        let mut cols = vec![T::zero(); rows * ncols];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data());
            for n in 0..batch {
                kernels::im2col(&xd[n * plane..(n + 1) * plane], &geom, &mut cols);
                let on = &mut out[n * cout * ncols..(n + 1) * cout * ncols];
                if let Some(bd) = bd {
                    for (c, &bias) in bd.iter().enumerate() {
                        on[c * ncols..(c + 1) * ncols].fill(bias);
                    }
                }
                kernels::matmul_acc(wd, &cols, on, cout, rows, ncols);
            }
        }
        let v = Tensor::from_parts(vec![batch, cout, geom.out_h, geom.out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Fully connected layer `x · w + b` with `x: [B, D]`, `w: [D, D']`,
    /// optional `b: [D']` added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::Shape(format!(
                "linear: input {sx:?} incompatible with weight {sw:?}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} does not match output width {}",
                    self.shape(b),
                    sw[1]
                )));
            }
        }
        let (rows, din, dout) = (sx[0], sx[1], sw[1]);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, din, dout);
        let v = Tensor::from_parts(vec![rows, dout], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Linear { x, w, b }, &inputs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::Shape(format!(
                "swap_last2 needs rank 3, got {:?}",
                t.shape()
            )));
        }
        let (n, r, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = Vec::with_capacity(t.len());
        for i in 0..n {
            out.extend(kernels::transpose(&t.data()[i * r * c..(i + 1) * r * c], r, c));
        }
        let v = Tensor::from_parts(vec![n, c, r], out);
        Ok(self.push(v, Op::SwapLast2(x), &[x]))
    }

    /// Capsule squashing over the last axis:
    /// `v = (‖s‖² / (1 + ‖s‖²)) · s / ‖s‖`, with `v = 0` at `s = 0`.
    pub fn squash(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().expect("rank >= 1");
        let mut out = t.data().to_vec();
        for chunk in out.chunks_mut(d) {
            let n2: T = chunk.iter().map(|&e| e * e).sum();
            let n = n2.sqrt();
            let f = if n > T::zero() { n / (T::one() + n2) } else { T::zero() };
            for e in chunk.iter_mut() {
                *e = *e * f;
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(v, Op::Squash(x), &[x])
    }

    /// Capsule predictions `û[b,i,j] = W[i,j] · u[b,i]` for
    /// `u: [B, I, Din]` and `w: [I, J, Dout, Din]`, giving `[B, I, J, Dout]`.
    pub fn caps_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (su, sw) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        if su.len() != 3 || sw.len() != 4 || su[1] != sw[0] || su[2] != sw[3] {
            return Err(Error::Shape(format!(
                "caps_predict: poses {su:?} incompatible with transform {sw:?}"
            )));
        }
        let (batch, ni, din) = (su[0], su[1], su[2]);
        let (nj, dout) = (sw[1], sw[2]);
        let (ud, wd) = (self.value(u).data(), self.value(w).data());
        let mut out = vec![T::zero(); batch * ni * nj * dout];
        for b in 0..batch {
            for i in 0..ni {
                let ui = &ud[(b * ni + i) * din..(b * ni + i + 1) * din];
                let wi = &wd[i * nj * dout * din..(i + 1) * nj * dout * din];
                let oi = &mut out[(b * ni + i) * nj * dout..(b * ni + i + 1) * nj * dout];
                kernels::matmul_nt_acc(ui, wi, oi, 1, din, nj * dout);
            }
        }
        let v = Tensor::from_parts(vec![batch, ni, nj, dout], out);
        Ok(self.push(v, Op::CapsPredict { u, w }, &[u, w]))
    }

    /// `s[b,j] = Σ_i c[b,i,j] · û[b,i,j]` for `c: [B, I, J]`, `û: [B, I, J, D]`.
    pub fn caps_weighted_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let (sc, su) = (self.shape(c).to_vec(), self.shape(uhat).to_vec());
        if sc.len() != 3 || su.len() != 4 || sc[..] != su[..3] {
            return Err(Error::Shape(format!(
                "caps_weighted_sum: couplings {sc:?} incompatible with predictions {su:?}"
            )));
        }
        let (batch, ni, nj, d) = (su[0], su[1], su[2], su[3]);
        let (cd, ud) = (self.value(c).data(), self.value(uhat).data());
        let mut out = vec![T::zero(); batch * nj * d];
        for b in 0..batch {
            for i in 0..ni {
                for j in 0..nj {
                    let cij = cd[(b * ni + i) * nj + j];
                    let src = &ud[((b * ni + i) * nj + j) * d..((b * ni + i) * nj + j + 1) * d];
                    let dst = &mut out[(b * nj + j) * d..(b * nj + j + 1) * d];
                    for (o, &e) in dst.iter_mut().zip(src) {
                        *o = *o + cij * e;
                    }
                }
            }
        }
        let v = Tensor::from_parts(vec![batch, nj, d], out);
        Ok(self.push(v, Op::CapsWeightedSum { c, uhat }, &[c, uhat]))
    }

    /// Agreement `a[b,i,j] = û[b,i,j] · v[b,j]` for `û: [B, I, J, D]`,
    /// `v: [B, J, D]`.
    pub fn caps_agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(uhat).to_vec(), self.shape(v).to_vec());
        if su.len() != 4 || sv.len() != 3 || su[0] != sv[0] || su[2] != sv[1] || su[3] != sv[2] {
            return Err(Error::Shape(format!(
                "caps_agreement: predictions {su:?} incompatible with outputs {sv:?}"
            )));
        }
        let (batch, ni, nj, d) = (su[0], su[1], su[2], su[3]);
        let (ud, vd) = (self.value(uhat).data(), self.value(v).data());
        let mut out = vec![T::zero(); batch * ni * nj];
        for b in 0..batch {
            for i in 0..ni {
                for j in 0..nj {
                    let src = &ud[((b * ni + i) * nj + j) * d..((b * ni + i) * nj + j + 1) * d];
                    let vj = &vd[(b * nj + j) * d..(b * nj + j + 1) * d];
                    out[(b * ni + i) * nj + j] = src.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        let val = Tensor::from_parts(vec![batch, ni, nj], out);
        Ok(self.push(val, Op::CapsAgreement { uhat, v }, &[uhat, v]))
    }

    /// Reverse pass from a single-element `root`. Parameter gradients (and,
    /// with [`Graph::with_retained_grads`], every intermediate gradient) are
    /// added to whatever earlier calls accumulated.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut pass: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        pass[root.0] = Some(Tensor::from_parts(
            self.shape(root).to_vec(),
            vec![T::one()],
        ));
        for idx in (0..=root.0).rev() {
            let Some(g) = pass[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut pass);
            if self.retain_all || self.nodes[idx].is_leaf_param {
                match &mut self.grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn slot<'a>(
        nodes: &[Node<T>],
        pass: &'a mut [Option<Tensor<T>>],
        v: Var,
    ) -> Option<&'a mut Tensor<T>> {
        if !nodes[v.0].needs_grad {
            return None;
        }
        Some(pass[v.0].get_or_insert_with(|| nodes[v.0].value.zeros_like()))
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, pass: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let gd = g.data();
        let out = node.value.data();
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! slot {
            ($v:expr) => {
                Self::slot(nodes, pass, $v)
            };
        }
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(s) = slot!(a) {
                    s.add_assign(g);
                }
                if let Some(s) = slot!(b) {
                    s.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot!(a) {
                    s.add_assign(g);
                }
                if let Some(s) = slot!(b) {
                    for (d, &e) in s.data_mut().iter_mut().zip(gd) {
                        *d = *d - e;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(s) = slot!(a) {
                    for ((d, &e), &y) in s.data_mut().iter_mut().zip(gd).zip(val(b)) {
                        *d = *d + e * y;
                    }
                }
                if let Some(s) = slot!(b) {
                    for ((d, &e), &x) in s.data_mut().iter_mut().zip(gd).zip(val(a)) {
                        *d = *d + e * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = slot!(x) {
                    for (d, &e) in s.data_mut().iter_mut().zip(gd) {
                        *d = *d + e * c;
                    }
                }
            }
            Op::AddConst(x) => {
                if let Some(s) = slot!(x) {
                    s.add_assign(g);
                }
            }
            Op::GateMul { gate, x } => {
                let gv = val(gate)[0];
                if let Some(s) = slot!(gate) {
                    let mut dg: T = gd.iter().zip(val(x)).map(|(&e, &xv)| e * xv).sum();
                    if self.fault == Some(GradFault::GateScalar) {
                        dg = dg + dg;
                    }
                    s.data_mut()[0] = s.data_mut()[0] + dg;
                }
                if let Some(s) = slot!(x) {
                    for (d, &e) in s.data_mut().iter_mut().zip(gd) {
                        *d = *d + e * gv;
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(s) = slot!(x) {
                    for ((d, &e), &xv) in s.data_mut().iter_mut().zip(gd).zip(val(x)) {
                        if xv > T::zero() {
                            *d = *d + e;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(s) = slot!(x) {
                    for ((d, &e), &y) in s.data_mut().iter_mut().zip(gd).zip(out) {
                        *d = *d + e * y * (T::one() - y);
                    }
                }
            }
            Op::Square(x) => {
                if let Some(s) = slot!(x) {
                    for ((d, &e), &xv) in s.data_mut().iter_mut().zip(gd).zip(val(x)) {
                        *d = *d + e * (xv + xv);
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(s) = slot!(x) {
                    for ((d, &e), &y) in s.data_mut().iter_mut().zip(gd).zip(out) {
                        if y > T::zero() {
                            *d = *d + e / (y + y);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot!(x) {
                    let e = gd[0];
                    for d in s.data_mut() {
                        *d = *d + e;
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if let Some(s) = slot!(x) {
                    let (outer, n, inner) = nodes[x.0].value.axis_split(axis);
                    let sd = s.data_mut();
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                let p = (o * n + k) * inner + i;
                                sd[p] = sd[p] + gd[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::L2Norm { x, axis } => {
                if let Some(s) = slot!(x) {
                    let (outer, n, inner) = nodes[x.0].value.axis_split(axis);
                    let xd = val(x);
                    let sd = s.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let norm = out[o * inner + i];
                            if norm <= T::zero() {
                                continue;
                            }
                            let coef = gd[o * inner + i] / norm;
                            for k in 0..n {
                                let p = (o * n + k) * inner + i;
                                sd[p] = sd[p] + coef * xd[p];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(s) = slot!(x) {
                    let (outer, n, inner) = node.value.axis_split(axis);
                    let sd = s.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = T::zero();
                            for k in 0..n {
                                let p = (o * n + k) * inner + i;
                                dot = dot + gd[p] * out[p];
                            }
                            for k in 0..n {
                                let p = (o * n + k) * inner + i;
                                sd[p] = sd[p] + out[p] * (gd[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, ta, tb, dims: (n, m, k, p) } => {
                let (ad, bd) = (val(a), val(b));
                if let Some(s) = slot!(a) {
                    let sd = s.data_mut();
                    for i in 0..n {
                        let gi = &gd[i * m * p..(i + 1) * m * p];
                        let bi = &bd[i * k * p..(i + 1) * k * p];
                        let si = &mut sd[i * m * k..(i + 1) * m * k];
                        match (ta, tb) {
                            (false, false) => kernels::matmul_nt_acc(gi, bi, si, m, p, k),
                            (false, true) => kernels::matmul_acc(gi, bi, si, m, p, k),
                            (true, false) => kernels::matmul_nt_acc(bi, gi, si, k, p, m),
                            (true, true) => {
                                let mut tmp = vec![T::zero(); m * k];
                                kernels::matmul_acc(gi, bi, &mut tmp, m, p, k);
                                for (d, e) in si.iter_mut().zip(kernels::transpose(&tmp, m, k)) {
                                    *d = *d + e;
                                }
                            }
                        }
                    }
                }
                if let Some(s) = slot!(b) {
                    let sd = s.data_mut();
                    for i in 0..n {
                        let gi = &gd[i * m * p..(i + 1) * m * p];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let si = &mut sd[i * k * p..(i + 1) * k * p];
                        match (ta, tb) {
                            (false, false) => kernels::matmul_tn_acc(ai, gi, si, k, m, p),
                            (true, false) => kernels::matmul_acc(ai, gi, si, k, m, p),
                            (false, true) => kernels::matmul_tn_acc(gi, ai, si, p, m, k),
                            (true, true) => {
                                let mut tmp = vec![T::zero(); k * p];
                                kernels::matmul_acc(ai, gi, &mut tmp, k, m, p);
                                for (d, e) in si.iter_mut().zip(kernels::transpose(&tmp, k, p)) {
                                    *d = *d + e;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let batch = node.value.shape()[0];
                let cout = node.value.shape()[1];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let plane = geom.in_channels * geom.height * geom.width;
                if let Some(b) = b {
                    if let Some(s) = slot!(b) {
                        let sd = s.data_mut();
                        for n in 0..batch {
                            for (c, d) in sd.iter_mut().enumerate() {
                                let o = (n * cout + c) * ncols;
                                *d = *d + gd[o..o + ncols].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                let xd = val(x);
                let wd = val(w);
                let mut cols = vec![T::zero(); rows * ncols];
                if let Some(s) = slot!(w) {
                    let sd = s.data_mut();
                    for n in 0..batch {
                        kernels::im2col(&xd[n * plane..(n + 1) * plane], &geom, &mut cols);
                        let gn = &gd[n * cout * ncols..(n + 1) * cout * ncols];
                        kernels::matmul_nt_acc(gn, &cols, sd, cout, ncols, rows);
                    }
                }
                if let Some(s) = slot!(x) {
                    let sd = s.data_mut();
                    for n in 0..batch {
                        cols.fill(T::zero());
                        let gn = &gd[n * cout * ncols..(n + 1) * cout * ncols];
                        kernels::matmul_tn_acc(wd, gn, &mut cols, rows, cout, ncols);
                        kernels::col2im_acc(&cols, &geom, &mut sd[n * plane..(n + 1) * plane]);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, dout) = (node.value.shape()[0], node.value.shape()[1]);
                let din = nodes[x.0].value.shape()[1];
                if let Some(b) = b {
                    if let Some(s) = slot!(b) {
                        let sd = s.data_mut();
                        for r in 0..rows {
                            for (d, &e) in sd.iter_mut().zip(&gd[r * dout..(r + 1) * dout]) {
                                *d = *d + e;
                            }
                        }
                    }
                }
                if let Some(s) = slot!(w) {
                    kernels::matmul_tn_acc(val(x), gd, s.data_mut(), din, rows, dout);
                }
                if let Some(s) = slot!(x) {
                    kernels::matmul_nt_acc(gd, val(w), s.data_mut(), rows, dout, din);
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot!(x) {
                    for (d, &e) in s.data_mut().iter_mut().zip(gd) {
                        *d = *d + e;
                    }
                }
            }
            Op::SwapLast2(x) => {
                if let Some(s) = slot!(x) {
                    let sh = node.value.shape();
                    let (n, r, c) = (sh[0], sh[1], sh[2]);
                    let sd = s.data_mut();
                    for i in 0..n {
                        let t = kernels::transpose(&gd[i * r * c..(i + 1) * r * c], r, c);
                        for (d, e) in sd[i * r * c..(i + 1) * r * c].iter_mut().zip(t) {
                            *d = *d + e;
                        }
                    }
                }
            }
            Op::Squash(x) => {
                if let Some(s) = slot!(x) {
                    let d = *node.value.shape().last().expect("rank >= 1");
                    let xd = val(x);
                    let sd = s.data_mut();
                    for ((sv, gv), dv) in xd.chunks(d).zip(gd.chunks(d)).zip(sd.chunks_mut(d)) {
                        let n2: T = sv.iter().map(|&e| e * e).sum();
                        let n = n2.sqrt();
                        if n <= T::zero() {
                            continue;
                        }
                        let one = T::one();
                        let f = n / (one + n2);
                        let fprime = (one - n2) / ((one + n2) * (one + n2));
                        let sg: T = sv.iter().zip(gv).map(|(&a, &b)| a * b).sum();
                        let coef = fprime / n * sg;
                        for ((o, &si), &gi) in dv.iter_mut().zip(sv).zip(gv) {
                            *o = *o + gi * f + si * coef;
                        }
                    }
                }
            }
            Op::CapsPredict { u, w } => {
                let su = nodes[u.0].value.shape();
                let sw = nodes[w.0].value.shape();
                let (batch, ni, din) = (su[0], su[1], su[2]);
                let (nj, dout) = (sw[1], sw[2]);
                let blk = nj * dout;
                if let Some(s) = slot!(u) {
                    let wd = val(w);
                    let sd = s.data_mut();
                    for b in 0..batch {
                        for i in 0..ni {
                            let gi = &gd[(b * ni + i) * blk..(b * ni + i + 1) * blk];
                            let wi = &wd[i * blk * din..(i + 1) * blk * din];
                            let si = &mut sd[(b * ni + i) * din..(b * ni + i + 1) * din];
                            kernels::matmul_acc(gi, wi, si, 1, blk, din);
                        }
                    }
                }
                if let Some(s) = slot!(w) {
                    let ud = val(u);
                    let sd = s.data_mut();
                    for b in 0..batch {
                        for i in 0..ni {
                            let gi = &gd[(b * ni + i) * blk..(b * ni + i + 1) * blk];
                            let ui = &ud[(b * ni + i) * din..(b * ni + i + 1) * din];
                            let si = &mut sd[i * blk * din..(i + 1) * blk * din];
                            kernels::matmul_acc(gi, ui, si, blk, 1, din);
                        }
                    }
                }
            }
            Op::CapsWeightedSum { c, uhat } => {
                let su = nodes[uhat.0].value.shape();
                let (batch, ni, nj, d) = (su[0], su[1], su[2], su[3]);
                let (cd, ud) = (val(c), val(uhat));
                if let Some(s) = slot!(c) {
                    let sd = s.data_mut();
                    for b in 0..batch {
                        for i in 0..ni {
                            for j in 0..nj {
                                let src = &ud[((b * ni + i) * nj + j) * d..][..d];
                                let gj = &gd[(b * nj + j) * d..][..d];
                                let dot: T = src.iter().zip(gj).map(|(&x, &y)| x * y).sum();
                                let p = (b * ni + i) * nj + j;
                                sd[p] = sd[p] + dot;
                            }
                        }
                    }
                }
                if let Some(s) = slot!(uhat) {
                    let sd = s.data_mut();
                    for b in 0..batch {
                        for i in 0..ni {
                            for j in 0..nj {
                                let cij = cd[(b * ni + i) * nj + j];
                                let gj = &gd[(b * nj + j) * d..][..d];
                                let dst = &mut sd[((b * ni + i) * nj + j) * d..][..d];
                                for (o, &e) in dst.iter_mut().zip(gj) {
                                    *o = *o + cij * e;
                                }
                            }
                        }
                    }
                }
            }
            Op::CapsAgreement { uhat, v } => {
                let su = nodes[uhat.0].value.shape();
                let (batch, ni, nj, d) = (su[0], su[1], su[2], su[3]);
                let (ud, vd) = (val(uhat), val(v));
                if let Some(s) = slot!(uhat) {
                    let sd = s.data_mut();
                    for b in 0..batch {
                        for i in 0..ni {
                            for j in 0..nj {
                                let gij = gd[(b * ni + i) * nj + j];
                                let vj = &vd[(b * nj + j) * d..][..d];
                                let dst = &mut sd[((b * ni + i) * nj + j) * d..][..d];
                                for (o, &e) in dst.iter_mut().zip(vj) {
                                    *o = *o + gij * e;
                                }
                            }
                        }
                    }
                }
                if let Some(s) = slot!(v) {
                    let sd = s.data_mut();
                    for b in 0..batch {
                        for i in 0..ni {
                            for j in 0..nj {
                                let gij = gd[(b * ni + i) * nj + j];
                                let src = &ud[((b * ni + i) * nj + j) * d..][..d];
                                let dst = &mut sd[(b * nj + j) * d..][..d];
                                for (o, &e) in dst.iter_mut().zip(src) {
                                    *o = *o + gij * e;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Softmax along `axis` with max subtraction; shared by the graph op and
/// non-differentiable callers.
pub fn softmax_forward<T: Real>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = t.axis_split(axis);
    let d = t.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..n {
                mx = mx.max(d[at(k)]);
            }
            let mut total = T::zero();
            for k in 0..n {
                let e = (d[at(k)] - mx).exp();
                out[at(k)] = e;
                total = total + e;
            }
            for k in 0..n {
                out[at(k)] = out[at(k)] / total;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
