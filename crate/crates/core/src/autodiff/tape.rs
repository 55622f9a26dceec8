//! Define-by-run tape.
//!
//! Every primitive evaluates eagerly, checks its result is finite, and
//! appends a node. Nodes only reference earlier nodes, so the node vector is
//! already in topological order and `backward` is a single reverse sweep.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu { x: Var, alpha: f64 },
    Square(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    PairwiseAdd { q: Var, k: Var },
    PairwiseLeakyDot { q: Var, k: Var, a: Var, alpha: f64 },
    VariableAffine { x: Var, w: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Record of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// C[m,n] = op(A)[m,k] * op(B)[k,n] + beta * C.
/// With `a_t`, A is stored as [k,m]; with `b_t`, B is stored as [n,k].
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn leaky(v: f64, alpha: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        alpha * v
    }
}

/// Overflow-safe softmax over the last axis.
pub(crate) fn softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    if width == 0 {
        return out;
    }
    for (row, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation (inputs, targets, initial states).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product of `[m,k]` with `[k,n]` (or a `[k]` vector, giving `[m]`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 2 && (sb.len() == 2 || sb.len() == 1) && sa[1] == sb[0];
        if !ok {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let out_shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push("matmul", Op::MatMul(a, b), Tensor::from_parts(out_shape, out), &[a, b])
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`; the layout of a linear layer's weight.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        self.push("matmul_nt", Op::MatMulNt(a, b), Tensor::from_parts(vec![m, n], out), &[a, b])
    }

    /// Independent products `[g,m,k] × [g,k,n] → [g,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", &[sa, sb]));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ab = &ad[gi * m * k..(gi + 1) * m * k];
            let bb = &bd[gi * k * n..(gi + 1) * k * n];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ab[i * k + p];
                    for j in 0..n {
                        ob[i * n + j] += av * bb[p * n + j];
                    }
                }
            }
        }
        self.push("batch_matmul", Op::BatchMatMul(a, b), Tensor::from_parts(vec![g, m, n], out), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), v, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul(a, b), v, &[a, b])
    }

    /// Adds a `[n]` bias to every length-`n` row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.is_empty() || sb.len() != 1 || sx[sx.len() - 1] != sb[0] {
            return Err(Error::shape("add_bias", &[sx, sb]));
        }
        let n = sb[0];
        let bv = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                for (d, b) in row.iter_mut().zip(bv) {
                    *d += b;
                }
            }
        }
        let v = Tensor::from_parts(sx.to_vec(), data);
        self.push("add_bias", Op::AddBias { x, bias }, v, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = map(self.value(x), |v| v * factor);
        self.push("scale", Op::Scale { x, factor }, v, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, value: f64) -> Result<Var> {
        let v = map(self.value(x), |v| v + value);
        self.push("add_scalar", Op::AddScalar(x), v, &[x])
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = map(self.value(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push("sigmoid", Op::Sigmoid(x), v, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = map(self.value(x), f64::tanh);
        self.push("tanh", Op::Tanh(x), v, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = map(self.value(x), |v| v.max(0.0));
        self.push("relu", Op::Relu(x), v, &[x])
    }

    /// `x` for positive entries, `alpha * x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let v = map(self.value(x), |v| leaky(v, alpha));
        self.push("leaky_relu", Op::LeakyRelu { x, alpha }, v, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = map(self.value(x), |v| v * v);
        self.push("square", Op::Square(x), v, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::shape("softmax", &[s]));
        }
        let width = s[s.len() - 1];
        let v = Tensor::from_parts(s.to_vec(), softmax_rows(self.value(x).data(), width));
        self.push("softmax", Op::Softmax(x), v, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", Op::Sum(x), v, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push("mean", Op::Mean(x), v, &[x])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                let shapes: Vec<&[usize]> = parts.iter().map(|&v| self.shape(v)).collect();
                return Err(Error::shape("concat", &shapes));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let v = Tensor::from_parts(shape, data);
        self.push("concat", Op::Concat(parts.to_vec()), v, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", Op::Reshape(x), v, &[x])
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() || start + len > s[0] {
            return Err(Error::shape("slice_rows", &[s, &[start, len]]));
        }
        let stride: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = len;
        let data = self.value(x).data()[start * stride..(start + len) * stride].to_vec();
        let v = Tensor::from_parts(shape, data);
        self.push("slice_rows", Op::SliceRows { x, start }, v, &[x])
    }

    /// All receiver/sender sums within each group:
    /// `q, k: [g,n,a] → out[g,i,j,:] = q[g,i,:] + k[g,j,:]`, shape `[g,n,n,a]`.
    pub fn pairwise_add(&mut self, q: Var, k: Var) -> Result<Var> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.len() != 3 || sq != sk {
            return Err(Error::shape("pairwise_add", &[sq, sk]));
        }
        let (g, n, a) = (sq[0], sq[1], sq[2]);
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = Vec::with_capacity(g * n * n * a);
        for gi in 0..g {
            let base = gi * n * a;
            for i in 0..n {
                let qi = &qd[base + i * a..base + (i + 1) * a];
                for j in 0..n {
                    let kj = &kd[base + j * a..base + (j + 1) * a];
                    out.extend(qi.iter().zip(kj).map(|(x, y)| x + y));
                }
            }
        }
        let v = Tensor::from_parts(vec![g, n, n, a], out);
        self.push("pairwise_add", Op::PairwiseAdd { q, k }, v, &[q, k])
    }

    /// Fused `out[g,i,j] = Σ_c a[c] · LeakyReLU(q[g,i,c] + k[g,j,c])` for
    /// `q, k: [g,n,a]`, `a: [a]`; equal to `pairwise_add`, `leaky_relu` and a
    /// product with `a`, without materialising the `[g,n,n,a]` intermediates.
    pub fn pairwise_leaky_dot(&mut self, q: Var, k: Var, a: Var, alpha: f64) -> Result<Var> {
        let (sq, sk, sa) = (self.shape(q), self.shape(k), self.shape(a));
        if sq.len() != 3 || sq != sk || sa.len() != 1 || sa[0] != sq[2] {
            return Err(Error::shape("pairwise_leaky_dot", &[sq, sk, sa]));
        }
        let (g, n, d) = (sq[0], sq[1], sq[2]);
        let (qd, kd, ad) = (self.value(q).data(), self.value(k).data(), self.value(a).data());
        let mut out = Vec::with_capacity(g * n * n);
        for gi in 0..g {
            let base = gi * n * d;
            for i in 0..n {
                let qi = &qd[base + i * d..base + (i + 1) * d];
                for j in 0..n {
                    let kj = &kd[base + j * d..base + (j + 1) * d];
                    let mut s = 0.0;
                    for c in 0..d {
                        s += ad[c] * leaky(qi[c] + kj[c], alpha);
                    }
                    out.push(s);
                }
            }
        }
        let v = Tensor::from_parts(vec![g, n, n], out);
        self.push("pairwise_leaky_dot", Op::PairwiseLeakyDot { q, k, a, alpha }, v, &[q, k, a])
    }

    /// Per-variable affine map of scalar observations:
    /// `x: [g,n]`, `w, b: [n,e]` → `out[g,n,:] = x[g,n] * w[n,:] + b[n,:]`.
    pub fn variable_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sw != sb || sx[1] != sw[0] {
            return Err(Error::shape("variable_affine", &[sx, sw, sb]));
        }
        let (g, n, e) = (sx[0], sx[1], sw[1]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(g * n * e);
        for gi in 0..g {
            for vi in 0..n {
                let xv = xd[gi * n + vi];
                let wr = &wd[vi * e..(vi + 1) * e];
                let br = &bd[vi * e..(vi + 1) * e];
                out.extend(wr.iter().zip(br).map(|(w, b)| xv * w + b));
            }
        }
        let v = Tensor::from_parts(vec![g, n, e], out);
        self.push("variable_affine", Op::VariableAffine { x, w, b }, v, &[x, w, b])
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = if bv.shape().len() == 2 { bv.shape()[1] } else { 1 };
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), false, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, av.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n, k], db));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gn, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let mut da = vec![0.0; gn * m * k];
                let mut db = vec![0.0; gn * k * n];
                for gi in 0..gn {
                    let ab = &ad[gi * m * k..(gi + 1) * m * k];
                    let bb = &bd[gi * k * n..(gi + 1) * k * n];
                    let gb = &gd[gi * m * n..(gi + 1) * m * n];
                    let dab = &mut da[gi * m * k..(gi + 1) * m * k];
                    let dbb = &mut db[gi * k * n..(gi + 1) * k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let av_ip = ab[i * k + p];
                            for j in 0..n {
                                let gij = gb[i * n + j];
                                acc += gij * bb[p * n + j];
                                dbb[p * n + j] += av_ip * gij;
                            }
                            dab[i * k + p] = acc;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip(g, bv, |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip(g, av, |x, y| x * y));
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    if n > 0 {
                        for row in g.data().chunks(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![n], db));
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(grads, *x, map(g, |v| v * f));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Sigmoid(x) => self.accumulate(grads, *x, zip(g, y, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(x) => self.accumulate(grads, *x, zip(g, y, |gv, t| gv * (1.0 - t * t))),
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, zip(g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 }));
            }
            Op::LeakyRelu { x, alpha } => {
                let a = *alpha;
                let xv = self.value(*x);
                self.accumulate(grads, *x, zip(g, xv, |gv, v| if v > 0.0 { gv } else { a * gv }));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, zip(g, xv, |gv, v| 2.0 * v * gv));
            }
            Op::Softmax(x) => {
                let width = y.shape()[y.shape().len() - 1];
                let mut dx = vec![0.0; y.len()];
                if width > 0 {
                    for ((yr, gr), dr) in y.data().chunks(width).zip(g.data().chunks(width)).zip(dx.chunks_mut(width)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(s, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g.item() / xv.len() as f64));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let len = pv.len();
                    let slice = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    self.accumulate(grads, *p, Tensor::from_parts(pv.shape().to_vec(), slice));
                }
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(s, g.data().to_vec()));
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let stride: usize = xs[1..].iter().product();
                    let range = start * stride..start * stride + g.len();
                    let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(xs));
                    for (d, v) in slot.data_mut()[range].iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
            }
            Op::PairwiseAdd { q, k } => {
                let s = self.shape(*q);
                let (gn, n, a) = (s[0], s[1], s[2]);
                let gd = g.data();
                let mut dq = vec![0.0; gn * n * a];
                let mut dk = vec![0.0; gn * n * a];
                for gi in 0..gn {
                    for i in 0..n {
                        for j in 0..n {
                            let src = &gd[((gi * n + i) * n + j) * a..((gi * n + i) * n + j + 1) * a];
                            let qi = (gi * n + i) * a;
                            let kj = (gi * n + j) * a;
                            for (c, v) in src.iter().enumerate() {
                                dq[qi + c] += v;
                                dk[kj + c] += v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::from_parts(s.to_vec(), dq));
                self.accumulate(grads, *k, Tensor::from_parts(s.to_vec(), dk));
            }
            Op::PairwiseLeakyDot { q, k, a, alpha } => {
                let s = self.shape(*q);
                let (gn, n, d) = (s[0], s[1], s[2]);
                let (qd, kd, ad, gd) = (self.value(*q).data(), self.value(*k).data(), self.value(*a).data(), g.data());
                let mut dq = vec![0.0; gn * n * d];
                let mut dk = vec![0.0; gn * n * d];
                let mut da = vec![0.0; d];
                for gi in 0..gn {
                    let base = gi * n * d;
                    for i in 0..n {
                        for j in 0..n {
                            let gv = gd[(gi * n + i) * n + j];
                            for c in 0..d {
                                let m = qd[base + i * d + c] + kd[base + j * d + c];
                                let (act, slope) = if m > 0.0 { (m, 1.0) } else { (*alpha * m, *alpha) };
                                let t = gv * ad[c] * slope;
                                dq[base + i * d + c] += t;
                                dk[base + j * d + c] += t;
                                da[c] += gv * act;
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::from_parts(s.to_vec(), dq));
                self.accumulate(grads, *k, Tensor::from_parts(s.to_vec(), dk));
                self.accumulate(grads, *a, Tensor::from_parts(vec![d], da));
            }
            Op::VariableAffine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (gn, n, e) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                let mut dx = vec![0.0; gn * n];
                let mut dw = vec![0.0; n * e];
                let mut db = vec![0.0; n * e];
                for gi in 0..gn {
                    for vi in 0..n {
                        let row = &gd[(gi * n + vi) * e..(gi * n + vi + 1) * e];
                        let xval = xd[gi * n + vi];
                        let mut acc = 0.0;
                        for c in 0..e {
                            acc += row[c] * wd[vi * e + c];
                            dw[vi * e + c] += row[c] * xval;
                            db[vi * e + c] += row[c];
                        }
                        dx[gi * n + vi] = acc;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![gn, n], dx));
                self.accumulate(grads, *w, Tensor::from_parts(vec![n, e], dw));
                self.accumulate(grads, *b, Tensor::from_parts(vec![n, e], db));
            }
        }
    }
}
