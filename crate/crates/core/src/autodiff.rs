//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables together with
//! the forward value, then [`Graph::backward`] sweeps the record in reverse
//! and accumulates vector-Jacobian products. Each op carries its own
//! hand-written adjoint; correctness of the whole is pinned by the
//! finite-difference tests in this module and in `training`.
//!
//! Shape mismatches inside a graph are programming errors and panic.

use std::sync::Arc;

use crate::numerics::{fft2_complex_inplace, matmul_into, ComplexTensor, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sentinel in gather maps: the output element is zero.
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Clone, Debug)]
struct Bcast {
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    AddScalar(Var),
    Scale(Var, T),
    Recip(Var),
    Exp(Var),
    Log(Var),
    Log1p(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Tanh(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    SoftmaxRows(Var),
    Gather(Var, Arc<Vec<usize>>),
    RealPart(Var),
    ImagPart(Var),
    Fft2Real(Var),
    Ifft2Real(Var),
    RowCosine(Var, Var),
    RowNormalize(Var),
    GatedScan(Var, Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let pad = |s: &[usize], i: usize| -> usize {
        let off = n - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..n)
        .map(|i| {
            let (x, y) = (pad(a, i), pad(b, i));
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

/// For each flat index of `out`, the flat index of the broadcast input.
fn broadcast_map(input: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if input == out {
        return None;
    }
    let n = out.len();
    let off = n - input.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..n).rev() {
        let d = if i < off { 1 } else { input[i - off] };
        strides[i] = if d == 1 { 0 } else { s };
        s *= d;
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..n).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

#[inline]
fn src(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

fn stack_complex<T: Scalar>(z: ComplexTensor<T>) -> Tensor<T> {
    let mut shape = vec![2];
    shape.extend_from_slice(z.shape());
    let mut data = Vec::with_capacity(2 * z.len());
    data.extend_from_slice(z.re());
    data.extend_from_slice(z.im());
    Tensor::new(shape, data).expect("stacked complex shape")
}

fn unstack_complex<T: Scalar>(t: &Tensor<T>) -> ComplexTensor<T> {
    assert_eq!(t.shape()[0], 2, "complex tensors carry a leading axis of 2");
    let n = t.len() / 2;
    let shape = &t.shape()[1..];
    let re = Tensor::new(shape.to_vec(), t.data()[..n].to_vec()).unwrap();
    let im = Tensor::new(shape.to_vec(), t.data()[n..].to_vec()).unwrap();
    ComplexTensor::new(re, im).unwrap()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> (Tensor<T>, Bcast) {
        let (va, vb) = (self.value(a), self.value(b));
        let out = broadcast_shape(va.shape(), vb.shape());
        let bc = Bcast {
            a: broadcast_map(va.shape(), &out),
            b: broadcast_map(vb.shape(), &out),
        };
        let value = Tensor::from_fn(&out, |i| f(va.data()[src(&bc.a, i)], vb.data()[src(&bc.b, i)]));
        (value, bc)
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (v, bc) = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b, bc), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (v, bc) = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b, bc), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (v, bc) = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b, bc), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, T::one())
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| T::one() / x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), T::ln)
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log1p(a), T::ln_1p)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), T::sqrt)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), T::sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), T::silu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), T::softplus)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), T::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("graph matmul: {e}"));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose().expect("graph transpose needs a matrix");
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("graph reshape: {e}"));
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Sum of all entries, as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let value = Tensor::from_fn(&out_shape, |i| {
            let (o, r) = (i / inner, i % inner);
            (0..n).map(|k| va.data()[o * n * inner + k * inner + r]).sum()
        });
        let rg = self.rg(a);
        self.push(value, Op::SumAxis(a, axis), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = *va.shape().last().expect("softmax needs at least one axis");
        let mut value = va.clone();
        for row in value.data_mut().chunks_mut(n) {
            let s = crate::numerics::softmax_slice(row);
            row.copy_from_slice(&s);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// `out[i] = a[map[i]]`, or zero where `map[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, map: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let va = self.value(a);
        let value = Tensor::new(
            shape.to_vec(),
            map.iter()
                .map(|&k| if k == GATHER_ZERO { T::zero() } else { va.data()[k] })
                .collect(),
        )
        .expect("gather map length must match output shape");
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, map), rg)
    }

    pub fn real_part(&mut self, z: Var) -> Var {
        let c = unstack_complex(self.value(z));
        let rg = self.rg(z);
        self.push(c.real_part(), Op::RealPart(z), rg)
    }

    pub fn imag_part(&mut self, z: Var) -> Var {
        let c = unstack_complex(self.value(z));
        let rg = self.rg(z);
        self.push(c.imag_part(), Op::ImagPart(z), rg)
    }

    /// Forward DFT of a real `[C, H, W]` map into a stacked `[2, C, H, W]` spectrum.
    pub fn fft2(&mut self, a: Var) -> Var {
        let z = crate::numerics::fft2(self.value(a)).unwrap_or_else(|e| panic!("graph fft2: {e}"));
        let rg = self.rg(a);
        self.push(stack_complex(z), Op::Fft2Real(a), rg)
    }

    /// Real part of the inverse DFT of a stacked spectrum.
    pub fn ifft2_real(&mut self, z: Var) -> Var {
        let c = unstack_complex(self.value(z));
        let value = crate::numerics::ifft2_real(&c).unwrap_or_else(|e| panic!("graph ifft2: {e}"));
        let rg = self.rg(z);
        self.push(value, Op::Ifft2Real(z), rg)
    }

    /// Row-wise cosine similarity of two `[T, C]` matrices, shape `[T]`.
    /// Zero-vector conventions follow [`crate::numerics::cosine_similarity`].
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_cosine shapes");
        let rows = va.rows();
        let value = Tensor::from_fn(&[rows], |i| crate::numerics::cosine_similarity(va.row(i), vb.row(i)));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::RowCosine(a, b), rg)
    }

    /// Scales each row of a matrix to unit norm; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut value = va.clone();
        for row in value.data_mut().chunks_mut(c) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|x| *x = *x / n);
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::RowNormalize(a), rg)
    }

    /// Gated linear recurrence over rows:
    /// `m_t = g_t * m_{t-1} + (1 - g_t) * f_t`, with `m_{-1} = 0`.
    pub fn gated_scan(&mut self, gate: Var, fresh: Var) -> Var {
        let (vg, vf) = (self.value(gate), self.value(fresh));
        assert_eq!(vg.shape(), vf.shape(), "gated_scan shapes");
        let (t, c) = (vg.rows(), vg.cols());
        let mut m = vec![T::zero(); t * c];
        for i in 0..t {
            for k in 0..c {
                let prev = if i == 0 { T::zero() } else { m[(i - 1) * c + k] };
                let g = vg.data()[i * c + k];
                m[i * c + k] = g * prev + (T::one() - g) * vf.data()[i * c + k];
            }
        }
        let value = Tensor::new(vec![t, c], m).unwrap();
        let rg = self.rg(gate) || self.rg(fresh);
        self.push(value, Op::GatedScan(gate, fresh), rg)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::ones(self.value(out).shape()));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn bcast_reduce(&self, v: Var, map: &Option<Vec<usize>>, contrib: impl Fn(usize) -> T, n: usize) -> Tensor<T> {
        let shape = self.value(v).shape();
        match map {
            None => Tensor::from_fn(shape, contrib),
            Some(m) => {
                let mut t = Tensor::zeros(shape);
                let d = t.data_mut();
                for i in 0..n {
                    d[m[i]] = d[m[i]] + contrib(i);
                }
                t
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        let gd = g.data();
        let n = g.len();
        let zero = T::zero();
        let one = T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                if self.rg(*a) {
                    let t = self.bcast_reduce(*a, &bc.a, |i| gd[i], n);
                    self.acc(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = self.bcast_reduce(*b, &bc.b, |i| gd[i], n);
                    self.acc(grads, *b, t);
                }
            }
            Op::Sub(a, b, bc) => {
                if self.rg(*a) {
                    let t = self.bcast_reduce(*a, &bc.a, |i| gd[i], n);
                    self.acc(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = self.bcast_reduce(*b, &bc.b, |i| -gd[i], n);
                    self.acc(grads, *b, t);
                }
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let t = self.bcast_reduce(*a, &bc.a, |i| gd[i] * vb[src(&bc.b, i)], n);
                    self.acc(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = self.bcast_reduce(*b, &bc.b, |i| gd[i] * va[src(&bc.a, i)], n);
                    self.acc(grads, *b, t);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let t = Tensor::new(shape, gd.to_vec()).unwrap();
                self.acc(grads, *a, t);
            }
            Op::Scale(a, c) => {
                let t = g.scale(*c);
                self.acc(grads, *a, t);
            }
            Op::Recip(a) => {
                let t = Tensor::from_fn(y.shape(), |i| -gd[i] * y.data()[i] * y.data()[i]);
                self.acc(grads, *a, t);
            }
            Op::Exp(a) => {
                let t = Tensor::from_fn(y.shape(), |i| gd[i] * y.data()[i]);
                self.acc(grads, *a, t);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let t = Tensor::from_fn(y.shape(), |i| gd[i] / x[i]);
                self.acc(grads, *a, t);
            }
            Op::Log1p(a) => {
                let x = self.value(*a).data();
                let t = Tensor::from_fn(y.shape(), |i| gd[i] / (one + x[i]));
                self.acc(grads, *a, t);
            }
            Op::Sqrt(a) => {
                let t = Tensor::from_fn(y.shape(), |i| {
                    let s = y.data()[i];
                    if s > zero {
                        gd[i] / (s + s)
                    } else {
                        zero
                    }
                });
                self.acc(grads, *a, t);
            }
            Op::Sigmoid(a) => {
                let t = Tensor::from_fn(y.shape(), |i| {
                    let s = y.data()[i];
                    gd[i] * s * (one - s)
                });
                self.acc(grads, *a, t);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let t = Tensor::from_fn(y.shape(), |i| {
                    let s = x[i].sigmoid();
                    gd[i] * s * (one + x[i] * (one - s))
                });
                self.acc(grads, *a, t);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let t = Tensor::from_fn(y.shape(), |i| gd[i] * x[i].sigmoid());
                self.acc(grads, *a, t);
            }
            Op::Tanh(a) => {
                let t = Tensor::from_fn(y.shape(), |i| {
                    let s = y.data()[i];
                    gd[i] * (one - s * s)
                });
                self.acc(grads, *a, t);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let t = Tensor::from_fn(y.shape(), |i| if x[i] > zero { gd[i] } else { zero });
                self.acc(grads, *a, t);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (rows, k, m) = (va.rows(), va.cols(), vb.cols());
                if self.rg(*a) {
                    // dA = G B^T
                    let bt = vb.transpose().unwrap();
                    let mut out = vec![zero; rows * k];
                    matmul_into(gd, bt.data(), &mut out, rows, m, k);
                    self.acc(grads, *a, Tensor::new(vec![rows, k], out).unwrap());
                }
                if self.rg(*b) {
                    // dB = A^T G
                    let at = va.transpose().unwrap();
                    let mut out = vec![zero; k * m];
                    matmul_into(at.data(), gd, &mut out, k, rows, m);
                    self.acc(grads, *b, Tensor::new(vec![k, m], out).unwrap());
                }
            }
            Op::Transpose(a) => {
                let t = g.transpose().unwrap();
                self.acc(grads, *a, t);
            }
            Op::SumAll(a) => {
                let t = Tensor::full(self.value(*a).shape(), gd[0]);
                self.acc(grads, *a, t);
            }
            Op::SumAxis(a, axis) => {
                let shape = self.value(*a).shape();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = shape[*axis];
                let t = Tensor::from_fn(shape, |i| {
                    let o = i / (len * inner);
                    let r = i % inner;
                    gd[o * inner + r]
                });
                self.acc(grads, *a, t);
            }
            Op::SoftmaxRows(a) => {
                let c = *y.shape().last().unwrap();
                let mut t = Tensor::zeros(y.shape());
                for ((dx, yr), gr) in t.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for k in 0..c {
                        dx[k] = yr[k] * (gr[k] - dot);
                    }
                }
                self.acc(grads, *a, t);
            }
            Op::Gather(a, map) => {
                let mut t = Tensor::zeros(self.value(*a).shape());
                let d = t.data_mut();
                for (i, &k) in map.iter().enumerate() {
                    if k != GATHER_ZERO {
                        d[k] = d[k] + gd[i];
                    }
                }
                self.acc(grads, *a, t);
            }
            Op::RealPart(z) | Op::ImagPart(z) => {
                let mut t = Tensor::zeros(self.value(*z).shape());
                let off = if matches!(node.op, Op::RealPart(_)) { 0 } else { n };
                t.data_mut()[off..off + n].copy_from_slice(gd);
                self.acc(grads, *z, t);
            }
            Op::Fft2Real(a) => {
                // adjoint of the unnormalized DFT is the unnormalized inverse
                let mut c = unstack_complex(g);
                fft2_complex_inplace(&mut c, true).unwrap();
                self.acc(grads, *a, c.real_part());
            }
            Op::Ifft2Real(z) => {
                let shape = g.shape();
                let hw = T::lit((shape[1] * shape[2]) as f64);
                let mut c = ComplexTensor::from_real(g);
                fft2_complex_inplace(&mut c, false).unwrap();
                let t = stack_complex(c).scale(T::one() / hw);
                self.acc(grads, *z, t);
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = va.cols();
                let mut ga = Tensor::zeros(va.shape());
                let mut gb = Tensor::zeros(vb.shape());
                for r in 0..va.rows() {
                    let (ar, br) = (va.row(r), vb.row(r));
                    let na2: T = ar.iter().map(|&x| x * x).sum();
                    let nb2: T = br.iter().map(|&x| x * x).sum();
                    if na2 == zero || nb2 == zero {
                        continue;
                    }
                    let inv = one / (na2.sqrt() * nb2.sqrt());
                    let cos = y.data()[r];
                    for k in 0..c {
                        ga.data_mut()[r * c + k] = gd[r] * (br[k] * inv - cos * ar[k] / na2);
                        gb.data_mut()[r * c + k] = gd[r] * (ar[k] * inv - cos * br[k] / nb2);
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::RowNormalize(a) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut t = Tensor::zeros(va.shape());
                for r in 0..va.rows() {
                    let norm = va.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
                    if norm == zero {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for k in 0..c {
                        t.data_mut()[r * c + k] = (gr[k] - yr[k] * dot) / norm;
                    }
                }
                self.acc(grads, *a, t);
            }
            Op::GatedScan(gate, fresh) => {
                let (vg, vf) = (self.value(*gate), self.value(*fresh));
                let (rows, c) = (vg.rows(), vg.cols());
                let mut dg = Tensor::zeros(vg.shape());
                let mut df = Tensor::zeros(vf.shape());
                let mut carry = vec![zero; c];
                for t in (0..rows).rev() {
                    for k in 0..c {
                        let i = t * c + k;
                        let gm = gd[i] + carry[k];
                        let prev = if t == 0 { zero } else { y.data()[i - c] };
                        let gt = vg.data()[i];
                        dg.data_mut()[i] = gm * (prev - vf.data()[i]);
                        df.data_mut()[i] = gm * (one - gt);
                        carry[k] = gm * gt;
                    }
                }
                self.acc(grads, *gate, dg);
                self.acc(grads, *fresh, df);
            }
        }
    }
}
