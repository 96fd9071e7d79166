//! Taped reverse-mode differentiation over rank-2 tensors.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gru::{self, GruCache, GruDims};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into};
use super::{ParamId, ParameterStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Node handle in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Reduction / normalization axis of a rank-2 tensor.
///
/// `Rows` reduces over the row index (output `1 x c`), `Cols` over the
/// column index (output `r x 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, F),
    AddScalar(Var),
    Concat(Vec<Var>, Axis),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    LogSumExp(Var, Axis),
    Sum(Var, Axis),
    Mean(Var, Axis),
    /// Selected flat indices and the smallest gap to a runner-up.
    Extremum(Var, Vec<usize>, f64),
    Std(Var, Axis),
    SumAll(Var),
    Dot(Var, Var),
    Dropout(Var, Vec<F>),
    Slice(Var, Axis, usize),
    Element(Var, usize),
    Gru {
        x: Var,
        w: Var,
        u: Var,
        b: Var,
        reverse: bool,
        cache: GruCache<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Index arithmetic for the lanes of a rank-2 tensor along an axis.
#[derive(Clone, Copy)]
struct Lanes {
    count: usize,
    len: usize,
    outer_stride: usize,
    inner_stride: usize,
}

impl Lanes {
    fn new(rows: usize, cols: usize, axis: Axis) -> Self {
        match axis {
            Axis::Cols => Lanes {
                count: rows,
                len: cols,
                outer_stride: cols,
                inner_stride: 1,
            },
            Axis::Rows => Lanes {
                count: cols,
                len: rows,
                outer_stride: 1,
                inner_stride: cols,
            },
        }
    }

    #[inline]
    fn at(&self, lane: usize, k: usize) -> usize {
        lane * self.outer_stride + k * self.inner_stride
    }

    fn reduced_shape(&self, axis: Axis) -> [usize; 2] {
        match axis {
            Axis::Cols => [self.count, 1],
            Axis::Rows => [1, self.count],
        }
    }
}

/// A computation recorded for reverse-mode differentiation.
///
/// One graph is built per forward pass; it is single-threaded, but
/// independent graphs may share a read-only [`ParameterStore`].
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

/// Per-node gradients produced by [`Graph::gradients`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Graph<F> {
    /// Graph in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn new(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.rc()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<F>, needs_grad: bool) -> Result<Var> {
        value.dims2()?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is tracked and readable via [`Graph::gradients`].
    pub fn variable(&mut self, value: Tensor<F>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<F>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let value = store.value(id).clone();
        value.dims2()?;
        self.nodes.push(Node {
            value,
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.rc(a);
        let (k2, c) = self.rc(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); r * c];
        matmul_into(self.value(a).data(), self.value(b).data(), r, k, c, &mut out);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.rc(a);
        let (c, k2) = self.rc(b);
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); r * c];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), r, k, c, &mut out);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose();
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (r, c) = self.rc(a);
        let (br, bc) = self.rc(b);
        Ok(if (br, bc) == (r, c) {
            Bcast::Same
        } else if (br, bc) == (1, 1) {
            Bcast::Scalar
        } else if br == 1 && bc == c {
            Bcast::Row
        } else if bc == 1 && br == r {
            Bcast::Col
        } else {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        })
    }

    fn zip_bcast(&self, a: Var, b: Var, mode: Bcast, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (r, c) = self.rc(a);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let bi = match mode {
                    Bcast::Same => i * c + j,
                    Bcast::Row => j,
                    Bcast::Col => i,
                    Bcast::Scalar => 0,
                };
                out.push(f(av[i * c + j], bv[bi]));
            }
        }
        Tensor::matrix(r, c, out).expect("shape preserved")
    }

    /// Elementwise `a + b`; `b` may be `a`-shaped, a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.bcast("add", a, b)?;
        let t = self.zip_bcast(a, b, m, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b, m), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.bcast("sub", a, b)?;
        let t = self.zip_bcast(a, b, m, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b, m), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.bcast("mul", a, b)?;
        let t = self.zip_bcast(a, b, m, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b, m), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: F) -> Var {
        let t = self.value(a).map(|x| x + k);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat of zero tensors".into()));
        };
        let (r0, c0) = self.rc(first);
        match axis {
            Axis::Rows => {
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let (r, c) = self.rc(p);
                    if c != c0 {
                        return Err(Error::shape("concat", self.shape(first), self.shape(p)));
                    }
                    rows += r;
                    data.extend_from_slice(self.value(p).data());
                }
                let t = Tensor::matrix(rows, c0, data)?;
                Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.rc(p);
                    if r != r0 {
                        return Err(Error::shape("concat", self.shape(first), self.shape(p)));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                let t = Tensor::matrix(r0, cols, data)?;
                Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
            }
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| F::one() / (F::one() + (-x).exp()));
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        self.push(t, Op::Ln(a), &[a])
    }

    fn lse_lanes(&self, a: Var, axis: Axis) -> (Lanes, Vec<F>) {
        let (r, c) = self.rc(a);
        let lanes = Lanes::new(r, c, axis);
        let x = self.value(a).data();
        let out = (0..lanes.count)
            .map(|l| {
                let mut m = F::neg_infinity();
                for k in 0..lanes.len {
                    m = m.max(x[lanes.at(l, k)]);
                }
                if !m.is_finite() {
                    return m;
                }
                let mut s = F::zero();
                for k in 0..lanes.len {
                    s = s + (x[lanes.at(l, k)] - m).exp();
                }
                m + s.ln()
            })
            .collect();
        (lanes, out)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let (lanes, lse) = self.lse_lanes(a, axis);
        let x = self.value(a).data();
        let mut out = vec![F::zero(); x.len()];
        for (l, &z) in lse.iter().enumerate() {
            for k in 0..lanes.len {
                let i = lanes.at(l, k);
                out[i] = (x[i] - z).exp();
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("shape preserved");
        self.push(t, Op::Softmax(a, axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Var {
        let (lanes, lse) = self.lse_lanes(a, axis);
        let x = self.value(a).data();
        let mut out = vec![F::zero(); x.len()];
        for (l, &z) in lse.iter().enumerate() {
            for k in 0..lanes.len {
                let i = lanes.at(l, k);
                out[i] = x[i] - z;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("shape preserved");
        self.push(t, Op::LogSoftmax(a, axis), &[a])
    }

    /// Stable `ln Σ exp(x)` along `axis`.
    pub fn logsumexp(&mut self, a: Var, axis: Axis) -> Var {
        let (lanes, lse) = self.lse_lanes(a, axis);
        let t = Tensor::new(lanes.reduced_shape(axis).to_vec(), lse).expect("lane count");
        self.push(t, Op::LogSumExp(a, axis), &[a])
    }

    fn reduce(&self, a: Var, axis: Axis, f: impl Fn(&mut dyn Iterator<Item = F>) -> F) -> (Lanes, Tensor<F>) {
        let (r, c) = self.rc(a);
        let lanes = Lanes::new(r, c, axis);
        let x = self.value(a).data();
        let out = (0..lanes.count)
            .map(|l| f(&mut (0..lanes.len).map(|k| x[lanes.at(l, k)])))
            .collect();
        let t = Tensor::new(lanes.reduced_shape(axis).to_vec(), out).expect("lane count");
        (lanes, t)
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Var {
        let (_, t) = self.reduce(a, axis, |it| it.fold(F::zero(), |s, v| s + v));
        self.push(t, Op::Sum(a, axis), &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Var {
        let (_, t) = self.reduce(a, axis, |it| {
            let (s, n) = it.fold((F::zero(), 0usize), |(s, n), v| (s + v, n + 1));
            s / F::from_f64(n as f64)
        });
        self.push(t, Op::Mean(a, axis), &[a])
    }

    fn extremum(&mut self, a: Var, axis: Axis, want_max: bool) -> Var {
        let (r, c) = self.rc(a);
        let lanes = Lanes::new(r, c, axis);
        let x = self.value(a).data();
        let mut idx = Vec::with_capacity(lanes.count);
        let mut out = Vec::with_capacity(lanes.count);
        let mut gap = f64::INFINITY;
        for l in 0..lanes.count {
            let mut best = lanes.at(l, 0);
            for k in 1..lanes.len {
                let i = lanes.at(l, k);
                let better = if want_max { x[i] > x[best] } else { x[i] < x[best] };
                if better {
                    best = i;
                }
            }
            for k in 0..lanes.len {
                let i = lanes.at(l, k);
                if i != best {
                    gap = gap.min((x[i].as_f64() - x[best].as_f64()).abs());
                }
            }
            idx.push(best);
            out.push(x[best]);
        }
        let t = Tensor::new(lanes.reduced_shape(axis).to_vec(), out).expect("lane count");
        self.push(t, Op::Extremum(a, idx, gap), &[a])
    }

    /// Distance of the current point from the nearest non-differentiable
    /// point of any `relu`, `max` or `min` whose input depends on a
    /// parameter. Finite differences are only meaningful when the step is
    /// well below this.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) if self.nodes[a.0].needs_grad => {
                    for &v in self.value(*a).data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::Extremum(a, _, gap) if self.nodes[a.0].needs_grad => margin = margin.min(*gap),
                _ => {}
            }
        }
        margin
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: Axis) -> Var {
        self.extremum(a, axis, true)
    }

    pub fn min(&mut self, a: Var, axis: Axis) -> Var {
        self.extremum(a, axis, false)
    }

    /// Population standard deviation along `axis`. Constant lanes give 0
    /// and pass no gradient.
    pub fn std(&mut self, a: Var, axis: Axis) -> Var {
        let (_, t) = self.reduce(a, axis, |it| {
            let v: Vec<F> = it.collect();
            let n = F::from_f64(v.len() as f64);
            let mean = v.iter().copied().sum::<F>() / n;
            let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
            var.sqrt()
        });
        self.push(t, Op::Std(a, axis), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Inner product of two same-shaped tensors, as a `1 x 1` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("dot", self.shape(a), self.shape(b)));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Inverted dropout; the identity (same node) outside training.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(a);
        }
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let n = self.value(a).len();
        let mask: Vec<F> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Dropout(a, mask), &[a]))
    }

    /// `len` consecutive rows (`Axis::Rows`) or columns (`Axis::Cols`) from `start`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rc(a);
        let extent = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if len == 0 || start + len > extent {
            return Err(Error::Usage(format!(
                "slice {start}..{} out of range for shape {:?}",
                start + len,
                self.shape(a)
            )));
        }
        let x = self.value(a);
        let t = match axis {
            Axis::Rows => Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?,
            Axis::Cols => {
                let mut d = Vec::with_capacity(r * len);
                for i in 0..r {
                    d.extend_from_slice(&x.row_slice(i)[start..start + len]);
                }
                Tensor::matrix(r, len, d)?
            }
        };
        Ok(self.push(t, Op::Slice(a, axis, start), &[a]))
    }

    pub fn element(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let (r, c) = self.rc(a);
        if row >= r || col >= c {
            return Err(Error::Usage(format!(
                "element ({row}, {col}) out of range for shape {:?}",
                self.shape(a)
            )));
        }
        let v = self.value(a).get(row, col);
        Ok(self.push(Tensor::scalar(v), Op::Element(a, row * c + col), &[a]))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::Leaf, &[])
    }

    /// One GRU direction over the rows of `x` (see [`super::gru`] for the cell).
    pub fn gru(&mut self, x: Var, w: Var, u: Var, b: Var, reverse: bool) -> Result<Var> {
        let (steps, input) = self.rc(x);
        let (w_in, g3) = self.rc(w);
        let hidden = g3 / 3;
        if w_in != input || g3 % 3 != 0 {
            return Err(Error::shape("gru input weights", self.shape(x), self.shape(w)));
        }
        if self.rc(u) != (hidden, g3) {
            return Err(Error::shape("gru recurrent weights", self.shape(w), self.shape(u)));
        }
        if self.rc(b) != (1, g3) {
            return Err(Error::shape("gru bias", self.shape(w), self.shape(b)));
        }
        let dims = GruDims {
            steps,
            input,
            hidden,
            reverse,
        };
        let (out, cache) = gru::forward(
            &dims,
            self.value(x).data(),
            self.value(w).data(),
            self.value(u).data(),
            self.value(b).data(),
        );
        let t = Tensor::matrix(steps, hidden, out)?;
        Ok(self.push(
            t,
            Op::Gru {
                x,
                w,
                u,
                b,
                reverse,
                cache,
            },
            &[x, w, u, b],
        ))
    }

    /// Reverse accumulation from a scalar `loss` to every tracked node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::gradients`] and adds parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore<F>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, t: Tensor<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce() -> Tensor<F>) {
        if self.needs(v) {
            let t = f();
            self.acc(grads, v, t);
        }
    }

    fn unbcast(&self, g: &Tensor<F>, target: Var, mode: Bcast) -> Tensor<F> {
        let (r, c) = g.rc();
        match mode {
            Bcast::Same => g.clone(),
            Bcast::Scalar => Tensor::scalar(g.data().iter().copied().sum()),
            Bcast::Row => {
                let mut out = vec![F::zero(); c];
                for i in 0..r {
                    for (o, &v) in out.iter_mut().zip(g.row_slice(i)) {
                        *o = *o + v;
                    }
                }
                Tensor::new(self.shape(target).to_vec(), out).expect("row shape")
            }
            Bcast::Col => {
                let out = (0..r).map(|i| g.row_slice(i).iter().copied().sum()).collect();
                Tensor::new(self.shape(target).to_vec(), out).expect("col shape")
            }
        }
    }

    fn bcast_index(mode: Bcast, i: usize, j: usize, c: usize) -> usize {
        match mode {
            Bcast::Same => i * c + j,
            Bcast::Row => j,
            Bcast::Col => i,
            Bcast::Scalar => 0,
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (r, k) = self.rc(a);
                let (_, c) = self.rc(b);
                self.acc_with(grads, a, || {
                    let mut d = vec![F::zero(); r * k];
                    matmul_bt_into(g.data(), self.value(b).data(), r, c, k, &mut d);
                    Tensor::matrix(r, k, d).expect("shape")
                });
                self.acc_with(grads, b, || {
                    let mut d = vec![F::zero(); k * c];
                    matmul_at_into(self.value(a).data(), g.data(), r, k, c, &mut d);
                    Tensor::matrix(k, c, d).expect("shape")
                });
            }
            &Op::MatMulBt(a, b) => {
                // y = a bᵀ, a: r x k, b: c x k
                let (r, k) = self.rc(a);
                let (c, _) = self.rc(b);
                self.acc_with(grads, a, || {
                    let mut d = vec![F::zero(); r * k];
                    matmul_into(g.data(), self.value(b).data(), r, c, k, &mut d);
                    Tensor::matrix(r, k, d).expect("shape")
                });
                self.acc_with(grads, b, || {
                    let mut d = vec![F::zero(); c * k];
                    matmul_at_into(g.data(), self.value(a).data(), r, c, k, &mut d);
                    Tensor::matrix(c, k, d).expect("shape")
                });
            }
            &Op::Transpose(a) => self.acc(grads, a, g.transpose()),
            &Op::Add(a, b, m) => {
                self.acc_with(grads, a, || g.clone());
                self.acc_with(grads, b, || self.unbcast(g, b, m));
            }
            &Op::Sub(a, b, m) => {
                self.acc_with(grads, a, || g.clone());
                self.acc_with(grads, b, || self.unbcast(&g.map(|v| -v), b, m));
            }
            &Op::Mul(a, b, m) => {
                let (r, c) = g.rc();
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.acc_with(grads, a, || {
                    let mut d = Vec::with_capacity(r * c);
                    for ii in 0..r {
                        for j in 0..c {
                            d.push(g.data()[ii * c + j] * bv[Self::bcast_index(m, ii, j, c)]);
                        }
                    }
                    Tensor::matrix(r, c, d).expect("shape")
                });
                self.acc_with(grads, b, || {
                    let full: Vec<F> = g.data().iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    self.unbcast(&Tensor::matrix(r, c, full).expect("shape"), b, m)
                });
            }
            &Op::Scale(a, k) => self.acc_with(grads, a, || g.map(|v| v * k)),
            &Op::AddScalar(a) => self.acc_with(grads, a, || g.clone()),
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.rc(p);
                    let (_, gc) = g.rc();
                    if self.needs(p) {
                        let t = match axis {
                            Axis::Rows => Tensor::matrix(r, c, g.data()[offset * c..(offset + r) * c].to_vec()),
                            Axis::Cols => {
                                let mut d = Vec::with_capacity(r * c);
                                for ii in 0..r {
                                    d.extend_from_slice(&g.data()[ii * gc + offset..ii * gc + offset + c]);
                                }
                                Tensor::matrix(r, c, d)
                            }
                        }
                        .expect("shape");
                        self.acc(grads, p, t);
                    }
                    offset += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            &Op::Relu(a) => self.acc_with(grads, a, || {
                let x = self.value(a).data();
                let d = g.data().iter().zip(x).map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() }).collect();
                Tensor::new(g.shape().to_vec(), d).expect("shape")
            }),
            &Op::Tanh(a) => self.acc_with(grads, a, || {
                let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * (F::one() - yv * yv)).collect();
                Tensor::new(g.shape().to_vec(), d).expect("shape")
            }),
            &Op::Sigmoid(a) => self.acc_with(grads, a, || {
                let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv * (F::one() - yv)).collect();
                Tensor::new(g.shape().to_vec(), d).expect("shape")
            }),
            &Op::Exp(a) => self.acc_with(grads, a, || {
                let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
                Tensor::new(g.shape().to_vec(), d).expect("shape")
            }),
            &Op::Ln(a) => self.acc_with(grads, a, || {
                let x = self.value(a).data();
                let d = g.data().iter().zip(x).map(|(&gv, &xv)| gv / xv).collect();
                Tensor::new(g.shape().to_vec(), d).expect("shape")
            }),
            &Op::Softmax(a, axis) => self.acc_with(grads, a, || {
                let (r, c) = y.rc();
                let lanes = Lanes::new(r, c, axis);
                let mut d = vec![F::zero(); r * c];
                for l in 0..lanes.count {
                    let mut s = F::zero();
                    for k in 0..lanes.len {
                        let ix = lanes.at(l, k);
                        s = s + g.data()[ix] * y.data()[ix];
                    }
                    for k in 0..lanes.len {
                        let ix = lanes.at(l, k);
                        d[ix] = y.data()[ix] * (g.data()[ix] - s);
                    }
                }
                Tensor::new(y.shape().to_vec(), d).expect("shape")
            }),
            &Op::LogSoftmax(a, axis) => self.acc_with(grads, a, || {
                let (r, c) = y.rc();
                let lanes = Lanes::new(r, c, axis);
                let mut d = vec![F::zero(); r * c];
                for l in 0..lanes.count {
                    let mut s = F::zero();
                    for k in 0..lanes.len {
                        s = s + g.data()[lanes.at(l, k)];
                    }
                    for k in 0..lanes.len {
                        let ix = lanes.at(l, k);
                        d[ix] = g.data()[ix] - y.data()[ix].exp() * s;
                    }
                }
                Tensor::new(y.shape().to_vec(), d).expect("shape")
            }),
            &Op::LogSumExp(a, axis) => self.acc_with(grads, a, || {
                let x = self.value(a);
                let (r, c) = x.rc();
                let lanes = Lanes::new(r, c, axis);
                let mut d = vec![F::zero(); r * c];
                for l in 0..lanes.count {
                    let z = y.data()[l];
                    for k in 0..lanes.len {
                        let ix = lanes.at(l, k);
                        d[ix] = g.data()[l] * (x.data()[ix] - z).exp();
                    }
                }
                Tensor::new(x.shape().to_vec(), d).expect("shape")
            }),
            &Op::Sum(a, axis) | &Op::Mean(a, axis) => self.acc_with(grads, a, || {
                let (r, c) = self.rc(a);
                let lanes = Lanes::new(r, c, axis);
                let k = if matches!(node.op, Op::Mean(..)) {
                    F::one() / F::from_f64(lanes.len as f64)
                } else {
                    F::one()
                };
                let mut d = vec![F::zero(); r * c];
                for l in 0..lanes.count {
                    for kk in 0..lanes.len {
                        d[lanes.at(l, kk)] = g.data()[l] * k;
                    }
                }
                Tensor::matrix(r, c, d).expect("shape")
            }),
            Op::Extremum(a, idx, _) => self.acc_with(grads, *a, || {
                let mut t = Tensor::zeros(self.shape(*a));
                for (l, &ix) in idx.iter().enumerate() {
                    t.data_mut()[ix] = t.data()[ix] + g.data()[l];
                }
                t
            }),
            &Op::Std(a, axis) => self.acc_with(grads, a, || {
                let x = self.value(a);
                let (r, c) = x.rc();
                let lanes = Lanes::new(r, c, axis);
                let n = F::from_f64(lanes.len as f64);
                let mut d = vec![F::zero(); r * c];
                for l in 0..lanes.count {
                    let sd = y.data()[l];
                    if sd <= F::zero() {
                        continue;
                    }
                    let mut mean = F::zero();
                    for k in 0..lanes.len {
                        mean = mean + x.data()[lanes.at(l, k)];
                    }
                    mean = mean / n;
                    for k in 0..lanes.len {
                        let ix = lanes.at(l, k);
                        d[ix] = g.data()[l] * (x.data()[ix] - mean) / (n * sd);
                    }
                }
                Tensor::matrix(r, c, d).expect("shape")
            }),
            &Op::SumAll(a) => self.acc_with(grads, a, || Tensor::filled(self.shape(a), g.item())),
            &Op::Dot(a, b) => {
                let k = g.item();
                self.acc_with(grads, a, || self.value(b).map(|v| v * k));
                self.acc_with(grads, b, || self.value(a).map(|v| v * k));
            }
            Op::Dropout(a, mask) => self.acc_with(grads, *a, || {
                let d = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                Tensor::new(g.shape().to_vec(), d).expect("shape")
            }),
            &Op::Slice(a, axis, start) => self.acc_with(grads, a, || {
                let (r, c) = self.rc(a);
                let mut t = Tensor::zeros(&[r, c]);
                let (gr, gc) = g.rc();
                for ii in 0..gr {
                    for j in 0..gc {
                        let (si, sj) = match axis {
                            Axis::Rows => (ii + start, j),
                            Axis::Cols => (ii, j + start),
                        };
                        t.data_mut()[si * c + sj] = g.data()[ii * gc + j];
                    }
                }
                t
            }),
            &Op::Element(a, flat) => self.acc_with(grads, a, || {
                let mut t = Tensor::zeros(self.shape(a));
                t.data_mut()[flat] = g.item();
                t
            }),
            Op::Gru {
                x,
                w,
                u,
                b,
                reverse,
                cache,
            } => {
                let (steps, input) = self.rc(*x);
                let (hidden, _) = self.rc(*u);
                let dims = GruDims {
                    steps,
                    input,
                    hidden,
                    reverse: *reverse,
                };
                let gg = gru::backward(
                    &dims,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    self.value(*u).data(),
                    cache,
                    g.data(),
                );
                let shape_of = |v: Var| self.shape(v).to_vec();
                self.acc_with(grads, *x, || Tensor::new(shape_of(*x), gg.dx).expect("shape"));
                self.acc_with(grads, *w, || Tensor::new(shape_of(*w), gg.dw).expect("shape"));
                self.acc_with(grads, *u, || Tensor::new(shape_of(*u), gg.du).expect("shape"));
                self.acc_with(grads, *b, || Tensor::new(shape_of(*b), gg.db).expect("shape"));
            }
        }
    }
}
