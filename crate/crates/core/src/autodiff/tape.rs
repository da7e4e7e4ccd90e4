use std::collections::HashMap;

use super::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into, Scalar, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to vector norms in [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add { a: Var, b: Var, row: bool },
    Mul { a: Var, b: Var, row: bool },
    DivScalar(Var, T),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SegmentSum {
        values: Var,
        ids: Vec<usize>,
        counts: Option<Vec<usize>>,
    },
    GatherRows { src: Var, idx: Vec<usize> },
    L2Normalize { input: Var, norms: Vec<T> },
    RowDot(Var, Var),
    Concat(Vec<Var>),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: bool,
}

/// Eager reverse-mode tape. Every op computes its value immediately and
/// records how to push gradients back to its inputs.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: bool,
}

/// Gradients of a scalar with respect to every parameter leaf on the tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_var: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter leaf. Panics on a var that is not a parameter.
    pub fn get(&self, var: Var) -> &Tensor<T> {
        self.by_var
            .get(&var)
            .unwrap_or_else(|| panic!("no gradient recorded for {var:?}; not a parameter"))
    }

    pub fn try_get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&var)
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: false,
        }
    }

    /// Corrupts the matmul backward rule. Used only to prove the gradient
    /// checker catches a broken engine.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self) {
        self.fault = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims(a)?;
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    /// `a` and `b` must share a shape, or `b` must be a `1×n` row applied to
    /// every row of an `m×n` matrix `a`.
    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        match (sa, sb) {
            (&[_, n], &[1, n2]) if n == n2 => Ok(true),
            _ => Err(Error::shape(op, sa, sb)),
        }
    }

    fn binary(&mut self, a: Var, b: Var, row: bool, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let n = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if row { bv.data()[i % n] } else { bv.data()[i] };
                f(x, y)
            })
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let row = self.broadcast_kind("add", a, b)?;
        let value = self.binary(a, b, row, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b, row }, rg))
    }

    /// Elementwise product, with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let row = self.broadcast_kind("mul", a, b)?;
        let value = self.binary(a, b, row, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b, row }, rg))
    }

    pub fn div_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        if s == T::zero() {
            return Err(Error::Contract("division by zero scalar".into()));
        }
        let value = self.value(a).map(|x| x / s);
        let rg = self.rg(a);
        Ok(self.push(value, Op::DivScalar(a, s), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    fn segment(&mut self, values: Var, ids: &[usize], num_segments: usize, mean: bool) -> Result<Var> {
        let (m, n) = self.dims(values)?;
        if ids.len() != m {
            return Err(Error::shape("segment_sum", &[m, n], &[ids.len()]));
        }
        // accumulate in f64 and round once; an f64 sum of a handful of f32
        // rows is exact unless their magnitudes span ~2^29, so the rounded
        // result does not depend on row order (exact encoder equivariance)
        let mut acc = vec![0.0f64; num_segments * n];
        let mut counts = vec![0usize; num_segments];
        let src = self.value(values).data();
        for (r, &s) in ids.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::Index {
                    op: "segment_sum",
                    index: s,
                    bound: num_segments,
                });
            }
            counts[s] += 1;
            let arow = &mut acc[s * n..(s + 1) * n];
            for (a, &v) in arow.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *a += v.to_f64_lossless();
            }
        }
        if mean {
            for (s, &c) in counts.iter().enumerate() {
                if c == 0 {
                    return Err(Error::Contract(format!("segment_mean: segment {s} is empty")));
                }
                for a in &mut acc[s * n..(s + 1) * n] {
                    *a /= c as f64;
                }
            }
        }
        let out = acc.into_iter().map(T::of).collect();
        let rg = self.rg(values);
        let op = Op::SegmentSum {
            values,
            ids: ids.to_vec(),
            counts: mean.then_some(counts),
        };
        Ok(self.push(Tensor::matrix(num_segments, n, out), op, rg))
    }

    /// Sums rows of `values` into `num_segments` output rows by `segment_ids`.
    pub fn segment_sum(&mut self, values: Var, segment_ids: &[usize], num_segments: usize) -> Result<Var> {
        self.segment(values, segment_ids, num_segments, false)
    }

    /// Per-segment row mean; every segment must be non-empty.
    pub fn segment_mean(&mut self, values: Var, segment_ids: &[usize], num_segments: usize) -> Result<Var> {
        self.segment(values, segment_ids, num_segments, true)
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, _) = self.dims(src)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound: m,
            });
        }
        let value = self.value(src).gather_rows(idx);
        let rg = self.rg(src);
        Ok(self.push(value, Op::GatherRows { src, idx: idx.to_vec() }, rg))
    }

    /// Scales each row to unit length, with the norm clamped below at [`NORM_EPS`].
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let eps = T::of(NORM_EPS);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = if norm > eps { norm } else { eps };
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / denom;
            }
            norms.push(norm);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, n, out), Op::L2Normalize { input: a, norms }, rg))
    }

    /// Row-wise dot product of two `m×n` matrices, giving `m×1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("dot", self.shape(a), self.shape(b)));
        }
        let (m, n) = self.dims(a)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|i| {
                x[i * n..(i + 1) * n]
                    .iter()
                    .zip(&y[i * n..(i + 1) * n])
                    .map(|(&p, &q)| p * q)
                    .sum()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, 1, out), Op::RowDot(a, b), rg))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (m, _) = self.dims(first)?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != m {
                return Err(Error::shape("concat", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, total, out), Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Summed softmax cross-entropy: `Σ_i (logsumexp(z_i) − z_{i,t_i})`.
    /// Evaluated with max-shifted exponentials.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = self.dims(logits)?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", &[m, c], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); m * c];
        let mut total = T::zero();
        for i in 0..m {
            let row = &z[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let se: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + se.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total = total + (lse - row[targets[i]]);
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total), op, rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), T::one()));
        let mut by_var = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.param {
                by_var.insert(Var(i), g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.param {
                by_var
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_var })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.shape(v))
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let mut da = self.zeros_like(*a);
                    matmul_bt_acc(g.data(), self.value(*b).data(), da.data_mut(), m, k, n);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = self.zeros_like(*b);
                    matmul_at_acc(self.value(*a).data(), g.data(), db.data_mut(), m, k, n);
                    if self.fault {
                        db = db.map(|x| x + x);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add { a, b, row } => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let db = if *row { column_sums(g) } else { g.clone() };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b, row } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.cols();
                if self.rg(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * if *row { bv.data()[i % n] } else { bv.data()[i] })
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data).unwrap());
                }
                if self.rg(*b) {
                    let prod: Vec<T> = g.data().iter().zip(av.data()).map(|(&gi, &x)| gi * x).collect();
                    let prod = Tensor::new(av.shape().to_vec(), prod).unwrap();
                    let db = if *row { column_sums(&prod) } else { prod };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::DivScalar(a, s) => self.accumulate(grads, *a, g.map(|x| x / *s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::Exp(a) => {
                let data = g.data().iter().zip(out.data()).map(|(&gi, &y)| gi * y).collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), data).unwrap());
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let data = g.data().iter().zip(x.data()).map(|(&gi, &xi)| gi / xi).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::SegmentSum { values, ids, counts } => {
                let mut dv = self.zeros_like(*values);
                for (r, &s) in ids.iter().enumerate() {
                    let scale = counts.as_ref().map_or(T::one(), |c| T::one() / T::of(c[s] as f64));
                    for (d, &gi) in dv.row_mut(r).iter_mut().zip(g.row(s)) {
                        *d = gi * scale;
                    }
                }
                self.accumulate(grads, *values, dv);
            }
            Op::GatherRows { src, idx } => {
                let mut ds = self.zeros_like(*src);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &gi) in ds.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d = *d + gi;
                    }
                }
                self.accumulate(grads, *src, ds);
            }
            Op::L2Normalize { input, norms } => {
                let eps = T::of(NORM_EPS);
                let mut dx = self.zeros_like(*input);
                for (i, &norm) in norms.iter().enumerate() {
                    let (gr, yr) = (g.row(i), out.row(i));
                    if norm > eps {
                        let proj: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in dx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *d = (gi - yi * proj) / norm;
                        }
                    } else {
                        for (d, &gi) in dx.row_mut(i).iter_mut().zip(gr) {
                            *d = gi / eps;
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.cols();
                let scaled = |other: &Tensor<T>| {
                    let data = other
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * g.data()[i / n])
                        .collect();
                    Tensor::new(other.shape().to_vec(), data).unwrap()
                };
                if self.rg(*a) {
                    self.accumulate(grads, *a, scaled(bv));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, scaled(av));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (m, c) = self.value(p).dims2().unwrap();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(m * c);
                        for i in 0..m {
                            dp.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(m, c, dp));
                    }
                    offset += c;
                }
            }
            Op::SumAll(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::filled(self.shape(*a), s));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = g.data()[0];
                let c = self.value(*logits).cols();
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] = d[i * c + t] - T::one();
                }
                let d = d.into_iter().map(|x| x * s).collect();
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), d).unwrap());
            }
        }
    }
}

fn column_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let n = t.cols();
    let mut out = vec![T::zero(); n];
    for i in 0..t.rows() {
        for (o, &v) in out.iter_mut().zip(t.row(i)) {
            *o = *o + v;
        }
    }
    Tensor::matrix(1, n, out)
}
