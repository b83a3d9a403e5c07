//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node appended to a tape. Node
//! indices are therefore already in topological order and [`Graph::backward`]
//! is a single reverse sweep. A graph lives for one forward/backward pass and
//! is then dropped; parameters are copied in as leaves at the start of each
//! pass.
//!
//! Operations cover exactly the shapes the trajectory model needs: rank-2
//! matrices, row-broadcast biases, column-broadcast scaling, and scalars.

pub mod kernels;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of a backward rule, used to prove that gradient
/// checks fail loudly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales every tanh derivative by 1.01.
    TanhSlope,
}

/// Variables of one gated recurrent cell, as loaded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_n: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_n: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_n: Var,
}

#[derive(Debug)]
struct GruSave<T> {
    x: Var,
    h: Var,
    p: GruVars,
    z: Vec<T>,
    r: Vec<T>,
    cand: Vec<T>,
    rh: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Tile(Var, usize),
    Unstack(Var, usize),
    RowMin(Var, Vec<usize>),
    Gru(Box<GruSave<T>>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn map<T: Real>(x: &[T], f: impl Fn(f64) -> f64) -> Vec<T> {
    x.iter().map(|v| T::of_f64(f(v.as_f64()))).collect()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Which branch every non-smooth node took: the sign of each rectifier
    /// and square-root input and each row-minimum's index. Two evaluations
    /// with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::Sqrt(x) => {
                    out.extend(self.nodes[x.0].value.data().iter().map(|v| usize::from(*v > T::zero())))
                }
                Op::RowMin(_, idx) => out.extend_from_slice(idx),
                _ => {}
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(&[rows, cols]))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => dim_err(op, format!("expected a matrix, got shape {:?}", s)),
        }
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return dim_err("matmul", format!("inner extents {} vs {}", k, k2));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(x, "affine")?;
        let (k2, n) = self.dims(w, "affine")?;
        if k != k2 || self.shape(b) != [n] {
            return dim_err(
                "affine",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            );
        }
        let mut out = kernels::matmul(self.value(x).data(), self.value(w).data(), m, k, n);
        let bias = self.value(b).data();
        for row in out.chunks_mut(n.max(1)) {
            kernels::add_into(row, bias);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Affine(x, w, b), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Scales row `i` of `x[M×N]` by `s[i]`, with `s` shaped M×1.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "mul_col")?;
        if self.shape(s) != [m, 1] {
            return dim_err("mul_col", format!("scale shape {:?}", self.shape(s)));
        }
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |&v| v * c))
            .collect();
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MulCol(x, s), ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op<T>) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), map(v.data(), f)).expect("same shape");
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0).sqrt(), Op::Sqrt(x))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "softmax")?;
        if n == 0 {
            return dim_err("softmax", "empty axis");
        }
        let mut out = Vec::with_capacity(m * n);
        let mut buf = vec![0.0f64; n];
        for row in self.value(x).data().chunks(n) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (b, v) in buf.iter_mut().zip(row) {
                *b = (v.as_f64() - max).exp();
                total += *b;
            }
            out.extend(buf.iter().map(|&b| T::of_f64(b / total)));
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(x), ng))
    }

    /// Concatenation of matrices along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let (m, _) = self.dims(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat")?;
            if r != m {
                return dim_err("concat", format!("row counts {} vs {}", m, r));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "slice_cols")?;
        if start > end || end > n {
            return dim_err("slice_cols", format!("{}..{} of {}", start, end, n));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols(x, start), ng))
    }

    /// Row sums, M×N → M×1.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "row_sum")?;
        let out = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .take(m)
            .map(|r| T::of_f64(r.iter().map(|v| v.as_f64()).sum()))
            .collect::<Vec<_>>();
        let out = if n == 0 { vec![T::zero(); m] } else { out };
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, 1], out)?, Op::RowSum(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(T::of_f64(s)), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return dim_err("mean", "empty tensor");
        }
        let s: f64 = v.data().iter().map(|v| v.as_f64()).sum::<f64>() / v.len() as f64;
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(T::of_f64(s)), Op::Mean(x), ng))
    }

    /// Stacks `k` copies of `x[M×N]` vertically: row `j·M + i` is row `i`.
    pub fn tile(&mut self, x: Var, k: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "tile")?;
        if k == 1 {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(k * m * n);
        for _ in 0..k {
            out.extend_from_slice(src);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![k * m, n], out)?, Op::Tile(x, k), ng))
    }

    /// Inverse layout of [`Graph::tile`]: `x[(k·M)×N]` → `[M×(k·N)]`, placing
    /// block `j` in columns `j·N..(j+1)·N`.
    pub fn unstack(&mut self, x: Var, k: usize) -> Result<Var> {
        let (km, n) = self.dims(x, "unstack")?;
        if k == 0 || km % k != 0 {
            return dim_err("unstack", format!("{} rows not divisible by {}", km, k));
        }
        let m = km / k;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(km * n);
        for i in 0..m {
            for j in 0..k {
                let r = j * m + i;
                out.extend_from_slice(&src[r * n..(r + 1) * n]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, k * n], out)?, Op::Unstack(x, k), ng))
    }

    /// Minimum of every row, M×N → M×1. Ties resolve to the lowest column.
    pub fn row_min(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let (m, n) = self.dims(x, "row_min")?;
        if n == 0 {
            return dim_err("row_min", "empty rows");
        }
        let mut vals = Vec::with_capacity(m);
        let mut idx = Vec::with_capacity(m);
        for row in self.value(x).data().chunks(n) {
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v < row[best] {
                    best = j;
                }
            }
            idx.push(best);
            vals.push(row[best]);
        }
        let ng = self.ng(x);
        let v = self.push(Tensor::new(vec![m, 1], vals)?, Op::RowMin(x, idx.clone()), ng);
        Ok((v, idx))
    }

    /// One gated recurrent step:
    /// `z = σ(x·W_z + h·U_z + b_z)`, `r = σ(x·W_r + h·U_r + b_r)`,
    /// `ĥ = tanh(x·W_n + (r⊙h)·U_n + b_n)`, `h' = (1−z)⊙h + z⊙ĥ`.
    pub fn gru_cell(&mut self, x: Var, h: Var, p: &GruVars) -> Result<Var> {
        let (bx, d) = self.dims(x, "gru_cell")?;
        let (bh, hs) = self.dims(h, "gru_cell")?;
        let ok = bx == bh
            && [p.w_z, p.w_r, p.w_n].iter().all(|&w| self.shape(w) == [d, hs])
            && [p.u_z, p.u_r, p.u_n].iter().all(|&u| self.shape(u) == [hs, hs])
            && [p.b_z, p.b_r, p.b_n].iter().all(|&b| self.shape(b) == [hs]);
        if !ok {
            return dim_err(
                "gru_cell",
                format!(
                    "x {:?}, h {:?}, W {:?}, U {:?}, b {:?}",
                    self.shape(x),
                    self.shape(h),
                    self.shape(p.w_z),
                    self.shape(p.u_z),
                    self.shape(p.b_z)
                ),
            );
        }
        let b = bx;
        let xv = self.value(x).data();
        let hv = self.value(h).data();
        let pre = |w: Var, u_in: &[T], u: Var, bias: Var| -> Vec<f64> {
            let a = kernels::matmul(xv, self.value(w).data(), b, d, hs);
            let c = kernels::matmul(u_in, self.value(u).data(), b, hs, hs);
            let bb = self.value(bias).data();
            a.iter()
                .zip(&c)
                .enumerate()
                .map(|(i, (p, q))| p.as_f64() + q.as_f64() + bb[i % hs].as_f64())
                .collect()
        };
        let z: Vec<T> = pre(p.w_z, hv, p.u_z, p.b_z)
            .into_iter()
            .map(|v| T::of_f64(sigmoid(v)))
            .collect();
        let r: Vec<T> = pre(p.w_r, hv, p.u_r, p.b_r)
            .into_iter()
            .map(|v| T::of_f64(sigmoid(v)))
            .collect();
        let rh: Vec<T> = r.iter().zip(hv).map(|(&a, &c)| a * c).collect();
        let cand: Vec<T> = pre(p.w_n, &rh, p.u_n, p.b_n)
            .into_iter()
            .map(|v| T::of_f64(v.tanh()))
            .collect();
        let out: Vec<T> = (0..b * hs)
            .map(|i| (T::one() - z[i]) * hv[i] + z[i] * cand[i])
            .collect();
        let ng = self.ng(x)
            || self.ng(h)
            || [p.w_z, p.w_r, p.w_n, p.u_z, p.u_r, p.u_n, p.b_z, p.b_r, p.b_n]
                .iter()
                .any(|&v| self.ng(v));
        let save = GruSave {
            x,
            h,
            p: *p,
            z,
            r,
            cand,
            rh,
        };
        Ok(self.push(Tensor::new(vec![b, hs], out)?, Op::Gru(Box::new(save)), ng))
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.ng(loss) {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let tanh_slope = if self.fault == Some(Fault::TanhSlope) { 1.01 } else { 1.0 };

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(existing) => kernels::add_into(existing.data_mut(), &g),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            let node = &self.nodes[i];
            let mut acc = Acc {
                grads: &mut grads,
                nodes: &self.nodes,
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::MatMul(a, b) => {
                    let (m, k) = acc.dims(*a);
                    let nn = acc.dims(*b).1;
                    if acc.ng(*a) {
                        let da = kernels::matmul_nt(&g, acc.val(*b), m, nn, k);
                        acc.add(*a, &da);
                    }
                    if acc.ng(*b) {
                        let db = kernels::matmul_tn(acc.val(*a), &g, m, k, nn);
                        acc.add(*b, &db);
                    }
                }
                Op::Affine(x, w, b) => {
                    let (m, k) = acc.dims(*x);
                    let nn = acc.dims(*w).1;
                    if acc.ng(*x) {
                        let dx = kernels::matmul_nt(&g, acc.val(*w), m, nn, k);
                        acc.add(*x, &dx);
                    }
                    if acc.ng(*w) {
                        let dw = kernels::matmul_tn(acc.val(*x), &g, m, k, nn);
                        acc.add(*w, &dw);
                    }
                    if acc.ng(*b) {
                        acc.add(*b, &kernels::col_sums(&g, m, nn));
                    }
                }
                Op::Add(a, b) => {
                    acc.add(*a, &g);
                    acc.add(*b, &g);
                }
                Op::Sub(a, b) => {
                    acc.add(*a, &g);
                    if acc.ng(*b) {
                        let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                        acc.add(*b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if acc.ng(*a) {
                        let d: Vec<T> = g.iter().zip(acc.val(*b)).map(|(&p, &q)| p * q).collect();
                        acc.add(*a, &d);
                    }
                    if acc.ng(*b) {
                        let d: Vec<T> = g.iter().zip(acc.val(*a)).map(|(&p, &q)| p * q).collect();
                        acc.add(*b, &d);
                    }
                }
                Op::MulCol(x, s) => {
                    let (m, nn) = acc.dims(*x);
                    if acc.ng(*x) {
                        let sv = acc.val(*s);
                        let d: Vec<T> = (0..m * nn).map(|j| g[j] * sv[j / nn]).collect();
                        acc.add(*x, &d);
                    }
                    if acc.ng(*s) {
                        let xv = acc.val(*x);
                        let d: Vec<T> = (0..m)
                            .map(|r| {
                                T::of_f64(
                                    (0..nn)
                                        .map(|c| (g[r * nn + c] * xv[r * nn + c]).as_f64())
                                        .sum(),
                                )
                            })
                            .collect();
                        acc.add(*s, &d);
                    }
                }
                Op::Scale(x, c) => {
                    let c = T::of_f64(*c);
                    let d: Vec<T> = g.iter().map(|&v| v * c).collect();
                    acc.add(*x, &d);
                }
                Op::AddScalar(x) => acc.add(*x, &g),
                Op::Relu(x) => {
                    let d: Vec<T> = g
                        .iter()
                        .zip(acc.val(*x))
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc.add(*x, &d);
                }
                Op::Tanh(x) => {
                    let slope = T::of_f64(tanh_slope);
                    let d: Vec<T> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * (T::one() - y * y) * slope)
                        .collect();
                    acc.add(*x, &d);
                }
                Op::Sigmoid(x) => {
                    let d: Vec<T> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y * (T::one() - y))
                        .collect();
                    acc.add(*x, &d);
                }
                Op::Exp(x) => {
                    let d: Vec<T> = g.iter().zip(node.value.data()).map(|(&gv, &y)| gv * y).collect();
                    acc.add(*x, &d);
                }
                Op::Square(x) => {
                    let two = T::of_f64(2.0);
                    let d: Vec<T> = g.iter().zip(acc.val(*x)).map(|(&gv, &v)| gv * two * v).collect();
                    acc.add(*x, &d);
                }
                Op::Sqrt(x) => {
                    // Subgradient 0 at the origin.
                    let d: Vec<T> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| {
                            if y > T::zero() {
                                gv / (T::of_f64(2.0) * y)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    acc.add(*x, &d);
                }
                Op::Softmax(x) => {
                    let (_, nn) = acc.dims(*x);
                    let y = node.value.data();
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(nn).zip(g.chunks(nn)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| (*a * *b).as_f64()).sum();
                        d.extend(
                            yr.iter()
                                .zip(gr)
                                .map(|(&a, &b)| T::of_f64(a.as_f64() * (b.as_f64() - dot))),
                        );
                    }
                    acc.add(*x, &d);
                }
                Op::Concat(parts) => {
                    let (m, total) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = acc.dims(p).1;
                        if acc.ng(p) {
                            let mut d = Vec::with_capacity(m * w);
                            for r in 0..m {
                                d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            acc.add(p, &d);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let (m, nn) = acc.dims(*x);
                    let w = node.value.dims2()?.1;
                    let mut d = vec![T::zero(); m * nn];
                    for r in 0..m {
                        d[r * nn + start..r * nn + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    acc.add(*x, &d);
                }
                Op::RowSum(x) => {
                    let (m, nn) = acc.dims(*x);
                    let d: Vec<T> = (0..m * nn).map(|j| g[j / nn]).collect();
                    acc.add(*x, &d);
                }
                Op::Sum(x) => {
                    let len = acc.len(*x);
                    acc.add(*x, &vec![g[0]; len]);
                }
                Op::Mean(x) => {
                    let len = acc.len(*x);
                    acc.add(*x, &vec![T::of_f64(g[0].as_f64() / len as f64); len]);
                }
                Op::Tile(x, k) => {
                    let len = acc.len(*x);
                    let mut d = vec![0.0f64; len];
                    for j in 0..*k {
                        for (o, v) in d.iter_mut().zip(&g[j * len..(j + 1) * len]) {
                            *o += v.as_f64();
                        }
                    }
                    let d: Vec<T> = d.into_iter().map(T::of_f64).collect();
                    acc.add(*x, &d);
                }
                Op::Unstack(x, k) => {
                    let (km, nn) = acc.dims(*x);
                    let m = km / k;
                    let mut d = vec![T::zero(); km * nn];
                    for i in 0..m {
                        for j in 0..*k {
                            let r = j * m + i;
                            let src = (i * k + j) * nn;
                            d[r * nn..(r + 1) * nn].copy_from_slice(&g[src..src + nn]);
                        }
                    }
                    acc.add(*x, &d);
                }
                Op::RowMin(x, idx) => {
                    let (m, nn) = acc.dims(*x);
                    let mut d = vec![T::zero(); m * nn];
                    for (r, &j) in idx.iter().enumerate() {
                        d[r * nn + j] = g[r];
                    }
                    acc.add(*x, &d);
                }
                Op::Gru(s) => gru_backward(&mut acc, s, &g, tanh_slope),
            }
        }

        for n in &self.nodes {
            if let Some(gr) = &n.grad {
                if !gr.is_finite() {
                    return Err(Error::NonFinite("gradient of a leaf".into()));
                }
            }
        }
        Ok(())
    }
}

struct Acc<'a, T: Real> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<T: Real> Acc<'_, T> {
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    fn add(&mut self, v: Var, d: &[T]) {
        if !self.ng(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => kernels::add_into(existing, d),
            slot @ None => *slot = Some(d.to_vec()),
        }
    }
}

fn gru_backward<T: Real>(acc: &mut Acc<'_, T>, s: &GruSave<T>, g: &[T], tanh_slope: f64) {
    let (b, d) = acc.dims(s.x);
    let hs = acc.dims(s.h).1;
    let one = T::one();
    let hv = acc.val(s.h).to_vec();
    let xv = acc.val(s.x).to_vec();
    let slope = T::of_f64(tanh_slope);

    // h' = (1−z)⊙h + z⊙ĥ
    let mut dh: Vec<T> = g.iter().zip(&s.z).map(|(&gv, &z)| gv * (one - z)).collect();
    let da_z: Vec<T> = (0..b * hs)
        .map(|i| g[i] * (s.cand[i] - hv[i]) * s.z[i] * (one - s.z[i]))
        .collect();
    let da_n: Vec<T> = (0..b * hs)
        .map(|i| g[i] * s.z[i] * (one - s.cand[i] * s.cand[i]) * slope)
        .collect();

    // candidate path
    let mut dx = kernels::matmul_nt(&da_n, acc.val(s.p.w_n), b, hs, d);
    if acc.ng(s.p.w_n) {
        let dw = kernels::matmul_tn(&xv, &da_n, b, d, hs);
        acc.add(s.p.w_n, &dw);
    }
    if acc.ng(s.p.u_n) {
        let du = kernels::matmul_tn(&s.rh, &da_n, b, hs, hs);
        acc.add(s.p.u_n, &du);
    }
    acc.add(s.p.b_n, &kernels::col_sums(&da_n, b, hs));
    let d_rh = kernels::matmul_nt(&da_n, acc.val(s.p.u_n), b, hs, hs);
    let da_r: Vec<T> = (0..b * hs)
        .map(|i| d_rh[i] * hv[i] * s.r[i] * (one - s.r[i]))
        .collect();
    for i in 0..b * hs {
        dh[i] = dh[i] + d_rh[i] * s.r[i];
    }

    for (da, w, u, bias) in [
        (&da_z, s.p.w_z, s.p.u_z, s.p.b_z),
        (&da_r, s.p.w_r, s.p.u_r, s.p.b_r),
    ] {
        kernels::add_into(&mut dx, &kernels::matmul_nt(da, acc.val(w), b, hs, d));
        kernels::add_into(&mut dh, &kernels::matmul_nt(da, acc.val(u), b, hs, hs));
        if acc.ng(w) {
            let dw = kernels::matmul_tn(&xv, da, b, d, hs);
            acc.add(w, &dw);
        }
        if acc.ng(u) {
            let du = kernels::matmul_tn(&hv, da, b, hs, hs);
            acc.add(u, &du);
        }
        acc.add(bias, &kernels::col_sums(da, b, hs));
    }
    acc.add(s.x, &dx);
    acc.add(s.h, &dh);
}

#[cfg(test)]
mod tests;
