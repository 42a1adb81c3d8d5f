//! Reverse-mode evaluation tape over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only; every op appends a node and
//! returns a [`Var`] handle. [`Graph::backward`] walks the tape once in reverse
//! and returns per-group parameter gradients. Nodes that depend on no trainable
//! parameter are never visited during the backward pass.

use std::collections::HashMap;

use super::params::{Gradients, ParamStore};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Linear(Var, Var, Option<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    LayerNorm(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Sum(Var),
    SumSq(Var),
    SumAbs(Var),
    RowSqNorm(Var),
    RowSum(Var),
    StopGrad,
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
    // LayerNorm: per-row inverse std.
    aux: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<usize, Var>,
    track_params: bool,
}

fn shape_err(map: &str, expected: impl Into<String>, got: (usize, usize)) -> Error {
    Error::Shape {
        map: map.to_string(),
        expected: expected.into(),
        got: format!("{}x{}", got.0, got.1),
    }
}

impl<'p> Graph<'p> {
    /// A graph that records gradients for every unfrozen parameter group.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track_params: true,
        }
    }

    /// A graph where every parameter is treated as a constant.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            track_params: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Parameter leaf by group name. Repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let params = self.params;
        let requires_grad = self.track_params && !params.is_frozen(id);
        self.nodes.push(Node {
            value: Value::Borrowed(&params.group(id).value),
            op: Op::Param(id),
            requires_grad,
            aux: Vec::new(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{}x{}", sa.0, sa.1), sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Forward identity that contributes nothing to any gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::StopGrad, false)
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(row) != (1, n) {
            return Err(shape_err("add_row", format!("1x{n}"), self.shape(row)));
        }
        let mut t = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, b) in t.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    /// Multiplies every row of `x` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(row) != (1, n) {
            return Err(shape_err("mul_row", format!("1x{n}"), self.shape(row)));
        }
        let mut t = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, s) in t.row_mut(i).iter_mut().zip(&r) {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, Op::MulRow(x, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul", format!("{k}xN"), (k2, n)));
        }
        let mut out = Tensor::zeros(m, n);
        matmul_acc(self.value(a), self.value(b), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("Nx{k}"), (n, k2)));
        }
        let mut out = Tensor::zeros(m, n);
        matmul_bt_acc(self.value(a), self.value(b), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    /// `x · Wᵀ + b` with `W: out × in`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, map: &str) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(x), self.shape(w));
        if k != k2 {
            return Err(shape_err(map, format!("Mx{k2}"), (m, k)));
        }
        let mut out = Tensor::zeros(m, n);
        if let Some(b) = b {
            if self.shape(b) != (1, n) {
                return Err(shape_err(map, format!("bias 1x{n}"), self.shape(b)));
            }
            let bias = self.value(b).data();
            for i in 0..m {
                out.row_mut(i).copy_from_slice(bias);
            }
        }
        matmul_bt_acc(self.value(x), self.value(w), &mut out);
        let rg = match b {
            Some(b) => self.rg(&[x, w, b]),
            None => self.rg(&[x, w]),
        };
        Ok(self.push(out, Op::Linear(x, w, b), rg))
    }

    /// Row-wise standardization (no gain or bias).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (m, n) = v.shape();
        let mut out = Tensor::zeros(m, n);
        let mut inv = Vec::with_capacity(m);
        for i in 0..m {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, x) in out.row_mut(i).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv.push(is);
        }
        let rg = self.rg(&[x]);
        let id = self.push(out, Op::LayerNorm(x), rg);
        self.nodes[id.0].aux = inv;
        id
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for i in 0..t.rows() {
            softmax_in_place(t.row_mut(i));
        }
        let rg = self.rg(&[x]);
        self.push(t, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmaxRows(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::validation("concat of zero parts"))?;
        let mut n = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != m {
                return Err(shape_err("concat_cols", format!("{m}xN"), s));
            }
            n += s.1;
        }
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::validation("concat of zero parts"))?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(shape_err("concat_rows", format!("Mx{n}"), v.shape()));
            }
            data.extend_from_slice(v.data());
            m += v.rows();
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_vec(m, n, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > m {
            return Err(shape_err(
                "slice_rows",
                format!("at least {} rows", start + len),
                (m, n),
            ));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(len, n, data)?, Op::SliceRows(x, start), rg))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n {
            return Err(shape_err(
                "slice_cols",
                format!("at least {} cols", start + len),
                (m, n),
            ));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(m, len, data)?, Op::SliceCols(x, start), rg))
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::validation(format!(
                "gather_rows: index {bad} out of range for {m} rows"
            )));
        }
        let v = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_vec(idx.len(), n, data)?,
            Op::GatherRows(table, idx.to_vec()),
            rg,
        ))
    }

    /// Picks `x[i, idx[i]]` for every row, giving an `m × 1` column.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::validation("pick_cols: index list does not fit input"));
        }
        let v = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &j)| v.get(i, j)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::column(data), Op::PickCols(x, idx.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumSq(x), rg)
    }

    pub fn sum_abs(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAbs(x), rg)
    }

    /// Squared L2 norm of every row, as an `m × 1` column.
    pub fn row_sq_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows())
            .map(|i| v.row(i).iter().map(|a| a * a).sum())
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::column(data), Op::RowSqNorm(x), rg)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::column(data), Op::RowSum(x), rg)
    }

    /// Gradients of the scalar `loss` with respect to every parameter group.
    /// Frozen groups (and all groups in an inference graph) get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(shape_err("backward", "1x1 loss", self.shape(loss)));
        }
        let mut out = Gradients::zeros_like(self.params);
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let node = &self.nodes[idx];
        let y = self.value(Var(idx));
        let nodes = &self.nodes;
        let mut acc = |v: Var, t: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64| {
            // f(grad, input, output)
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
                .collect();
            Tensor::from_vec(g.rows(), g.cols(), data).expect("shape preserved")
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Param(id) => out.by_id_mut(*id).add_assign(&g),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|v| -v));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = elementwise(vb, &|gv, bv, _| gv * bv);
                let gb = elementwise(va, &|gv, av, _| gv * av);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| c * v)),
            Op::AddScalar(a) => acc(*a, g),
            Op::AddRow(x, r) => {
                let mut gr = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*r, gr);
                acc(*x, g);
            }
            Op::MulRow(x, r) => {
                let (vx, vr) = (self.value(*x), self.value(*r));
                let mut gx = g.clone();
                let mut gr = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (j, gv) in gx.row_mut(i).iter_mut().enumerate() {
                        gr.data_mut()[j] += *gv * vx.get(i, j);
                        *gv *= vr.data()[j];
                    }
                }
                acc(*x, gx);
                acc(*r, gr);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    matmul_bt_acc(&g, vb, &mut ga);
                    acc(*a, ga);
                }
                if nodes[b.0].requires_grad {
                    let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                    matmul_at_acc(va, &g, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    matmul_acc(&g, vb, &mut ga);
                    acc(*a, ga);
                }
                if nodes[b.0].requires_grad {
                    let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                    matmul_at_acc(&g, va, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Linear(x, w, b) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                if nodes[x.0].requires_grad {
                    let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                    matmul_acc(&g, vw, &mut gx);
                    acc(*x, gx);
                }
                if nodes[w.0].requires_grad {
                    let mut gw = Tensor::zeros(vw.rows(), vw.cols());
                    matmul_at_acc(&g, vx, &mut gw);
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    if nodes[b.0].requires_grad {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        acc(*b, gb);
                    }
                }
            }
            Op::Tanh(a) => acc(*a, elementwise(self.value(*a), &|gv, _, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(a) => acc(*a, elementwise(self.value(*a), &|gv, _, yv| gv * yv * (1.0 - yv))),
            Op::Gelu(a) => acc(*a, elementwise(self.value(*a), &|gv, xv, _| gv * gelu_grad(xv))),
            Op::Relu(a) => acc(
                *a,
                elementwise(self.value(*a), &|gv, xv, _| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::Softplus(a) => acc(*a, elementwise(self.value(*a), &|gv, xv, _| gv * sigmoid(xv))),
            Op::Log(a) => acc(*a, elementwise(self.value(*a), &|gv, xv, _| gv / xv)),
            Op::Abs(a) => acc(
                *a,
                elementwise(self.value(*a), &|gv, xv, _| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *a,
                    elementwise(self.value(*a), &|gv, xv, _| {
                        if xv < lo || xv > hi {
                            0.0
                        } else {
                            gv
                        }
                    }),
                )
            }
            Op::LayerNorm(x) => {
                let n = g.cols() as f64;
                let mut gx = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    let is = node.aux[i];
                    for ((o, gv), yv) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = is * (gv - mg - yv * mgy);
                    }
                }
                acc(*x, gx);
            }
            Op::SoftmaxRows(x) => {
                let mut gx = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut gx = Tensor::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let total: f64 = gr.iter().sum();
                    for ((o, gv), yv) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if nodes[p.0].requires_grad {
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        acc(p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let n = g.cols();
                for &p in parts {
                    let h = self.shape(p).0;
                    if nodes[p.0].requires_grad {
                        let data = g.data()[off * n..(off + h) * n].to_vec();
                        acc(p, Tensor::from_vec(h, n, data).expect("shape"));
                    }
                    off += h;
                }
            }
            Op::SliceRows(x, start) => {
                let (m, n) = self.shape(*x);
                let mut gx = Tensor::zeros(m, n);
                gx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(*x, gx);
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.shape(*x);
                let mut gx = Tensor::zeros(m, n);
                for i in 0..m {
                    gx.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*x, gx);
            }
            Op::GatherRows(table, idx) => {
                let (m, n) = self.shape(*table);
                let mut gt = Tensor::zeros(m, n);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, gt);
            }
            Op::PickCols(x, idx) => {
                let (m, n) = self.shape(*x);
                let mut gx = Tensor::zeros(m, n);
                for (i, &j) in idx.iter().enumerate() {
                    gx.set(i, j, g.data()[i]);
                }
                acc(*x, gx);
            }
            Op::Sum(x) => {
                let (m, n) = self.shape(*x);
                acc(*x, Tensor::filled(m, n, g.item()));
            }
            Op::SumSq(x) => {
                let s = g.item();
                acc(*x, self.value(*x).map(|v| 2.0 * s * v));
            }
            Op::SumAbs(x) => {
                let s = g.item();
                acc(*x, self.value(*x).map(|v| s * sign(v)));
            }
            Op::RowSqNorm(x) => {
                let mut gx = self.value(*x).clone();
                for i in 0..gx.rows() {
                    let gi = 2.0 * g.data()[i];
                    for v in gx.row_mut(i) {
                        *v *= gi;
                    }
                }
                acc(*x, gx);
            }
            Op::RowSum(x) => {
                let (m, n) = self.shape(*x);
                let mut gx = Tensor::zeros(m, n);
                for i in 0..m {
                    gx.row_mut(i).fill(g.data()[i]);
                }
                acc(*x, gx);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
