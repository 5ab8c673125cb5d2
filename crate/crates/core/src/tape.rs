//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends
//! a node holding its value and the ids of its inputs, so node order is a
//! topological order and [`Tape::backward`] walks it in reverse. Gradient
//! accumulation always visits consumers in descending node order, which makes
//! repeated runs bit-identical.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rotation::{self, Mat3};
use crate::tensor::{matmul_a_bt, matmul_at_b, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Per-vertex jaw skinning data used by [`Tape::articulate_jaw`].
#[derive(Clone, Debug)]
pub struct JawRig {
    pub pivot: [f64; 3],
    pub frame: Mat3,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul { scalar: usize, tensor: usize },
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    SumSq(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    GatherRows { src: usize, index: Arc<Vec<usize>> },
    LayerNormRows { src: usize, eps: f64 },
    Clamp { src: usize, lo: f64, hi: f64 },
    Rodrigues(usize),
    ArticulateJaw { blend: usize, jaw: usize, rig: Arc<JawRig> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberate adjoint faults, used to prove the gradient checker catches them.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    pub tanh_adjoint: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
    faults: Faults,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient of `v`; panics if `v` did not require a gradient.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient recorded for variable")
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
            faults: Faults::default(),
        }
    }

    #[doc(hidden)]
    pub fn with_faults(faults: Faults) -> Self {
        Self {
            faults,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Allows another backward pass over the same recording.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Contract("variable belongs to a different tape".into()));
        }
        Ok(v.idx)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.with_grad(false), Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.zip(&self.nodes[ib].value, name, f)?;
        Ok((ia, ib, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::Sub(ia, ib), rg))
    }

    /// Elementwise product. A one-element operand broadcasts over the other.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            let (scalar, tensor) = if self.nodes[ia].value.is_scalar() {
                (ia, ib)
            } else if self.nodes[ib].value.is_scalar() {
                (ib, ia)
            } else {
                return Err(Error::shape("mul", sa, sb));
            };
            let s = self.nodes[scalar].value.item();
            let out = self.nodes[tensor].value.map(|v| s * v);
            let rg = self.rg(&[ia, ib]);
            return Ok(self.push(out, Op::ScalarMul { scalar, tensor }, rg));
        }
        let out = self.nodes[ia].value.mul(&self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::Mul(ia, ib), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.scale(s);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Scale(ia, s), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f64::tanh);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Tanh(ia), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v.max(0.0));
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Relu(ia), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.transpose()?;
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Transpose(ia), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Reshape(ia), rg))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if !x.is_matrix() {
            return Err(Error::shape("softmax_rows", x.shape(), &[]));
        }
        let out = softmax_rows(x);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::SoftmaxRows(ia), rg))
    }

    fn reduce(&mut self, a: Var, make: fn(usize) -> Op, f: fn(&Tensor) -> f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(f(&self.nodes[ia].value));
        let rg = self.rg(&[ia]);
        Ok(self.push(out, make(ia), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Op::Sum, Tensor::sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Op::Mean, |t| t.sum() / t.numel() as f64)
    }

    pub fn sumsq(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Op::SumSq, Tensor::sumsq)
    }

    fn row_broadcast(&mut self, x: Var, r: Var, name: &'static str) -> Result<(usize, usize)> {
        let (ix, ir) = (self.check(x)?, self.check(r)?);
        let (xs, rs) = (self.nodes[ix].value.shape(), self.nodes[ir].value.shape());
        if xs.len() != 2 || rs != [1, xs[1]] {
            return Err(Error::shape(name, xs, rs));
        }
        Ok((ix, ir))
    }

    /// `x + 1·row` for `x: m×n`, `row: 1×n` (explicit row broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = self.row_broadcast(x, row, "add_row")?;
        let xv = &self.nodes[ix].value;
        let rv = self.nodes[ir].value.data();
        let n = xv.cols();
        let data = xv.data().iter().enumerate().map(|(i, v)| v + rv[i % n]).collect();
        let out = Tensor::matrix(xv.rows(), n, data);
        let rg = self.rg(&[ix, ir]);
        Ok(self.push(out, Op::AddRow(ix, ir), rg))
    }

    /// `x · diag(row)` for `x: m×n`, `row: 1×n` (explicit column scaling).
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = self.row_broadcast(x, row, "mul_row")?;
        let xv = &self.nodes[ix].value;
        let rv = self.nodes[ir].value.data();
        let n = xv.cols();
        let data = xv.data().iter().enumerate().map(|(i, v)| v * rv[i % n]).collect();
        let out = Tensor::matrix(xv.rows(), n, data);
        let rg = self.rg(&[ix, ir]);
        Ok(self.push(out, Op::MulRow(ix, ir), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = ids.first().ok_or_else(|| Error::Domain("concat of nothing".into()))?;
        let n = self.nodes[*first].value.cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &i in &ids {
            let v = &self.nodes[i].value;
            if !v.is_matrix() || v.cols() != n {
                return Err(Error::shape("concat_rows", self.nodes[*first].value.shape(), v.shape()));
            }
            m += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::matrix(m, n, data), Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = ids.first().ok_or_else(|| Error::Domain("concat of nothing".into()))?;
        let m = self.nodes[*first].value.rows();
        for &i in &ids {
            let v = &self.nodes[i].value;
            if !v.is_matrix() || v.rows() != m {
                return Err(Error::shape("concat_cols", self.nodes[*first].value.shape(), v.shape()));
            }
        }
        let n: usize = ids.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &i in &ids {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::matrix(m, n, data), Op::ConcatCols(ids), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if !v.is_matrix() || len == 0 || start + len > v.cols() {
            return Err(Error::shape("slice_cols", v.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(v.rows(), len, data);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::SliceCols { src: ia, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if !v.is_matrix() || len == 0 || start + len > v.rows() {
            return Err(Error::shape("slice_rows", v.shape(), &[start, len]));
        }
        let n = v.cols();
        let out = Tensor::matrix(len, n, v.data()[start * n..(start + len) * n].to_vec());
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::SliceRows { src: ia, start }, rg))
    }

    /// Output row `r` is input row `index[r]`; backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if !v.is_matrix() || index.is_empty() {
            return Err(Error::shape("gather_rows", v.shape(), &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Range(format!("gather index {bad} >= {}", v.rows())));
        }
        let n = v.cols();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index.iter() {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::matrix(index.len(), n, data);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::GatherRows { src: ia, index }, rg))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if !v.is_matrix() {
            return Err(Error::shape("layer_norm_rows", v.shape(), &[]));
        }
        let n = v.cols();
        let mut data = Vec::with_capacity(v.numel());
        for r in 0..v.rows() {
            let row = v.row(r);
            let (mu, inv) = row_stats(row, eps);
            data.extend(row.iter().map(|x| (x - mu) * inv));
        }
        let out = Tensor::matrix(v.rows(), n, data);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::LayerNormRows { src: ia, eps }, rg))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Clamp { src: ia, lo, hi }, rg))
    }

    /// Axis-angle (any 3-element tensor) to a 3×3 rotation matrix.
    pub fn rodrigues(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if v.numel() != 3 {
            return Err(Error::shape("rodrigues", v.shape(), &[3]));
        }
        let d = v.data();
        let r = rotation::rodrigues([d[0], d[1], d[2]]);
        let out = Tensor::matrix(3, 3, r.concat());
        let rg = self.rg(&[ia]);
        Ok(self.push(out, Op::Rodrigues(ia), rg))
    }

    /// Skinned jaw rotation applied per frame.
    ///
    /// `blend` is `F × 3V` (vertex-major xyz), `jaw` is `F × 3` axis-angle.
    /// Vertex `v` moves to `b + w_v·(R(b − pivot) + pivot − b)` where `R`
    /// is the jaw rotation expressed in the rig frame.
    pub fn articulate_jaw(&mut self, blend: Var, jaw: Var, rig: Arc<JawRig>) -> Result<Var> {
        let (ib, ij) = (self.check(blend)?, self.check(jaw)?);
        let (bv, jv) = (&self.nodes[ib].value, &self.nodes[ij].value);
        let nv = rig.weights.len();
        if !bv.is_matrix() || bv.cols() != 3 * nv || jv.shape() != [bv.rows(), 3] {
            return Err(Error::shape("articulate_jaw", bv.shape(), jv.shape()));
        }
        let frames = bv.rows();
        let mut data = Vec::with_capacity(bv.numel());
        for f in 0..frames {
            let th = jv.row(f);
            let r = rotation::conjugate(&rig.frame, &rotation::rodrigues([th[0], th[1], th[2]]));
            let row = bv.row(f);
            for v in 0..nv {
                let b = [row[3 * v], row[3 * v + 1], row[3 * v + 2]];
                data.extend(skin_vertex(&r, b, &rig.pivot, rig.weights[v]));
            }
        }
        let out = Tensor::matrix(frames, 3 * nv, data);
        let rg = self.rg(&[ib, ij]);
        Ok(self.push(out, Op::ArticulateJaw { blend: ib, jaw: ij, rig }, rg))
    }

    /// Propagates `d loss` back to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        if !self.nodes[il].requires_grad {
            return Err(Error::Contract("loss is detached from every differentiable input".into()));
        }
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape; call reset() first".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[il] = Some(Tensor::full(self.nodes[il].value.shape(), 1.0));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        // Leaves that require a gradient but were never reached get zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() && matches!(node.op, Op::Leaf) {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut send = |j: usize, contrib: Tensor| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.mul(val(*b))?);
                send(*b, g.mul(val(*a))?);
            }
            Op::ScalarMul { scalar, tensor } => {
                let s = val(*scalar).item();
                let ds: f64 = g.data().iter().zip(val(*tensor).data()).map(|(x, y)| x * y).sum();
                let shape = val(*scalar).shape().to_vec();
                send(*tensor, g.scale(s));
                send(*scalar, Tensor::new(shape, vec![ds])?);
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::Tanh(a) => {
                let d = if self.faults.tanh_adjoint {
                    g.zip(&node.value, "tanh", |gv, y| gv * (1.0 - y))?
                } else {
                    g.zip(&node.value, "tanh", |gv, y| gv * (1.0 - y * y))?
                };
                send(*a, d);
            }
            Op::Relu(a) => send(*a, g.zip(val(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })?),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_a_bt(g.data(), bv.data(), &mut da, m, n, k);
                    send(*a, Tensor::matrix(m, k, da));
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_at_b(av.data(), g.data(), &mut db, m, k, n);
                    send(*b, Tensor::matrix(k, n, db));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()?),
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut d = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..n {
                        d[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(*a, Tensor::matrix(y.rows(), n, d));
            }
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                send(*a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::SumSq(a) => {
                let s = 2.0 * g.item();
                send(*a, val(*a).scale(s));
            }
            Op::AddRow(x, r) => {
                send(*x, g.clone());
                send(*r, column_sums(g, None));
            }
            Op::MulRow(x, r) => {
                let rv = val(*r).data();
                let n = g.cols();
                let dx = g.data().iter().enumerate().map(|(i, v)| v * rv[i % n]).collect();
                send(*x, Tensor::matrix(g.rows(), n, dx));
                send(*r, column_sums(g, Some(val(*x))));
            }
            Op::ConcatRows(ids) => {
                let n = g.cols();
                let mut off = 0;
                for &j in ids {
                    let m = val(j).rows();
                    send(j, Tensor::matrix(m, n, g.data()[off * n..(off + m) * n].to_vec()));
                    off += m;
                }
            }
            Op::ConcatCols(ids) => {
                let m = g.rows();
                let mut off = 0;
                for &j in ids {
                    let w = val(j).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g.row(r)[off..off + w]);
                    }
                    send(j, Tensor::matrix(m, w, d));
                    off += w;
                }
            }
            Op::SliceCols { src, start } => {
                let sv = val(*src);
                let (m, n, w) = (sv.rows(), sv.cols(), g.cols());
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                }
                send(*src, Tensor::matrix(m, n, d));
            }
            Op::SliceRows { src, start } => {
                let sv = val(*src);
                let n = sv.cols();
                let mut d = vec![0.0; sv.numel()];
                d[start * n..start * n + g.numel()].copy_from_slice(g.data());
                send(*src, Tensor::matrix(sv.rows(), n, d));
            }
            Op::GatherRows { src, index } => {
                let sv = val(*src);
                let n = sv.cols();
                let mut d = vec![0.0; sv.numel()];
                for (r, &j) in index.iter().enumerate() {
                    for c in 0..n {
                        d[j * n + c] += g.data()[r * n + c];
                    }
                }
                send(*src, Tensor::matrix(sv.rows(), n, d));
            }
            Op::LayerNormRows { src, eps } => {
                let (xv, y) = (val(*src), &node.value);
                let n = xv.cols();
                let mut d = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    let (_, inv) = row_stats(xv.row(r), *eps);
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        d[r * n + c] = inv * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                send(*src, Tensor::matrix(xv.rows(), n, d));
            }
            Op::Clamp { src, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *src,
                    g.zip(val(*src), "clamp", move |gv, x| if x >= lo && x <= hi { gv } else { 0.0 })?,
                );
            }
            Op::Rodrigues(a) => {
                let d = val(*a).data();
                let (_, jac) = rotation::rodrigues_jacobian([d[0], d[1], d[2]]);
                let gd = g.data();
                let mut out = [0.0; 3];
                for (k, o) in out.iter_mut().enumerate() {
                    *o = jac[k].concat().iter().zip(gd).map(|(p, q)| p * q).sum();
                }
                send(*a, Tensor::new(val(*a).shape().to_vec(), out.to_vec())?);
            }
            Op::ArticulateJaw { blend, jaw, rig } => {
                let (bv, jv) = (val(*blend), val(*jaw));
                let nv = rig.weights.len();
                let frames = bv.rows();
                let mut db = vec![0.0; bv.numel()];
                let mut dj = vec![0.0; jv.numel()];
                for f in 0..frames {
                    let th = jv.row(f);
                    let (r0, jac0) = rotation::rodrigues_jacobian([th[0], th[1], th[2]]);
                    let r = rotation::conjugate(&rig.frame, &r0);
                    let jac = jac0.map(|m| rotation::conjugate(&rig.frame, &m));
                    let (row, grow) = (bv.row(f), g.row(f));
                    for v in 0..nv {
                        let w = rig.weights[v];
                        let gv = [grow[3 * v], grow[3 * v + 1], grow[3 * v + 2]];
                        let base = f * 3 * nv + 3 * v;
                        if w == 0.0 {
                            db[base..base + 3].copy_from_slice(&gv);
                            continue;
                        }
                        let rt_g = rotation::apply_transposed(&r, gv);
                        for c in 0..3 {
                            db[base + c] = (1.0 - w) * gv[c] + w * rt_g[c];
                        }
                        let rel = [
                            row[3 * v] - rig.pivot[0],
                            row[3 * v + 1] - rig.pivot[1],
                            row[3 * v + 2] - rig.pivot[2],
                        ];
                        for (k, jk) in jac.iter().enumerate() {
                            let dv = rotation::apply(jk, rel);
                            dj[f * 3 + k] += w * (dv[0] * gv[0] + dv[1] * gv[1] + dv[2] * gv[2]);
                        }
                    }
                }
                send(*blend, Tensor::matrix(frames, 3 * nv, db));
                send(*jaw, Tensor::matrix(frames, 3, dj));
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor, weight: Option<&Tensor>) -> Tensor {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for r in 0..g.rows() {
        let gr = g.row(r);
        match weight {
            Some(w) => {
                for (c, (o, x)) in out.iter_mut().zip(w.row(r)).enumerate() {
                    *o += gr[c] * x;
                }
            }
            None => {
                for (o, v) in out.iter_mut().zip(gr) {
                    *o += v;
                }
            }
        }
    }
    Tensor::matrix(1, n, out)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

pub(crate) fn skin_vertex(r: &Mat3, b: [f64; 3], pivot: &[f64; 3], w: f64) -> [f64; 3] {
    if w == 0.0 {
        return b;
    }
    let rel = [b[0] - pivot[0], b[1] - pivot[1], b[2] - pivot[2]];
    let rot = rotation::apply(r, rel);
    // Written as a displacement so the rest pose (R = I) is reproduced exactly.
    [
        b[0] + w * (rot[0] - rel[0]),
        b[1] + w * (rot[1] - rel[1]),
        b[2] + w * (rot[2] - rel[2]),
    ]
}

/// Row-wise softmax of a matrix (max-shifted).
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut data = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - mx).exp();
            z += e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v /= z;
        }
    }
    Tensor::matrix(x.rows(), n, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        let y = t.tanh(x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(v(&[-1.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0, 2.0]));
        let y = t.param(v(&[3.0, 4.0]));
        let p = t.mul(x, y).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0, 4.0]);
        assert_eq!(g.wrt(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut t = Tape::new();
        let a = t.constant(v(&[1.0, 2.0]));
        let b = t.constant(v(&[1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.mul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn scalar_broadcast_mul() {
        let mut t = Tape::new();
        let s = t.param(Tensor::scalar(3.0));
        let x = t.param(v(&[1.0, -2.0]));
        let y = t.mul(s, x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, -6.0]);
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(s).data(), &[-1.0]);
        assert_eq!(g.wrt(x).data(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
        let y = softmax_rows(&x);
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert_eq!(y.at(1, 0), 1.0);
        assert!(y.at(1, 1) >= 0.0 && y.at(1, 1) < 1e-300);
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.param(v(&[1.0, 2.0]));
        let s = t.sumsq(x).unwrap();
        assert_eq!(t.value(s).item(), 5.0);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);

        let mut t = Tape::new();
        let x = t.param(v(&[2.0, 4.0, 6.0]));
        let m = t.mean(x).unwrap();
        assert_eq!(t.value(m).item(), 4.0);
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sumsq_weight_gradient() {
        let mut t = Tape::new();
        let w = t.param(v(&[1.0, -1.0]));
        let l = t.sumsq(w).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(w).data(), &[2.0, -2.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let w = t.param(v(&[1.0, 2.0]));
        let unused = t.param(v(&[5.0, 6.0, 7.0]));
        let l = t.sumsq(w).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_contracts() {
        let mut t = Tape::new();
        let w = t.param(v(&[1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));

        let c = t.constant(v(&[1.0]));
        let cs = t.sumsq(c).unwrap();
        assert!(matches!(t.backward(cs), Err(Error::Contract(_))));

        let l = t.sumsq(w).unwrap();
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::Contract(_))));
        t.reset();
        assert!(t.backward(l).is_ok());

        let mut other = Tape::new();
        assert!(matches!(other.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_scatters_back() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = t.gather_rows(x, Arc::new(vec![1, 1, 0])).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
