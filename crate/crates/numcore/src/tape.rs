//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value, so node `i`
//! can only refer to nodes `< i` and a single reverse sweep over the node
//! list visits each node once in a valid order. Nodes whose inputs do not
//! require gradients are still recorded (their values are needed) but are
//! skipped during the backward sweep.

use std::collections::HashMap;

use crate::error::{NumError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Reduction extent for `sum` and `mean`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Reduce everything to a scalar.
    All,
    /// Reduce the last axis, keeping it with size 1.
    Last,
}

/// Shape of a 1-D convolution over channel-last sequences.
///
/// Inputs are rows of `length * in_channels` values laid out time-major,
/// so a window of `kernel` consecutive steps is one contiguous slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeometry {
    pub length: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1dGeometry {
    pub fn out_length(&self) -> usize {
        if self.length < self.kernel || self.stride == 0 {
            0
        } else {
            (self.length - self.kernel) / self.stride + 1
        }
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.in_channels
    }
}

/// The closed set of differentiable primitives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Conv1d(Conv1dGeometry),
    Relu,
    Tanh,
    Exp,
    Log,
    Sum(Reduce),
    Mean(Reduce),
    L2Norm,
    Softplus,
    Concat,
    Slice { start: usize, end: usize },
}

#[derive(Clone, Debug)]
enum Bcast {
    Same,
    ScalarRhs,
    ScalarLhs,
    /// rhs repeats along leading axes of lhs.
    SuffixRhs,
    SuffixLhs,
    General { out: Vec<usize>, lhs: Vec<usize>, rhs: Vec<usize> },
}

impl Bcast {
    fn plan(a: &[usize], b: &[usize]) -> Option<(Self, Vec<usize>)> {
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        if a == b {
            return Some((Bcast::Same, a.to_vec()));
        }
        if nb == 1 && b.len() <= a.len() {
            return Some((Bcast::ScalarRhs, a.to_vec()));
        }
        if na == 1 && a.len() <= b.len() {
            return Some((Bcast::ScalarLhs, b.to_vec()));
        }
        if b.len() < a.len() && a.ends_with(b) {
            return Some((Bcast::SuffixRhs, a.to_vec()));
        }
        if a.len() < b.len() && b.ends_with(a) {
            return Some((Bcast::SuffixLhs, b.to_vec()));
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            match (x, y) {
                _ if x == y => out.push(x),
                (1, _) => out.push(y),
                (_, 1) => out.push(x),
                _ => return None,
            }
        }
        let strides = |p: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                st[d] = if p[d] == 1 { 0 } else { acc };
                acc *= p[d];
            }
            st
        };
        let (sa, sb) = (strides(&pa), strides(&pb));
        Some((Bcast::General { out: out.clone(), lhs: sa, rhs: sb }, out))
    }

    /// Calls `f(out_index, lhs_index, rhs_index)` for every output element.
    fn for_each(&self, n_out: usize, na: usize, nb: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Bcast::Same => (0..n_out).for_each(|i| f(i, i, i)),
            Bcast::ScalarRhs => (0..n_out).for_each(|i| f(i, i, 0)),
            Bcast::ScalarLhs => (0..n_out).for_each(|i| f(i, 0, i)),
            Bcast::SuffixRhs => (0..n_out).for_each(|i| f(i, i, i % nb)),
            Bcast::SuffixLhs => (0..n_out).for_each(|i| f(i, i % na, i)),
            Bcast::General { out, lhs, rhs } => {
                let rank = out.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for i in 0..n_out {
                    f(i, ia, ib);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        ia += lhs[d];
                        ib += rhs[d];
                        if idx[d] < out[d] {
                            break;
                        }
                        ia -= lhs[d] * out[d];
                        ib -= rhs[d] * out[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Conv1d { x: Var, w: Var, b: Var, geom: Conv1dGeometry },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var, Reduce),
    Mean(Var, Reduce),
    L2Norm(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, end: usize },
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations and their values for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar loss with respect to every leaf on the tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves the loss does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    /// Gradient for a parameter registered on the tape, `None` if the
    /// parameter was never registered.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.leaves.get(v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

fn matmul_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller passes slices that cover the strided extents
    // described by (m, k, n) and the strides; c is a dense row-major m×n block.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a parameter; repeated calls return the same node, so
    /// gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Registers a parameter as a constant: its value is used but no
    /// gradient flows to it.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    /// Dispatches one primitive by kind.
    pub fn forward_primitive(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(NumError::Invalid {
                    op: "forward_primitive",
                    msg: format!("{op:?} takes {n} inputs, got {}", inputs.len()),
                })
            }
        };
        match op {
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Conv1d(g) => {
                arity(3).and_then(|_| self.conv1d(inputs[0], inputs[1], inputs[2], g))
            }
            Primitive::Relu => arity(1).map(|_| self.relu(inputs[0])),
            Primitive::Tanh => arity(1).map(|_| self.tanh(inputs[0])),
            Primitive::Exp => arity(1).map(|_| self.exp(inputs[0])),
            Primitive::Log => arity(1).and_then(|_| self.log(inputs[0])),
            Primitive::Sum(r) => arity(1).map(|_| self.sum(inputs[0], r)),
            Primitive::Mean(r) => arity(1).map(|_| self.mean(inputs[0], r)),
            Primitive::L2Norm => arity(1).map(|_| self.l2norm(inputs[0])),
            Primitive::Softplus => arity(1).map(|_| self.softplus(inputs[0])),
            Primitive::Concat => self.concat(inputs),
            Primitive::Slice { start, end } => arity(1).and_then(|_| self.slice(inputs[0], start, end)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul" } else { "add" };
        let (ta, tb) = (self.value(a), self.value(b));
        let (plan, shape) = Bcast::plan(ta.shape(), tb.shape()).ok_or_else(|| NumError::ShapeMismatch {
            op: name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; n];
        if mul {
            plan.for_each(n, da.len(), db.len(), |i, ia, ib| out[i] = da[ia] * db[ib]);
        } else {
            plan.for_each(n, da.len(), db.len(), |i, ia, ib| out[i] = da[ia] + db[ib]);
        }
        let rg = self.rg(a) || self.rg(b);
        let op = if mul { Op::Mul(a, b, plan) } else { Op::Add(a, b, plan) };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// Strided 1-D convolution; `x` is `[batch, length * in_channels]`,
    /// `w` is `[kernel * in_channels, out_channels]`, `b` is `[out_channels]`.
    /// Output is `[batch, out_length * out_channels]`, channel-last.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, geom: Conv1dGeometry) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let row = geom.length * geom.in_channels;
        let lout = geom.out_length();
        if tx.rank() != 2 || tx.shape()[1] != row || lout == 0 {
            return Err(NumError::ShapeMismatch {
                op: "conv1d",
                lhs: tx.shape().to_vec(),
                rhs: vec![geom.length, geom.in_channels],
            });
        }
        if tw.rank() != 2 || tw.shape()[0] != geom.patch_len() {
            return Err(NumError::ShapeMismatch {
                op: "conv1d",
                lhs: tw.shape().to_vec(),
                rhs: vec![geom.kernel, geom.in_channels],
            });
        }
        let cout = tw.shape()[1];
        if tb.shape() != [cout] {
            return Err(NumError::ShapeMismatch { op: "conv1d", lhs: tb.shape().to_vec(), rhs: vec![cout] });
        }
        let bsz = tx.shape()[0];
        let patches = im2col(tx.data(), bsz, geom);
        let rows = bsz * lout;
        let mut out = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(tb.data());
        }
        matmul_into(
            rows,
            geom.patch_len(),
            cout,
            &patches,
            (geom.patch_len() as isize, 1),
            tw.data(),
            (cout as isize, 1),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bsz, lout * cout], out)?, Op::Conv1d { x, w, b, geom }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural logarithm; rejects non-positive inputs.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(NumError::Invalid { op: "log", msg: format!("non-positive input {bad}") });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sum(&mut self, x: Var, r: Reduce) -> Var {
        let v = reduce(self.value(x), r, false);
        let rg = self.rg(x);
        self.push(v, Op::Sum(x, r), rg)
    }

    pub fn mean(&mut self, x: Var, r: Reduce) -> Var {
        let v = reduce(self.value(x), r, true);
        let rg = self.rg(x);
        self.push(v, Op::Mean(x, r), rg)
    }

    /// Euclidean norm over the last axis, keeping it with size 1.
    pub fn l2norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        let data: Vec<f64> = t.data().chunks(c.max(1)).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut shape = t.shape().to_vec();
        match shape.last_mut() {
            Some(l) => *l = 1,
            None => shape.push(1),
        }
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("norm shape"), Op::L2Norm(x), rg)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| NumError::Invalid { op: "concat", msg: "no inputs".into() })?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows = self.value(*first).rows();
        let mut width = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.last_dim();
        if t.rank() == 0 || start >= end || end > c {
            return Err(NumError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} out of bounds for shape {:?}", t.shape()),
            });
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start, end }, rg))
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Gradients of `loss` with respect to every leaf on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves = HashMap::new();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, g, &mut grads, &mut leaves, Var(i))?;
        }
        // Leaves that could have received gradient but did not.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                leaves.entry(Var(i)).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves, params: self.params.clone() })
    }

    fn propagate(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaves: &mut HashMap<Var, Tensor>,
        me: Var,
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {
                leaves.insert(me, Tensor::new(node.value.shape().to_vec(), g)?);
            }
            Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    // g [m,n] × bᵀ [n,k]
                    matmul_into(m, n, k, &g, (n as isize, 1), tb.data(), (1, n as isize), &mut ga);
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    // aᵀ [k,m] × g [m,n]
                    matmul_into(k, m, n, ta.data(), (1, k as isize), &g, (n as isize, 1), &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b, plan) | Op::Mul(a, b, plan) => {
                let is_mul = matches!(node.op, Op::Mul(..));
                let (da, db) = (val(*a).data(), val(*b).data());
                let n = g.len();
                if self.rg(*a) {
                    let mut ga = vec![0.0; da.len()];
                    if is_mul {
                        plan.for_each(n, da.len(), db.len(), |i, ia, ib| ga[ia] += g[i] * db[ib]);
                    } else {
                        plan.for_each(n, da.len(), db.len(), |i, ia, _| ga[ia] += g[i]);
                    }
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; db.len()];
                    if is_mul {
                        plan.for_each(n, da.len(), db.len(), |i, ia, ib| gb[ib] += g[i] * da[ia]);
                    } else {
                        plan.for_each(n, da.len(), db.len(), |i, _, ib| gb[ib] += g[i]);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let (tx, tw) = (val(*x), val(*w));
                let bsz = tx.shape()[0];
                let lout = geom.out_length();
                let cout = tw.shape()[1];
                let plen = geom.patch_len();
                let rows = bsz * lout;
                if self.rg(*w) {
                    let patches = im2col(tx.data(), bsz, *geom);
                    let mut gw = vec![0.0; plen * cout];
                    matmul_into(plen, rows, cout, &patches, (1, plen as isize), &g, (cout as isize, 1), &mut gw);
                    accumulate(grads, *w, gw);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; cout];
                    for r in g.chunks(cout) {
                        gb.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                    }
                    accumulate(grads, *b, gb);
                }
                if self.rg(*x) {
                    let mut gp = vec![0.0; rows * plen];
                    matmul_into(rows, cout, plen, &g, (cout as isize, 1), tw.data(), (1, cout as isize), &mut gp);
                    let row = geom.length * geom.in_channels;
                    let mut gx = vec![0.0; bsz * row];
                    for bi in 0..bsz {
                        for t in 0..lout {
                            let src = &gp[(bi * lout + t) * plen..(bi * lout + t + 1) * plen];
                            let off = bi * row + t * geom.stride * geom.in_channels;
                            gx[off..off + plen].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Relu(x) => {
                let gx = g.iter().zip(val(*x).data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = g.iter().zip(val(*x).data()).map(|(g, v)| g / v).collect();
                accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = g.iter().zip(val(*x).data()).map(|(g, &v)| g * sigmoid(v)).collect();
                accumulate(grads, *x, gx);
            }
            Op::Sum(x, r) | Op::Mean(x, r) => {
                let tx = val(*x);
                let is_mean = matches!(node.op, Op::Mean(..));
                let gx = match r {
                    Reduce::All => {
                        let s = if is_mean { g[0] / tx.len().max(1) as f64 } else { g[0] };
                        vec![s; tx.len()]
                    }
                    Reduce::Last => {
                        let c = tx.last_dim();
                        let scale = if is_mean { 1.0 / c.max(1) as f64 } else { 1.0 };
                        g.iter().flat_map(|&gi| std::iter::repeat(gi * scale).take(c)).collect()
                    }
                };
                accumulate(grads, *x, gx);
            }
            Op::L2Norm(x) => {
                let tx = val(*x);
                let c = tx.last_dim().max(1);
                let mut gx = Vec::with_capacity(tx.len());
                for (r, (gi, n)) in g.iter().zip(node.value.data()).enumerate() {
                    let row = &tx.data()[r * c..(r + 1) * c];
                    if *n > 0.0 {
                        gx.extend(row.iter().map(|v| gi * v / n));
                    } else {
                        gx.extend(std::iter::repeat(0.0).take(c));
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).last_dim();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * width + off..r * width + off + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::Slice { x, start, end } => {
                let tx = val(*x);
                let c = tx.last_dim();
                let w = end - start;
                let mut gx = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    gx[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

fn im2col(x: &[f64], bsz: usize, geom: Conv1dGeometry) -> Vec<f64> {
    let lout = geom.out_length();
    let plen = geom.patch_len();
    let row = geom.length * geom.in_channels;
    let mut patches = Vec::with_capacity(bsz * lout * plen);
    for bi in 0..bsz {
        for t in 0..lout {
            let off = bi * row + t * geom.stride * geom.in_channels;
            patches.extend_from_slice(&x[off..off + plen]);
        }
    }
    patches
}

fn reduce(t: &Tensor, r: Reduce, mean: bool) -> Tensor {
    match r {
        Reduce::All => {
            let s: f64 = t.data().iter().sum();
            Tensor::scalar(if mean { s / t.len().max(1) as f64 } else { s })
        }
        Reduce::Last => {
            let c = t.last_dim().max(1);
            let data = t
                .data()
                .chunks(c)
                .map(|row| {
                    let s: f64 = row.iter().sum();
                    if mean {
                        s / c as f64
                    } else {
                        s
                    }
                })
                .collect();
            let mut shape = t.shape().to_vec();
            match shape.last_mut() {
                Some(l) => *l = 1,
                None => shape.push(1),
            }
            Tensor::new(shape, data).expect("reduce shape")
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
