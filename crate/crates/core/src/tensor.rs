//! Dense 2-D tensors with a recording tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Parameters are
//! borrowed from a [`ParameterStore`] rather than copied; calling
//! [`Graph::backward`] returns the gradients of a scalar node with respect to
//! every parameter and gradient-tracking leaf that contributed to it.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::ops::AddAssign;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};

/// Lower clamp for probabilities entering the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-7;

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (verification).
pub trait Element:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const WIDTH: usize;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    const WIDTH: usize = 8;
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    /// matrix plus a broadcast row vector
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Select(Vec<bool>, Var, Var),
    Softmax(Var),
    Dropout(Var, Array2<F>),
    RowDot(Var, Var),
    Sum(Var),
    BceLogits(Var, Vec<F>),
}

struct Node<F> {
    value: Option<Array2<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<F> {
    pub params: Vec<(ParamId, Array2<F>)>,
    leaves: HashMap<Var, Array2<F>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of a tracked leaf created with [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<F>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

pub struct Graph<'s, F: Element> {
    store: &'s ParameterStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
    finished: bool,
}

fn shape_err<T>(what: &str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(Error::ShapeError(format!("{what}: {a:?} vs {b:?}")))
}

impl<'s, F: Element> Graph<'s, F> {
    /// A graph over `store`. `training` enables dropout, which draws from a
    /// generator seeded with `seed`.
    pub fn new(store: &'s ParameterStore<F>, training: bool, seed: u64) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            finished: false,
        }
    }

    pub fn eval(store: &'s ParameterStore<F>) -> Self {
        Self::new(store, false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParameterStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, F> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.value(*id).view(),
            _ => self.nodes[v.0].value.as_ref().expect("computed node").view(),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Gradient-tracked input; read its gradient with [`Gradients::wrt`].
    pub fn variable(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return shape_err("matmul", &[sa.0, sa.1], &[sb.0, sb.1]);
        }
        let out = self.value(a).dot(&self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return shape_err("matmul_t", &[sa.0, sa.1], &[sb.0, sb.1]);
        }
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(what, &[sa.0, sa.1], &[sb.0, sb.1]);
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = &self.value(a) + &self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds the 1×n row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.0 != 1 || sa.1 != sb.1 {
            return shape_err("add_row", &[sa.0, sa.1], &[sb.0, sb.1]);
        }
        let out = &self.value(a) + &self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = &self.value(a) - &self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = &self.value(a) * &self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let out = self.value(a).mapv(|x| x * k);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(F::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(F::zero()));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concatenate(Axis(1), &views).map_err(|e| Error::ShapeError(e.to_string()))?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concatenate(Axis(0), &views).map_err(|e| Error::ShapeError(e.to_string()))?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return shape_err("slice_cols", &[r, c], &[start, end]);
        }
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.needs(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return shape_err("slice_rows", &[r, c], &[start, end]);
        }
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.needs(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    /// Row gather; indices may repeat. Embedding lookup is a gather on the
    /// embedding table.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return shape_err("gather_rows", &[r, c], &[bad]);
        }
        if idx.is_empty() {
            return shape_err("gather_rows", &[r, c], &[]);
        }
        let out = self.value(a).select(Axis(0), idx);
        let ng = self.needs(a);
        Ok(self.push(out, Op::Gather(a, idx.to_vec()), ng))
    }

    /// Row `i` comes from `a` where `take_a[i]`, otherwise from `b`.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        if take_a.len() != self.shape(a).0 {
            return shape_err("select_rows", &[take_a.len()], &[self.shape(a).0]);
        }
        let mut out = self.value(b).to_owned();
        for (i, &t) in take_a.iter().enumerate() {
            if t {
                out.row_mut(i).assign(&self.value(a).row(i));
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Select(take_a.to_vec(), a, b), ng))
    }

    /// Row-wise softmax of `scores + mask`. A row whose mask entries are all
    /// blocked yields zeros.
    pub fn masked_softmax(&mut self, scores: Var, mask: Option<&Array2<F>>) -> Result<Var> {
        let (r, c) = self.shape(scores);
        if let Some(m) = mask {
            if m.dim() != (r, c) {
                return shape_err("masked_softmax", &[r, c], &[m.nrows(), m.ncols()]);
            }
        }
        let blocked = F::c(crate::codec::MASKED / 2.0);
        let mut out = self.value(scores).to_owned();
        if let Some(m) = mask {
            out += m;
        }
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            if let Some(m) = mask {
                if m.row(i).iter().all(|&x| x <= blocked) {
                    row.fill(F::zero());
                    continue;
                }
            }
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let ng = self.needs(scores);
        Ok(self.push(out, Op::Softmax(scores), ng))
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let scale = F::c(1.0 / keep);
        let (r, c) = self.shape(a);
        let rng = &mut self.rng;
        let mult = Array2::from_shape_simple_fn((r, c), || {
            if rng.random::<f64>() < keep {
                scale
            } else {
                F::zero()
            }
        });
        let out = &self.value(a) * &mult;
        let ng = self.needs(a);
        self.push(out, Op::Dropout(a, mult), ng)
    }

    /// Row-wise dot products of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let prod = &self.value(a) * &self.value(b);
        let out = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::RowDot(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`, with
    /// probabilities clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` in the value.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[F]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if c != 1 || r != targets.len() || r == 0 {
            return shape_err("bce_with_logits", &[r, c], &[targets.len(), 1]);
        }
        let probs: Vec<f64> =
            self.value(logits).iter().map(|&x| sigmoid(x).to_f64().unwrap()).collect();
        let ys: Vec<f64> = targets.iter().map(|y| y.to_f64().unwrap()).collect();
        let loss = binary_cross_entropy(&probs, &ys);
        let out = Array2::from_elem((1, 1), F::c(loss));
        let ng = self.needs(logits);
        Ok(self.push(out, Op::BceLogits(logits, targets.to_vec()), ng))
    }

    /// Reverse pass from the scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.finished {
            return Err(Error::DoubleBackward);
        }
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return shape_err("backward needs a scalar", &[r, c], &[1, 1]);
        }
        self.finished = true;
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let mut acc = |v: Var, delta: Array2<F>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot => *slot = Some(delta),
                }
            };
            let node = &self.nodes[i];
            let val = |v: Var| -> ArrayView2<'_, F> {
                match &self.nodes[v.0].op {
                    Op::Param(id) => self.store.value(*id).view(),
                    _ => self.nodes[v.0].value.as_ref().unwrap().view(),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.dot(&val(*b)));
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, g.t().dot(&val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, b) => {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.mapv(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        acc(*a, &g * &val(*b));
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, &g * &val(*a));
                    }
                }
                Op::Scale(a, k) => acc(*a, g.mapv(|x| x * *k)),
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d = *d * y * (F::one() - y));
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d = *d * (F::one() - y * y));
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| {
                        if y <= F::zero() {
                            *d = F::zero()
                        }
                    });
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(*p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        acc(*p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d);
                }
                Op::Gather(a, idx) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(*a, d);
                }
                Op::Select(take_a, a, b) => {
                    let mut da = g.clone();
                    let mut db = g;
                    for (r, &t) in take_a.iter().enumerate() {
                        if t {
                            db.row_mut(r).fill(F::zero());
                        } else {
                            da.row_mut(r).fill(F::zero());
                        }
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let total = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = *d - y * total);
                    }
                    acc(*a, d);
                }
                Op::Dropout(a, mult) => acc(*a, &g * mult),
                Op::RowDot(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if self.nodes[a.0].needs_grad {
                        acc(*a, &vb * &g);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, &va * &g);
                    }
                }
                Op::Sum(a) => {
                    let k = g[[0, 0]];
                    acc(*a, Array2::from_elem(val(*a).dim(), k));
                }
                Op::BceLogits(a, ys) => {
                    let k = g[[0, 0]] / F::c(ys.len() as f64);
                    let x = val(*a);
                    let d = Array2::from_shape_fn(x.dim(), |(r, _)| (sigmoid(x[[r, 0]]) - ys[r]) * k);
                    acc(*a, d);
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Mean binary cross-entropy over paired probabilities and 0/1 targets, with
/// probabilities clamped away from 0 and 1.
pub fn binary_cross_entropy(probs: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(probs.len(), targets.len());
    if probs.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / probs.len() as f64
}
