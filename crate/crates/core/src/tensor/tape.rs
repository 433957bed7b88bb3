//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record in exact reverse order
//! and accumulates vector-Jacobian products; fan-out nodes sum their
//! incoming contributions in that same order, so two identical recordings
//! always produce bitwise identical gradients.
//!
//! Leaves come in two kinds: [`Tape::param`] leaves receive gradients,
//! [`Tape::constant`] leaves do not, and any node depending only on
//! constants is skipped during the backward sweep.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use matrixmultiply::dgemm;

use super::dense::Tensor;
use crate::error::{Error, Result};

/// Whether a tape keeps its record for differentiation.
///
/// `Replaying` tapes evaluate values only (used for forward passes of
/// checkpointed segments and plain inference); `backward` refuses them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    Recording,
    Replaying,
}

/// A pure function recorded as one checkpointed node.
///
/// Any randomness it uses must be captured by value so replays are exact.
pub type Segment = Arc<dyn for<'a> Fn(Var<'a>) -> Result<Var<'a>> + Send + Sync>;

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleRows(usize, Rc<[f64]>),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Exp(usize),
    Relu(usize),
    Silu(usize),
    Clamp(usize, f64, f64),
    ConcatCols(usize, usize),
    GatherRows(usize, Rc<[usize]>),
    RepeatRows(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Rc<[usize]>,
        scale: f64,
    },
    Checkpoint {
        input: usize,
        segment: Segment,
        checksum: u64,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    mode: TapeMode,
    interior_peak: Cell<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_mode(TapeMode::Recording)
    }

    /// A value-only tape for inference and segment forward passes.
    pub fn replaying() -> Self {
        Self::with_mode(TapeMode::Replaying)
    }

    pub fn with_mode(mode: TapeMode) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            mode,
            interior_peak: Cell::new(0),
        }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    /// Number of tensors currently held by this tape.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest number of tensors any checkpointed segment held at once
    /// while being evaluated or replayed on behalf of this tape.
    pub fn interior_peak(&self) -> usize {
        self.interior_peak.get()
    }

    /// Upper bound on simultaneously stored tensors: this tape's own record
    /// plus the largest segment interior.
    pub fn peak_stored(&self) -> usize {
        self.len() + self.interior_peak()
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_node(Rc::new(value), Op::Leaf, true)
    }

    /// A leaf treated as a constant by `backward`.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Rc::new(value), Op::Leaf, false)
    }

    pub(crate) fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var<'_>> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op_inputs(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_node(Rc::new(Tensor::from_parts(shape, data)), op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn note_interior(&self, n: usize) {
        if n > self.interior_peak.get() {
            self.interior_peak.set(n);
        }
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(loss)?;
        let value = loss.value();
        if !value.is_scalar() {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        self.backward_with_seed(loss, Tensor::filled(value.shape(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back through the record.
    pub fn backward_with_seed(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients> {
        self.check(output)?;
        if self.mode != TapeMode::Recording {
            return Err(Error::NotRecording);
        }
        if seed.shape() != output.value().shape() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: seed.shape().to_vec(),
                rhs: output.value().shape().to_vec(),
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(seed.into_data());

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads[*b], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads[*b], g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let bv = val(*b).data();
                        accumulate(&mut grads[*a], g.iter().zip(bv).map(|(g, b)| g * b).collect());
                    }
                    if needs(*b) {
                        let av = val(*a).data();
                        accumulate(&mut grads[*b], g.iter().zip(av).map(|(g, a)| g * a).collect());
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if needs(*a) {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; n * k];
                        gemm(n, m, k, &g, (m, 1), bv.data(), (1, m), &mut da);
                        accumulate(&mut grads[*a], da);
                    }
                    if needs(*b) {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * m];
                        gemm(k, n, m, av.data(), (1, k), &g, (m, 1), &mut db);
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::AddRow(a, bias) => {
                    if needs(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if needs(*bias) {
                        let m = val(*bias).len();
                        let mut db = vec![0.0; m];
                        for row in g.chunks(m) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        accumulate(&mut grads[*bias], db);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[*a], g.iter().map(|v| c * v).collect());
                }
                Op::AddScalar(a) => accumulate(&mut grads[*a], g),
                Op::ScaleRows(a, coef) => {
                    let cols = g.len() / coef.len();
                    let da = g
                        .chunks(cols)
                        .zip(coef.iter())
                        .flat_map(|(row, c)| row.iter().map(move |v| c * v))
                        .collect();
                    accumulate(&mut grads[*a], da);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads[*a], vec![g[0]; val(*a).len()]);
                }
                Op::Mean(a) => {
                    let n = val(*a).len();
                    accumulate(&mut grads[*a], vec![g[0] / n as f64; n]);
                }
                Op::Square(a) => {
                    let av = val(*a).data();
                    accumulate(&mut grads[*a], g.iter().zip(av).map(|(g, a)| 2.0 * a * g).collect());
                }
                Op::Exp(a) => {
                    accumulate(&mut grads[*a], g.iter().zip(out.data()).map(|(g, e)| g * e).collect());
                }
                Op::Relu(a) => {
                    let av = val(*a).data();
                    accumulate(
                        &mut grads[*a],
                        g.iter().zip(av).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                Op::Silu(a) => {
                    let av = val(*a).data();
                    accumulate(
                        &mut grads[*a],
                        g.iter()
                            .zip(av)
                            .map(|(g, &a)| {
                                let s = sigmoid(a);
                                g * s * (1.0 + a * (1.0 - s))
                            })
                            .collect(),
                    );
                }
                Op::Clamp(a, lo, hi) => {
                    let av = val(*a).data();
                    accumulate(
                        &mut grads[*a],
                        g.iter()
                            .zip(av)
                            .map(|(g, &a)| if a >= *lo && a <= *hi { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).cols();
                    let cb = val(*b).cols();
                    if needs(*a) {
                        let da = g.chunks(ca + cb).flat_map(|r| r[..ca].iter().copied()).collect();
                        accumulate(&mut grads[*a], da);
                    }
                    if needs(*b) {
                        let db = g.chunks(ca + cb).flat_map(|r| r[ca..].iter().copied()).collect();
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::GatherRows(table, idx) => {
                    let tv = val(*table);
                    let c = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (row, &i) in g.chunks(c).zip(idx.iter()) {
                        for (d, r) in dt[i * c..(i + 1) * c].iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    accumulate(&mut grads[*table], dt);
                }
                Op::RepeatRows(a, k) => {
                    let av = val(*a);
                    let c = av.cols();
                    let mut da = vec![0.0; av.len()];
                    for (r, row) in g.chunks(c).enumerate() {
                        let dst = &mut da[(r / k) * c..(r / k + 1) * c];
                        for (d, v) in dst.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::CrossEntropy { logits, labels, scale } => {
                    let lv = val(*logits);
                    let c = lv.cols();
                    let mut dl = Vec::with_capacity(lv.len());
                    for (row, &y) in lv.data().chunks(c).zip(labels.iter()) {
                        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for (j, v) in row.iter().enumerate() {
                            let p = (v - mx).exp() / z;
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl.push(g[0] * scale * (p - onehot));
                        }
                    }
                    accumulate(&mut grads[*logits], dl);
                }
                Op::Checkpoint {
                    input,
                    segment,
                    checksum,
                } => {
                    let sub = Tape::new();
                    let leaf = sub.push_node(Rc::clone(val(*input)), Op::Leaf, true);
                    let replayed = segment(leaf)?;
                    let replayed_sum = replayed.value().checksum();
                    if replayed_sum != *checksum {
                        return Err(Error::NondeterministicSegment {
                            recorded: *checksum,
                            replayed: replayed_sum,
                        });
                    }
                    let seed = Tensor::from_parts(out.shape().to_vec(), g);
                    let inner = sub.backward_with_seed(replayed, seed)?;
                    self.note_interior(sub.len());
                    accumulate(&mut grads[*input], inner.take(leaf.id));
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Records `segments` applied in order to `x`, keeping only boundary
    /// tensors. Interiors are recomputed once each during `backward`.
    pub fn checkpointed_compose<'t>(&'t self, segments: &[Segment], x: Var<'t>) -> Result<Var<'t>> {
        self.check(x)?;
        let mut current = x;
        for segment in segments {
            let scratch = Tape::replaying();
            let input = scratch.constant_rc(current.value());
            let out = segment(input)?;
            if !std::ptr::eq(out.tape, &scratch) {
                return Err(Error::ForeignVar);
            }
            let value = out.value();
            self.note_interior(scratch.len());
            let requires_grad = self.nodes.borrow()[current.id].requires_grad;
            current = self.push_node(
                Rc::clone(&value),
                Op::Checkpoint {
                    input: current.id,
                    segment: Arc::clone(segment),
                    checksum: value.checksum(),
                },
                requires_grad,
            );
        }
        Ok(current)
    }

    fn check(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::AddRow(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::ScaleRows(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Square(a)
        | Op::Exp(a)
        | Op::Relu(a)
        | Op::Silu(a)
        | Op::Clamp(a, _, _)
        | Op::GatherRows(a, _)
        | Op::RepeatRows(a, _) => vec![*a],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Checkpoint { input, .. } => vec![*input],
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        None => *slot = Some(contribution),
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a · b` for an `m x k` by `k x n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and the freshly allocated row-major `c` (m x n).
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    fn take(self, id: usize) -> Vec<f64> {
        let n = self.shapes[id].iter().product();
        self.grads.into_iter().nth(id).flatten().unwrap_or_else(|| vec![0.0; n])
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

macro_rules! same_tape {
    ($a:expr, $b:expr) => {
        if !std::ptr::eq($a.tape, $b.tape) {
            return Err(Error::ForeignVar);
        }
    };
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn elementwise(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        same_tape!(self, other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.push(name, a.shape().to_vec(), data, op)
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.tape.push(name, a.shape().to_vec(), data, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape!(self, other);
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = vec![0.0; n * m];
        gemm(n, k, m, a.data(), (k, 1), b.data(), (m, 1), &mut data);
        self.tape.push("matmul", vec![n, m], data, Op::MatMul(self.id, other.id))
    }

    /// Adds a length-`m` vector to every row of an `[n, m]` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        same_tape!(self, bias);
        let (a, b) = (self.value(), bias.value());
        if a.shape().len() != 2 || b.shape() != [a.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let m = b.len();
        let data = a
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
            .collect();
        self.tape.push("add_row", a.shape().to_vec(), data, Op::AddRow(self.id, bias.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |a| c * a, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |a| a + c, Op::AddScalar(self.id))
    }

    /// Multiplies row `i` by `coef[i]`.
    pub fn scale_rows(self, coef: &[f64]) -> Result<Var<'t>> {
        let a = self.value();
        if coef.len() != a.rows() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![coef.len()],
            });
        }
        let cols = a.cols();
        let data = a
            .data()
            .chunks(cols)
            .zip(coef)
            .flat_map(|(row, c)| row.iter().map(move |v| c * v))
            .collect();
        self.tape.push("scale_rows", a.shape().to_vec(), data, Op::ScaleRows(self.id, coef.into()))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.push("sum", vec![1], vec![s], Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let a = self.value();
        let s: f64 = a.data().iter().sum();
        self.tape.push("mean", vec![1], vec![s / a.len() as f64], Op::Mean(self.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |a| a * a, Op::Square(self.id))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |a| a.max(0.0), Op::Relu(self.id))
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary("silu", |a| a * sigmoid(a), Op::Silu(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary("clamp", |a| a.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    /// `[n, a] ++ [n, b] -> [n, a + b]`.
    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape!(self, other);
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = (0..a.rows()).flat_map(|i| a.row(i).iter().chain(b.row(i)).copied()).collect();
        let cols = a.cols() + b.cols();
        self.tape.push("concat_cols", vec![a.rows(), cols], data, Op::ConcatCols(self.id, other.id))
    }

    /// Selects rows of a `[r, c]` table: the result is `[idx.len(), c]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        if t.shape().len() != 2 || idx.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::invalid(format!("row index {bad} outside table of {} rows", t.rows())));
        }
        let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        self.tape.push("gather_rows", vec![idx.len(), t.cols()], data, Op::GatherRows(self.id, idx.into()))
    }

    /// Repeats each row `k` times consecutively.
    pub fn repeat_rows(self, k: usize) -> Result<Var<'t>> {
        if k == 0 {
            return Err(Error::invalid("repeat_rows with k = 0"));
        }
        let r = self.value().repeat_rows(k);
        self.tape.push("repeat_rows", r.shape().to_vec(), r.into_data(), Op::RepeatRows(self.id, k))
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let n = labels.len() as f64;
        self.cross_entropy_scaled(labels, 1.0 / n)
    }

    /// `scale * Σ_i CE_i` over the rows.
    pub fn cross_entropy_scaled(self, labels: &[usize], scale: f64) -> Result<Var<'t>> {
        let lv = self.value();
        if lv.shape().len() != 2 || lv.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} outside {c} classes")));
        }
        let total: f64 = per_row_cross_entropy(&lv, labels).iter().sum();
        self.tape.push(
            "cross_entropy",
            vec![1],
            vec![scale * total],
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.into(),
                scale,
            },
        )
    }
}

/// Per-row softmax cross-entropy, computed stably.
pub fn per_row_cross_entropy(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_is_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let tape = Tape::new();
        let m = t(&[3, 3], &[1.0, -2.0, 3.5, 0.25, 5.0, -6.0, 7.0, 8.0, 9.0]);
        let i = tape.constant(Tensor::identity(3));
        let mv = tape.constant(m.clone());
        assert_eq!(&*i.matmul(mv).unwrap().value(), &m);
    }

    #[test]
    fn mean_of_squares() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.square().unwrap().mean().unwrap().item().unwrap(), 12.5);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = a.add(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn overflow_is_rejected() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(a.exp(), Err(Error::NonFinite("exp"))));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = w.mul(w).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let tape = Tape::new();
        let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.constant(t(&[1], &[7.0]));
        let loss = c.scale(2.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_replaying() {
        let tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));

        let replay = Tape::replaying();
        let w = replay.param(t(&[1], &[1.0]));
        assert!(matches!(replay.backward(w), Err(Error::NotRecording)));
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.constant(t(&[1], &[1.0]));
        let b = t2.constant(t(&[1], &[1.0]));
        assert!(matches!(a.add(b), Err(Error::ForeignVar)));
        assert!(matches!(t2.backward(a), Err(Error::ForeignVar)));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        // y = x*x + x + x  ->  dy/dx = 2x + 2
        let y = x.mul(x).unwrap().add(x).unwrap().add(x).unwrap().sum().unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).data(), &[8.0]);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let tape = Tape::new();
        let z = tape.constant(t(&[1, 3], &[1.0, 2.0, 0.5]));
        let ce = z.cross_entropy(&[1]).unwrap().item().unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        assert!((ce - (lse - 2.0)).abs() < 1e-14);
    }
}
