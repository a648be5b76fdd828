//! Define-by-run reverse-mode automatic differentiation over dense matrices.
//!
//! Every value on a [`Tape`] is a 2-D array of `f64`. A "vector" of length
//! `n` is a `1 × n` row; a batch of `B` vectors is a `B × n` matrix, which is
//! how rollouts process several equal-length sequences at once. Operations
//! are evaluated eagerly and recorded in order, so the tape is always in
//! topological order.
//!
//! Two backward passes are available:
//!
//! - [`Tape::backward`] computes numeric gradients of a scalar output.
//! - [`Tape::backward_graph`] records the adjoint computation itself on the
//!   tape, so the resulting gradients are ordinary [`Var`]s that can be
//!   differentiated again. The PiNN gradient penalty relies on this.
//!
//! The subgradient of `relu` and `neg_relu` at exactly zero is zero.

use ndarray::{s, Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward seed must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarSeed { rows: usize, cols: usize },
    #[error("variable {0} does not belong to this tape")]
    ForeignVar(usize),
}

pub type AdResult<T> = Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`]. Cheap to copy; the shape is fixed at
/// creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Affine(usize, f64),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Transpose(usize),
    Concat(Vec<usize>),
    SliceCols { src: usize, start: usize },
    PadCols { src: usize, start: usize },
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastScalar(usize),
    SumRows(usize),
    SumCols(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Relu(usize),
    NegRelu(usize),
    Square(usize),
    Powf(usize, f64),
    Sum(usize),
    Mean(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Append-only record of operations and their values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numeric gradients from one backward pass, indexed by node id.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or zeros of the right shape when the output does
    /// not depend on it.
    pub fn get(&self, var: Var) -> Array2<f64> {
        self.get_ref(var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros((var.rows, var.cols)))
    }

    pub fn get_ref(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn accumulate(slot: &mut Option<Array2<f64>>, contribution: Array2<f64>) {
    match slot {
        Some(existing) => *existing += &contribution,
        None => *slot = Some(contribution),
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

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.id].value
    }

    /// The single entry of a `1 × 1` variable.
    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.id].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let (rows, cols) = value.dim();
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var { id, rows, cols }
    }

    fn check(&self, var: Var) -> AdResult<()> {
        if var.id < self.nodes.len() && self.nodes[var.id].value.dim() == var.shape() {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar(var.id))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> AdResult<()> {
        self.check(a)?;
        self.check(b)?;
        if a.shape() != b.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    /// Records an input (parameter, data, or constant).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.same_shape("add", a, b)?;
        let v = &self.nodes[a.id].value + &self.nodes[b.id].value;
        Ok(self.push(v, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.same_shape("sub", a, b)?;
        let v = &self.nodes[a.id].value - &self.nodes[b.id].value;
        Ok(self.push(v, Op::Sub(a.id, b.id)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.same_shape("mul", a, b)?;
        let v = &self.nodes[a.id].value * &self.nodes[b.id].value;
        Ok(self.push(v, Op::Mul(a.id, b.id)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> AdResult<Var> {
        self.check(a)?;
        let v = &self.nodes[a.id].value * factor;
        Ok(self.push(v, Op::Scale(a.id, factor)))
    }

    pub fn neg(&mut self, a: Var) -> AdResult<Var> {
        self.scale(a, -1.0)
    }

    /// `factor * a + offset`, element-wise.
    pub fn affine(&mut self, a: Var, factor: f64, offset: f64) -> AdResult<Var> {
        self.check(a)?;
        let v = self.nodes[a.id].value.mapv(|x| factor * x + offset);
        Ok(self.push(v, Op::Affine(a.id, factor)))
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> AdResult<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ar, ac) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (br, bc) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        if ac != br {
            return Err(shape_err("matmul", format!("({ar}x{ac}) · ({br}x{bc})")));
        }
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let v = match (ta, tb) {
            (false, false) => av.dot(bv),
            (true, false) => av.t().dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, true) => av.t().dot(&bv.t()),
        };
        Ok(self.push(v, Op::MatMul { a: a.id, b: b.id, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> AdResult<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched matrix-vector product: each row of `x` (`B × in`) is
    /// multiplied by `weight` (`out × in`), giving `B × out`.
    pub fn linear(&mut self, x: Var, weight: Var) -> AdResult<Var> {
        self.matmul_t(x, weight, false, true)
    }

    pub fn transpose(&mut self, a: Var) -> AdResult<Var> {
        self.check(a)?;
        let v = self.nodes[a.id].value.t().to_owned();
        Ok(self.push(v, Op::Transpose(a.id)))
    }

    /// Concatenates along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> AdResult<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        for p in parts {
            self.check(*p)?;
            if p.rows != first.rows {
                return Err(shape_err("concat", format!("row counts {} vs {}", p.rows, first.rows)));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.id].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        Ok(self.push(v, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> AdResult<Var> {
        self.check(a)?;
        if start + len > a.cols || len == 0 {
            return Err(shape_err("slice", format!("cols {start}..{} of {}", start + len, a.cols)));
        }
        let v = self.nodes[a.id].value.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(v, Op::SliceCols { src: a.id, start }))
    }

    /// Places `a` at columns `start..` of a zero matrix with `total` columns.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> AdResult<Var> {
        self.check(a)?;
        if start + a.cols > total {
            return Err(shape_err("pad", format!("{} cols at {start} exceed {total}", a.cols)));
        }
        let mut v = Array2::zeros((a.rows, total));
        v.slice_mut(s![.., start..start + a.cols]).assign(&self.nodes[a.id].value);
        Ok(self.push(v, Op::PadCols { src: a.id, start }))
    }

    /// Repeats a `1 × n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> AdResult<Var> {
        self.check(a)?;
        if a.rows != 1 {
            return Err(shape_err("broadcast_rows", format!("expected 1 row, got {}", a.rows)));
        }
        let v = self.nodes[a.id]
            .value
            .broadcast((rows, a.cols))
            .expect("broadcast row")
            .to_owned();
        Ok(self.push(v, Op::BroadcastRows(a.id)))
    }

    /// Repeats an `r × 1` column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> AdResult<Var> {
        self.check(a)?;
        if a.cols != 1 {
            return Err(shape_err("broadcast_cols", format!("expected 1 col, got {}", a.cols)));
        }
        let v = self.nodes[a.id]
            .value
            .broadcast((a.rows, cols))
            .expect("broadcast col")
            .to_owned();
        Ok(self.push(v, Op::BroadcastCols(a.id)))
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> AdResult<Var> {
        self.check(a)?;
        if !a.is_scalar() {
            return Err(shape_err("broadcast_scalar", format!("{:?}", a.shape())));
        }
        let v = Array2::from_elem((rows, cols), self.nodes[a.id].value[[0, 0]]);
        Ok(self.push(v, Op::BroadcastScalar(a.id)))
    }

    /// Column sums as a `1 × n` row.
    pub fn sum_rows(&mut self, a: Var) -> AdResult<Var> {
        self.check(a)?;
        let v = self.nodes[a.id].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        Ok(self.push(v, Op::SumRows(a.id)))
    }

    /// Row sums as an `r × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> AdResult<Var> {
        self.check(a)?;
        let v = self.nodes[a.id].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.push(v, Op::SumCols(a.id)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> AdResult<Var> {
        self.check(a)?;
        let v = self.nodes[a.id].value.mapv(f);
        Ok(self.push(v, op))
    }

    pub fn tanh(&mut self, a: Var) -> AdResult<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn sigmoid(&mut self, a: Var) -> AdResult<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a.id))
    }

    pub fn exp(&mut self, a: Var) -> AdResult<Var> {
        self.unary(a, f64::exp, Op::Exp(a.id))
    }

    /// `max{a, 0}`.
    pub fn relu(&mut self, a: Var) -> AdResult<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.id))
    }

    /// `min{a, 0}`.
    pub fn neg_relu(&mut self, a: Var) -> AdResult<Var> {
        self.unary(a, |x| x.min(0.0), Op::NegRelu(a.id))
    }

    pub fn square(&mut self, a: Var) -> AdResult<Var> {
        self.unary(a, |x| x * x, Op::Square(a.id))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> AdResult<Var> {
        self.unary(a, |x| x.powf(p), Op::Powf(a.id, p))
    }

    pub fn sum(&mut self, a: Var) -> AdResult<Var> {
        self.check(a)?;
        let v = Array2::from_elem((1, 1), self.nodes[a.id].value.sum());
        Ok(self.push(v, Op::Sum(a.id)))
    }

    pub fn mean(&mut self, a: Var) -> AdResult<Var> {
        self.check(a)?;
        let n = (a.rows * a.cols) as f64;
        let v = Array2::from_elem((1, 1), self.nodes[a.id].value.sum() / n);
        Ok(self.push(v, Op::Mean(a.id)))
    }

    fn seed_check(&self, output: Var) -> AdResult<()> {
        self.check(output)?;
        if !output.is_scalar() {
            return Err(AutodiffError::NonScalarSeed { rows: output.rows, cols: output.cols });
        }
        Ok(())
    }

    /// Gradients of a scalar `output` with respect to every node it depends
    /// on.
    pub fn backward(&self, output: Var) -> AdResult<Gradients> {
        self.seed_check(output)?;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(Array2::ones((1, 1)));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[*a], g.clone());
                accumulate(&mut grads[*b], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[*a], g.clone());
                accumulate(&mut grads[*b], -g);
            }
            Op::Mul(a, b) => {
                let ga = g * val(*b);
                let gb = g * val(*a);
                accumulate(&mut grads[*a], ga);
                accumulate(&mut grads[*b], gb);
            }
            Op::Scale(a, f) | Op::Affine(a, f) => accumulate(&mut grads[*a], g * *f),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let op_b = if *tb { bv.t() } else { bv.view() };
                let op_a = if *ta { av.t() } else { av.view() };
                let ga = if *ta { op_b.dot(&g.t()) } else { g.dot(&op_b.t()) };
                let gb = if *tb { g.t().dot(&op_a) } else { op_a.t().dot(g) };
                accumulate(&mut grads[*a], ga);
                accumulate(&mut grads[*b], gb);
            }
            Op::Transpose(a) => accumulate(&mut grads[*a], g.t().to_owned()),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[*p].value.ncols();
                    accumulate(&mut grads[*p], g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let mut full = Array2::zeros(val(*src).dim());
                full.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                accumulate(&mut grads[*src], full);
            }
            Op::PadCols { src, start } => {
                let w = val(*src).ncols();
                accumulate(&mut grads[*src], g.slice(s![.., *start..*start + w]).to_owned());
            }
            Op::BroadcastRows(src) => {
                accumulate(&mut grads[*src], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::BroadcastCols(src) => {
                accumulate(&mut grads[*src], g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::BroadcastScalar(src) => {
                accumulate(&mut grads[*src], Array2::from_elem((1, 1), g.sum()));
            }
            Op::SumRows(src) => {
                let shape = val(*src).dim();
                accumulate(&mut grads[*src], g.broadcast(shape).expect("row grad").to_owned());
            }
            Op::SumCols(src) => {
                let shape = val(*src).dim();
                accumulate(&mut grads[*src], g.broadcast(shape).expect("col grad").to_owned());
            }
            Op::Tanh(a) => {
                let mut d = node.value.mapv(|y| 1.0 - y * y);
                d *= g;
                accumulate(&mut grads[*a], d);
            }
            Op::Sigmoid(a) => {
                let mut d = node.value.mapv(|y| y * (1.0 - y));
                d *= g;
                accumulate(&mut grads[*a], d);
            }
            Op::Exp(a) => accumulate(&mut grads[*a], g * &node.value),
            Op::Relu(a) => {
                let mut d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                d *= g;
                accumulate(&mut grads[*a], d);
            }
            Op::NegRelu(a) => {
                let mut d = val(*a).mapv(|x| if x < 0.0 { 1.0 } else { 0.0 });
                d *= g;
                accumulate(&mut grads[*a], d);
            }
            Op::Square(a) => {
                let mut d = val(*a) * 2.0;
                d *= g;
                accumulate(&mut grads[*a], d);
            }
            Op::Powf(a, p) => {
                let mut d = val(*a).mapv(|x| p * x.powf(p - 1.0));
                d *= g;
                accumulate(&mut grads[*a], d);
            }
            Op::Sum(a) => {
                let shape = val(*a).dim();
                accumulate(&mut grads[*a], Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::Mean(a) => {
                let shape = val(*a).dim();
                let n = (shape.0 * shape.1) as f64;
                accumulate(&mut grads[*a], Array2::from_elem(shape, g[[0, 0]] / n));
            }
        }
    }

    fn inputs_of(op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Scale(a, _)
            | Op::Affine(a, _)
            | Op::Transpose(a)
            | Op::SliceCols { src: a, .. }
            | Op::PadCols { src: a, .. }
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::BroadcastScalar(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::NegRelu(a)
            | Op::Square(a)
            | Op::Powf(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
        }
    }

    fn var_of(&self, id: usize) -> Var {
        let (rows, cols) = self.nodes[id].value.dim();
        Var { id, rows, cols }
    }

    /// Records the backward pass of `output` on the tape and returns the
    /// gradient of `output` with respect to each of `wrt` as new variables.
    /// Inputs that `output` does not depend on get a zero constant.
    pub fn backward_graph(&mut self, output: Var, wrt: &[Var]) -> AdResult<Vec<Var>> {
        self.seed_check(output)?;
        for w in wrt {
            self.check(*w)?;
        }
        let end = output.id + 1;
        let mut relevant = vec![false; end];
        for w in wrt {
            if w.id < end {
                relevant[w.id] = true;
            }
        }
        for id in 0..end {
            if !relevant[id] {
                relevant[id] = Self::inputs_of(&self.nodes[id].op).iter().any(|i| relevant[*i]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        adj[output.id] = Some(self.scalar(1.0));
        for id in (0..end).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = adj[id] else { continue };
            let op = self.nodes[id].op.clone();
            self.propagate_graph(id, &op, g, &relevant, &mut adj)?;
        }
        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            let g = match adj.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.zeros(w.rows, w.cols),
            };
            out.push(g);
        }
        Ok(out)
    }

    fn add_adj(&mut self, adj: &mut [Option<Var>], id: usize, contribution: Var) -> AdResult<()> {
        adj[id] = Some(match adj[id] {
            Some(existing) => self.add(existing, contribution)?,
            None => contribution,
        });
        Ok(())
    }

    fn propagate_graph(
        &mut self,
        id: usize,
        op: &Op,
        g: Var,
        relevant: &[bool],
        adj: &mut [Option<Var>],
    ) -> AdResult<()> {
        let y = self.var_of(id);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if relevant[*a] {
                    self.add_adj(adj, *a, g)?;
                }
                if relevant[*b] {
                    self.add_adj(adj, *b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if relevant[*a] {
                    self.add_adj(adj, *a, g)?;
                }
                if relevant[*b] {
                    let n = self.neg(g)?;
                    self.add_adj(adj, *b, n)?;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.var_of(*a), self.var_of(*b));
                if relevant[*a] {
                    let d = self.mul(g, vb)?;
                    self.add_adj(adj, *a, d)?;
                }
                if relevant[*b] {
                    let d = self.mul(g, va)?;
                    self.add_adj(adj, *b, d)?;
                }
            }
            Op::Scale(a, f) | Op::Affine(a, f) => {
                if relevant[*a] {
                    let d = self.scale(g, *f)?;
                    self.add_adj(adj, *a, d)?;
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.var_of(*a), self.var_of(*b));
                if relevant[*a] {
                    let d = if *ta {
                        self.matmul_t(vb, g, *tb, true)?
                    } else {
                        self.matmul_t(g, vb, false, !*tb)?
                    };
                    self.add_adj(adj, *a, d)?;
                }
                if relevant[*b] {
                    let d = if *tb {
                        self.matmul_t(g, va, true, *ta)?
                    } else {
                        self.matmul_t(va, g, !*ta, false)?
                    };
                    self.add_adj(adj, *b, d)?;
                }
            }
            Op::Transpose(a) => {
                if relevant[*a] {
                    let d = self.transpose(g)?;
                    self.add_adj(adj, *a, d)?;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[*p].value.ncols();
                    if relevant[*p] {
                        let d = self.slice_cols(g, offset, w)?;
                        self.add_adj(adj, *p, d)?;
                    }
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                if relevant[*src] {
                    let total = self.nodes[*src].value.ncols();
                    let d = self.pad_cols(g, *start, total)?;
                    self.add_adj(adj, *src, d)?;
                }
            }
            Op::PadCols { src, start } => {
                if relevant[*src] {
                    let w = self.nodes[*src].value.ncols();
                    let d = self.slice_cols(g, *start, w)?;
                    self.add_adj(adj, *src, d)?;
                }
            }
            Op::BroadcastRows(src) => {
                if relevant[*src] {
                    let d = self.sum_rows(g)?;
                    self.add_adj(adj, *src, d)?;
                }
            }
            Op::BroadcastCols(src) => {
                if relevant[*src] {
                    let d = self.sum_cols(g)?;
                    self.add_adj(adj, *src, d)?;
                }
            }
            Op::BroadcastScalar(src) => {
                if relevant[*src] {
                    let d = self.sum(g)?;
                    self.add_adj(adj, *src, d)?;
                }
            }
            Op::SumRows(src) => {
                if relevant[*src] {
                    let rows = self.nodes[*src].value.nrows();
                    let d = self.broadcast_rows(g, rows)?;
                    self.add_adj(adj, *src, d)?;
                }
            }
            Op::SumCols(src) => {
                if relevant[*src] {
                    let cols = self.nodes[*src].value.ncols();
                    let d = self.broadcast_cols(g, cols)?;
                    self.add_adj(adj, *src, d)?;
                }
            }
            Op::Tanh(a) => {
                if relevant[*a] {
                    let y2 = self.square(y)?;
                    let dy = self.affine(y2, -1.0, 1.0)?;
                    let d = self.mul(g, dy)?;
                    self.add_adj(adj, *a, d)?;
                }
            }
            Op::Sigmoid(a) => {
                if relevant[*a] {
                    let one_minus = self.affine(y, -1.0, 1.0)?;
                    let dy = self.mul(y, one_minus)?;
                    let d = self.mul(g, dy)?;
                    self.add_adj(adj, *a, d)?;
                }
            }
            Op::Exp(a) => {
                if relevant[*a] {
                    let d = self.mul(g, y)?;
                    self.add_adj(adj, *a, d)?;
                }
            }
            Op::Relu(a) | Op::NegRelu(a) => {
                if relevant[*a] {
                    let positive = matches!(op, Op::Relu(_));
                    let mask = self.nodes[*a].value.mapv(|x| {
                        let on = if positive { x > 0.0 } else { x < 0.0 };
                        if on {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let m = self.leaf(mask);
                    let d = self.mul(g, m)?;
                    self.add_adj(adj, *a, d)?;
                }
            }
            Op::Square(a) => {
                if relevant[*a] {
                    let va = self.var_of(*a);
                    let two_a = self.scale(va, 2.0)?;
                    let d = self.mul(g, two_a)?;
                    self.add_adj(adj, *a, d)?;
                }
            }
            Op::Powf(a, p) => {
                if relevant[*a] {
                    let va = self.var_of(*a);
                    let pw = self.powf(va, p - 1.0)?;
                    let dy = self.scale(pw, *p)?;
                    let d = self.mul(g, dy)?;
                    self.add_adj(adj, *a, d)?;
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if relevant[*a] {
                    let (r, c) = self.nodes[*a].value.dim();
                    let mut d = self.broadcast_scalar(g, r, c)?;
                    if matches!(op, Op::Mean(_)) {
                        d = self.scale(d, 1.0 / (r * c) as f64)?;
                    }
                    self.add_adj(adj, *a, d)?;
                }
            }
        }
        Ok(())
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

/// ∂(output component)/∂(input leaf), by one reverse pass.
pub fn jacobian_entry(tape: &Tape, output_component: Var, input_leaf: Var) -> AdResult<Array2<f64>> {
    Ok(tape.backward(output_component)?.get(input_leaf))
}
