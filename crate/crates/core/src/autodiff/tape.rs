//! Tape-based reverse-mode differentiation over 2-D `f64` tensors.
//!
//! Every recorded value is a matrix. Row vectors (`1 x c`), column vectors
//! (`r x 1`) and scalars (`1 x 1`) broadcast in the elementwise primitives,
//! which is enough to express the batched synapse and neuron updates: a batch
//! of states is a matrix with one state per row.
//!
//! Parameter leaves are registered once and occupy the first slots of the
//! tape. [`Tape::clear`] drops everything recorded after them, so a fresh
//! training segment starts from the same leaves.

use std::fmt;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{Gradients, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Add,
    Subtract,
    Multiply,
    Scale,
    MatMul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    SumRows,
    Sum,
    Concat,
    Select,
    Gather,
    SoftmaxRows,
    Transpose,
    Constant,
    Parameter,
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PrimitiveKind::Add => "add",
            PrimitiveKind::Subtract => "subtract",
            PrimitiveKind::Multiply => "multiply",
            PrimitiveKind::Scale => "scale",
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Tanh => "tanh",
            PrimitiveKind::Sigmoid => "sigmoid",
            PrimitiveKind::Exp => "exp",
            PrimitiveKind::Log => "log",
            PrimitiveKind::SumRows => "sum-rows",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::Select => "select",
            PrimitiveKind::Gather => "gather",
            PrimitiveKind::SoftmaxRows => "softmax-rows",
            PrimitiveKind::Transpose => "transpose",
            PrimitiveKind::Constant => "constant",
            PrimitiveKind::Parameter => "parameter",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConcatAxis {
    Rows,
    Columns,
}

/// A primitive operation together with its operands.
#[derive(Clone, Debug)]
pub enum Primitive {
    Add(Var, Var),
    Subtract(Var, Var),
    /// Elementwise product with broadcasting.
    Multiply(Var, Var),
    Scale(Var, f64),
    /// `a (r x k) . b (k x n)`; a batch of row-vector/matrix products.
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    /// Sums each run of `group` consecutive rows into one output row.
    SumRows {
        x: Var,
        group: usize,
    },
    /// Sum of every element, producing a `1 x 1` scalar.
    Sum(Var),
    Concat {
        parts: Vec<Var>,
        axis: ConcatAxis,
    },
    /// Column range `start..start + len`.
    Select {
        x: Var,
        start: usize,
        len: usize,
    },
    /// Output row `r` is input row `index[r]`.
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    /// Softmax over the rows of each column (across a set of neurons).
    SoftmaxRows(Var),
    Transpose(Var),
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Add(..) => PrimitiveKind::Add,
            Primitive::Subtract(..) => PrimitiveKind::Subtract,
            Primitive::Multiply(..) => PrimitiveKind::Multiply,
            Primitive::Scale(..) => PrimitiveKind::Scale,
            Primitive::MatMul(..) => PrimitiveKind::MatMul,
            Primitive::Tanh(_) => PrimitiveKind::Tanh,
            Primitive::Sigmoid(_) => PrimitiveKind::Sigmoid,
            Primitive::Exp(_) => PrimitiveKind::Exp,
            Primitive::Log(_) => PrimitiveKind::Log,
            Primitive::SumRows { .. } => PrimitiveKind::SumRows,
            Primitive::Sum(_) => PrimitiveKind::Sum,
            Primitive::Concat { .. } => PrimitiveKind::Concat,
            Primitive::Select { .. } => PrimitiveKind::Select,
            Primitive::Gather { .. } => PrimitiveKind::Gather,
            Primitive::SoftmaxRows(_) => PrimitiveKind::SoftmaxRows,
            Primitive::Transpose(_) => PrimitiveKind::Transpose,
        }
    }

    fn operands(&self) -> Vec<Var> {
        match self {
            Primitive::Add(a, b) | Primitive::Subtract(a, b) | Primitive::Multiply(a, b) | Primitive::MatMul(a, b) => {
                vec![*a, *b]
            }
            Primitive::Scale(a, _)
            | Primitive::Tanh(a)
            | Primitive::Sigmoid(a)
            | Primitive::Exp(a)
            | Primitive::Log(a)
            | Primitive::Sum(a)
            | Primitive::SoftmaxRows(a)
            | Primitive::Transpose(a) => vec![*a],
            Primitive::SumRows { x, .. } | Primitive::Select { x, .. } | Primitive::Gather { x, .. } => vec![*x],
            Primitive::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("{primitive}: shape mismatch ({detail})")]
    Shape { primitive: PrimitiveKind, detail: String },
    #[error("node {0} is not on this tape")]
    NotOnTape(usize),
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("parameter slot {slot} does not exist (tape holds {count})")]
    UnknownParameter { slot: usize, count: usize },
    #[error("non-finite value while perturbing parameter {index}")]
    NonFinite { index: usize },
}

#[derive(Clone, Debug)]
enum Origin {
    Parameter,
    Constant,
    Op(Primitive),
}

#[derive(Clone, Debug)]
struct Node {
    origin: Origin,
    value: Array2<f64>,
    needs_grad: bool,
}

/// An append-only record of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_count: usize,
}

fn shape_err(primitive: PrimitiveKind, detail: impl Into<String>) -> TapeError {
    TapeError::Shape {
        primitive,
        detail: detail.into(),
    }
}

/// Output shape of a broadcasting elementwise op, if the operands agree.
fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    }
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn broadcast_to(x: &Array2<f64>, shape: (usize, usize)) -> ArrayView2<'_, f64> {
    x.broadcast(shape).expect("shape checked at record time")
}

/// Sums `g` down to `shape`, undoing a broadcast.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose first `params.len()` nodes are leaves for the slots of
    /// `params`, in order.
    pub fn with_params(params: &ParamStore) -> Self {
        let mut tape = Self::new();
        tape.bind_params(params);
        tape
    }

    /// Replaces the whole tape with fresh parameter leaves.
    pub fn bind_params(&mut self, params: &ParamStore) {
        self.nodes.clear();
        for value in params.values() {
            self.nodes.push(Node {
                origin: Origin::Parameter,
                value: value.clone(),
                needs_grad: true,
            });
        }
        self.param_count = params.len();
    }

    /// Overwrites the values of the parameter leaves, keeping their slots.
    pub fn refresh_params(&mut self, params: &ParamStore) {
        assert_eq!(params.len(), self.param_count, "parameter slot count changed");
        for (node, value) in self.nodes.iter_mut().zip(params.values()) {
            node.value.assign(value);
        }
    }

    /// Drops every node recorded after the parameter leaves.
    pub fn clear(&mut self) {
        self.nodes.truncate(self.param_count);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn param(&self, slot: usize) -> Result<Var, TapeError> {
        if slot < self.param_count {
            Ok(Var(slot))
        } else {
            Err(TapeError::UnknownParameter {
                slot,
                count: self.param_count,
            })
        }
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            origin: Origin::Constant,
            value,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Whether gradients can flow from `v` back to a parameter leaf.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<&Array2<f64>, TapeError> {
        self.nodes.get(v.0).map(|n| &n.value).ok_or(TapeError::NotOnTape(v.0))
    }

    /// Computes the forward value of `prim`, appends it and returns its handle.
    pub fn record(&mut self, prim: Primitive) -> Result<Var, TapeError> {
        let kind = prim.kind();
        let operands = prim.operands();
        for &op in &operands {
            self.check(op)?;
        }
        let value = self.forward(&prim, kind)?;
        let needs_grad = operands.iter().any(|&v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            origin: Origin::Op(prim),
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn forward(&self, prim: &Primitive, kind: PrimitiveKind) -> Result<Array2<f64>, TapeError> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = match prim {
            Primitive::Add(a, b) | Primitive::Subtract(a, b) | Primitive::Multiply(a, b) => {
                let (a, b) = (val(a), val(b));
                let shape = broadcast_shape(a.dim(), b.dim())
                    .ok_or_else(|| shape_err(kind, format!("{:?} vs {:?}", a.dim(), b.dim())))?;
                let av = broadcast_to(a, shape);
                let bv = broadcast_to(b, shape);
                match kind {
                    PrimitiveKind::Add => Zip::from(&av).and(&bv).map_collect(|x, y| x + y),
                    PrimitiveKind::Subtract => Zip::from(&av).and(&bv).map_collect(|x, y| x - y),
                    _ => Zip::from(&av).and(&bv).map_collect(|x, y| x * y),
                }
            }
            Primitive::Scale(a, c) => val(a) * *c,
            Primitive::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.ncols() != b.nrows() {
                    return Err(shape_err(kind, format!("{:?} . {:?}", a.dim(), b.dim())));
                }
                a.dot(b)
            }
            Primitive::Tanh(a) => val(a).mapv(f64::tanh),
            Primitive::Sigmoid(a) => val(a).mapv(sigmoid),
            Primitive::Exp(a) => val(a).mapv(f64::exp),
            Primitive::Log(a) => val(a).mapv(f64::ln),
            Primitive::SumRows { x, group } => {
                let x = val(x);
                if *group == 0 || x.nrows() % group != 0 {
                    return Err(shape_err(
                        kind,
                        format!("{} rows not divisible into groups of {group}", x.nrows()),
                    ));
                }
                let groups = x.nrows() / group;
                let mut out = Array2::zeros((groups, x.ncols()));
                for (g, mut row) in out.outer_iter_mut().enumerate() {
                    for r in 0..*group {
                        row += &x.row(g * group + r);
                    }
                }
                out
            }
            Primitive::Sum(a) => Array2::from_elem((1, 1), val(a).sum()),
            Primitive::Concat { parts, axis } => {
                if parts.is_empty() {
                    return Err(shape_err(kind, "no operands"));
                }
                let views: Vec<_> = parts.iter().map(|p| val(p).view()).collect();
                let ax = match axis {
                    ConcatAxis::Rows => Axis(0),
                    ConcatAxis::Columns => Axis(1),
                };
                ndarray::concatenate(ax, &views).map_err(|e| shape_err(kind, e.to_string()))?
            }
            Primitive::Select { x, start, len } => {
                let x = val(x);
                if start + len > x.ncols() || *len == 0 {
                    return Err(shape_err(
                        kind,
                        format!("columns {start}..{} of {}", start + len, x.ncols()),
                    ));
                }
                x.slice(s![.., *start..start + len]).to_owned()
            }
            Primitive::Gather { x, index } => {
                let x = val(x);
                if let Some(&bad) = index.iter().find(|&&i| i >= x.nrows()) {
                    return Err(shape_err(kind, format!("row {bad} of {}", x.nrows())));
                }
                let mut out = Array2::zeros((index.len(), x.ncols()));
                for (mut row, &i) in out.outer_iter_mut().zip(index.iter()) {
                    row.assign(&x.row(i));
                }
                out
            }
            Primitive::SoftmaxRows(a) => {
                let a = val(a);
                let mut out = a.clone();
                for mut col in out.columns_mut() {
                    let max = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    col.mapv_inplace(|x| (x - max).exp());
                    let total = col.sum();
                    col.mapv_inplace(|x| x / total);
                }
                out
            }
            Primitive::Transpose(a) => val(a).t().to_owned(),
        };
        Ok(out)
    }

    /// Reverse sweep from the scalar `loss`, returning one gradient per
    /// parameter slot. Constants receive nothing.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        let lv = self.check(loss)?;
        if lv.dim() != (1, 1) {
            return Err(TapeError::NotScalar {
                rows: lv.nrows(),
                cols: lv.ncols(),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.origin {
                Origin::Parameter => {
                    grads[idx] = Some(g);
                }
                Origin::Constant => {}
                Origin::Op(prim) => self.propagate(prim, &node.value, g, &mut grads),
            }
        }

        let per_slot = (0..self.param_count)
            .map(|slot| {
                grads[..]
                    .get_mut(slot)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array2::zeros(self.nodes[slot].value.dim()))
            })
            .collect();
        Ok(Gradients::new(per_slot))
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, prim: &Primitive, out: &Array2<f64>, g: Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        let want = |v: &Var| self.nodes[v.0].needs_grad;
        match prim {
            Primitive::Add(a, b) => {
                if want(b) {
                    self.accumulate(grads, *b, reduce_to(g.clone(), val(b).dim()));
                }
                if want(a) {
                    self.accumulate(grads, *a, reduce_to(g, val(a).dim()));
                }
            }
            Primitive::Subtract(a, b) => {
                if want(b) {
                    self.accumulate(grads, *b, reduce_to(-&g, val(b).dim()));
                }
                if want(a) {
                    self.accumulate(grads, *a, reduce_to(g, val(a).dim()));
                }
            }
            Primitive::Multiply(a, b) => {
                let shape = g.dim();
                if want(a) {
                    let gb = &g * &broadcast_to(val(b), shape);
                    self.accumulate(grads, *a, reduce_to(gb, val(a).dim()));
                }
                if want(b) {
                    let ga = &g * &broadcast_to(val(a), shape);
                    self.accumulate(grads, *b, reduce_to(ga, val(b).dim()));
                }
            }
            Primitive::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Primitive::MatMul(a, b) => {
                if want(a) {
                    self.accumulate(grads, *a, g.dot(&val(b).t()));
                }
                if want(b) {
                    self.accumulate(grads, *b, val(a).t().dot(&g));
                }
            }
            Primitive::Tanh(a) => {
                let d = Zip::from(&g).and(out).map_collect(|g, y| g * (1.0 - y * y));
                self.accumulate(grads, *a, d);
            }
            Primitive::Sigmoid(a) => {
                let d = Zip::from(&g).and(out).map_collect(|g, y| g * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Primitive::Exp(a) => self.accumulate(grads, *a, g * out),
            Primitive::Log(a) => {
                let d = Zip::from(&g).and(val(a)).map_collect(|g, x| g / x);
                self.accumulate(grads, *a, d);
            }
            Primitive::SumRows { x, group } => {
                let xv = val(x);
                let mut d = Array2::zeros(xv.dim());
                for (r, mut row) in d.outer_iter_mut().enumerate() {
                    row.assign(&g.row(r / group));
                }
                self.accumulate(grads, *x, d);
            }
            Primitive::Sum(a) => {
                let d = Array2::from_elem(val(a).dim(), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
            Primitive::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = val(p).dim();
                    let piece = match axis {
                        ConcatAxis::Rows => {
                            let piece = g.slice(s![offset..offset + r, ..]).to_owned();
                            offset += r;
                            piece
                        }
                        ConcatAxis::Columns => {
                            let piece = g.slice(s![.., offset..offset + c]).to_owned();
                            offset += c;
                            piece
                        }
                    };
                    if want(p) {
                        self.accumulate(grads, *p, piece);
                    }
                }
            }
            Primitive::Select { x, start, len } => {
                let mut d = Array2::zeros(val(x).dim());
                d.slice_mut(s![.., *start..start + len]).assign(&g);
                self.accumulate(grads, *x, d);
            }
            Primitive::Gather { x, index } => {
                let mut d = Array2::zeros(val(x).dim());
                for (row, &i) in g.outer_iter().zip(index.iter()) {
                    let mut target = d.row_mut(i);
                    target += &row;
                }
                self.accumulate(grads, *x, d);
            }
            Primitive::SoftmaxRows(a) => {
                // dL/dv = y * (g - sum_rows(g * y)), per column
                let dots = (&g * out).sum_axis(Axis(0)).insert_axis(Axis(0));
                let d = out * &(&g - &dots);
                self.accumulate(grads, *a, d);
            }
            Primitive::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
        }
    }

    // Convenience wrappers over `record`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Subtract(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Multiply(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TapeError> {
        self.record(Primitive::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.record(Primitive::MatMul(a, b))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Log(a))
    }

    pub fn sum_rows(&mut self, x: Var, group: usize) -> Result<Var, TapeError> {
        self.record(Primitive::SumRows { x, group })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Sum(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        if let [single] = parts {
            return Ok(*single);
        }
        self.record(Primitive::Concat {
            parts: parts.to_vec(),
            axis: ConcatAxis::Columns,
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        if let [single] = parts {
            return Ok(*single);
        }
        self.record(Primitive::Concat {
            parts: parts.to_vec(),
            axis: ConcatAxis::Rows,
        })
    }

    pub fn select(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        if start == 0 && len == self.shape(x).1 {
            return Ok(x);
        }
        self.record(Primitive::Select { x, start, len })
    }

    pub fn gather(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var, TapeError> {
        self.record(Primitive::Gather { x, index })
    }

    /// Rows `start..start + len` of `x`.
    pub fn row_range(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        if start == 0 && len == self.shape(x).0 {
            return Ok(x);
        }
        let index: Arc<[usize]> = (start..start + len).collect();
        self.gather(x, index)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TapeError> {
        self.record(Primitive::Transpose(a))
    }
}
