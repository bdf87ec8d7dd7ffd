//! Reverse-mode differentiation over an explicit per-step trace.
//!
//! Every operation is evaluated eagerly when it is recorded, so the tape
//! always holds the forward values. [`Tape::forward`] replays the trace
//! with new named inputs and [`Tape::backward`] walks it in reverse.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, NdArray};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Leaf {
    Input(String),
    Param(String),
    Constant,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(Leaf),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { input: Var, start: usize, end: usize },
    Row { input: Var, index: usize },
    Sum(Var),
    Reshape { input: Var, shape: Vec<usize> },
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    MaxPool2d { input: Var, size: usize, stride: usize },
    LstmCell { gates: Var, cell: Var, peephole: Option<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(Leaf::Input(_)) => "input",
            Op::Leaf(Leaf::Param(_)) => "param",
            Op::Leaf(Leaf::Constant) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Concat(_) => "concat",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Row { .. } => "row",
            Op::Sum(_) => "sum",
            Op::Reshape { .. } => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::LstmCell { .. } => "lstm_cell",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: NdArray,
    /// Whether any input or parameter leaf is upstream of this node.
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
    params: BTreeMap<String, Var>,
    inputs: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&NdArray> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, zero-filled when no path reached it.
    pub fn wrt_or_zero(&self, var: Var) -> NdArray {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| NdArray::zeros(&self.shapes[var.0]))
    }

    /// One gradient per named parameter, same shape as the parameter.
    pub fn params(&self) -> BTreeMap<String, NdArray> {
        self.params
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt_or_zero(v)))
            .collect()
    }

    /// One gradient per named input, same shape as the input.
    pub fn inputs(&self) -> BTreeMap<String, NdArray> {
        self.inputs
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt_or_zero(v)))
            .collect()
    }
}

/// The computation record: an append-only, topologically ordered trace.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
    outputs: BTreeMap<String, Var>,
    stale: bool,
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

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn describe(&self, idx: usize) -> String {
        match &self.nodes[idx].op {
            Op::Leaf(Leaf::Input(n)) => format!("input '{n}'"),
            Op::Leaf(Leaf::Param(n)) => format!("param '{n}'"),
            op => format!("node #{idx} ({})", op.name()),
        }
    }

    fn check_finite(&self, value: &NdArray, what: impl FnOnce() -> String) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what()))
        }
    }

    fn leaf(&mut self, leaf: Leaf, value: NdArray) -> Result<Var> {
        let v = Var(self.nodes.len());
        match &leaf {
            Leaf::Input(n) | Leaf::Param(n) => {
                if self.names.contains_key(n) {
                    return Err(Error::State(format!("leaf '{n}' is already bound on this tape")));
                }
                self.check_finite(&value, || format!("leaf '{n}'"))?;
                self.names.insert(n.clone(), v);
            }
            Leaf::Constant => {}
        }
        let requires_grad = !matches!(leaf, Leaf::Constant);
        self.nodes.push(Node {
            op: Op::Leaf(leaf),
            value,
            requires_grad,
        });
        Ok(v)
    }

    /// Declares a named differentiable input.
    pub fn input(&mut self, name: &str, value: NdArray) -> Result<Var> {
        self.leaf(Leaf::Input(name.to_string()), value)
    }

    /// Declares a named parameter. Each parameter may appear once per tape.
    pub fn param(&mut self, name: &str, value: NdArray) -> Result<Var> {
        self.leaf(Leaf::Param(name.to_string()), value)
    }

    /// A non-differentiable constant (masks, targets).
    pub fn constant(&mut self, value: NdArray) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(Leaf::Constant),
            value,
            requires_grad: false,
        });
        v
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let idx = self.nodes.len();
        let value = self.eval(&op).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape(format!("node #{idx} ({})", op.name()), detail),
            other => other,
        })?;
        let requires_grad = self.any_requires_grad(&op);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(idx))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_requires_grad(&self, op: &Op) -> bool {
        match op {
            Op::Leaf(_) => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.requires(*a) || self.requires(*b)
            }
            Op::Scale(a, _) | Op::Tanh(a) | Op::Sigmoid(a) | Op::Relu(a) | Op::Softmax(a) | Op::LogSoftmax(a) | Op::Sum(a) => {
                self.requires(*a)
            }
            Op::Concat(parts) | Op::ConcatRows(parts) => parts.iter().any(|p| self.requires(*p)),
            Op::SliceCols { input, .. } | Op::Row { input, .. } | Op::Reshape { input, .. } | Op::MaxPool2d { input, .. } => {
                self.requires(*input)
            }
            Op::Conv2d { input, weight, bias, .. } => {
                self.requires(*input) || self.requires(*weight) || self.requires(*bias)
            }
            Op::LstmCell { gates, cell, peephole } => {
                self.requires(*gates) || self.requires(*cell) || peephole.is_some_and(|p| self.requires(p))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.push(Op::Scale(a, k))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }
    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }
    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(a))
    }
    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec()))
    }
    /// Stacks rank-2 arrays along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }
    pub fn slice_cols(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols { input, start, end })
    }
    pub fn row(&mut self, input: Var, index: usize) -> Result<Var> {
        self.push(Op::Row { input, index })
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape {
            input,
            shape: shape.to_vec(),
        })
    }
    /// 2-D convolution of a `[C, H, W]` input with `[F, C, k, k]` filters.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        self.push(Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        })
    }
    pub fn max_pool2d(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        self.push(Op::MaxPool2d { input, size, stride })
    }
    /// Fused peephole LSTM cell. `gates` holds the pre-activations
    /// `[z_i | z_f | z_c | z_o]` (`[B, 4H]`), `cell` the previous cell state
    /// (`[B, H]`) and `peephole` the diagonal weights `[w_ci | w_cf | w_co]`
    /// (`[1, 3H]`). The result is `[h | c]`, shape `[B, 2H]`.
    pub fn lstm_cell(&mut self, gates: Var, cell: Var, peephole: Option<Var>) -> Result<Var> {
        self.push(Op::LstmCell { gates, cell, peephole })
    }

    /// Registers `var` as a named output reported by [`Tape::forward`].
    pub fn mark_output(&mut self, name: &str, var: Var) {
        self.outputs.insert(name.to_string(), var);
    }

    pub fn outputs(&self) -> BTreeMap<String, NdArray> {
        self.outputs
            .iter()
            .map(|(n, &v)| (n.clone(), self.value(v).clone()))
            .collect()
    }

    /// Replaces the value of a named input. The record must be replayed with
    /// [`Tape::forward`] before it can be differentiated again.
    pub fn set_input(&mut self, name: &str, value: NdArray) -> Result<()> {
        let v = self
            .lookup(name)
            .ok_or_else(|| Error::InvalidInput(format!("no input named '{name}'")))?;
        if !matches!(self.nodes[v.0].op, Op::Leaf(Leaf::Input(_))) {
            return Err(Error::InvalidInput(format!("'{name}' is not an input")));
        }
        if self.shape(v) != value.shape() {
            return Err(Error::shape(
                format!("input '{name}'"),
                format!("declared {:?}, got {:?}", self.shape(v), value.shape()),
            ));
        }
        self.check_finite(&value, || format!("input '{name}'"))?;
        self.nodes[v.0].value = value;
        self.stale = true;
        Ok(())
    }

    /// Replays the whole trace with new values for the named inputs and
    /// returns the marked outputs.
    pub fn forward(&mut self, inputs: &BTreeMap<String, NdArray>) -> Result<BTreeMap<String, NdArray>> {
        for (name, value) in inputs {
            self.set_input(name, value.clone())?;
        }
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf(_)) {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let value = self.eval(&op).map_err(|e| match e {
                Error::Shape { detail, .. } => Error::shape(self.describe(idx), detail),
                other => other,
            })?;
            self.nodes[idx].value = value;
        }
        self.stale = false;
        Ok(self.outputs())
    }

    fn eval(&self, op: &Op) -> Result<NdArray> {
        let value = match op {
            Op::Leaf(_) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![0.0; m * n];
                matmul_acc(self.value(*a).data(), self.value(*b).data(), &mut out, m, k, n);
                NdArray::from_parts(vec![m, n], out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if va.shape() != vb.shape() {
                    return Err(Error::shape(op.name(), format!("{:?} vs {:?}", va.shape(), vb.shape())));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
                NdArray::from_parts(va.shape().to_vec(), data)
            }
            Op::AddRow(a, r) => {
                let (va, vr) = (self.value(*a), self.value(*r));
                let n = va.cols();
                if va.rank() != 2 || vr.len() != n {
                    return Err(Error::shape("add_row", format!("{:?} + {:?}", va.shape(), vr.shape())));
                }
                let mut out = va.clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (o, b) in row.iter_mut().zip(vr.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Scale(a, k) => self.value(*a).map(|x| x * k),
            Op::Tanh(a) => self.value(*a).map(f64::tanh),
            Op::Sigmoid(a) => self.value(*a).map(sigmoid),
            Op::Relu(a) => self.value(*a).map(|x| x.max(0.0)),
            Op::Softmax(a) => {
                let mut out = self.value(*a).clone();
                let n = out.cols();
                for row in out.data_mut().chunks_mut(n) {
                    softmax_in_place(row);
                }
                out
            }
            Op::LogSoftmax(a) => {
                let mut out = self.value(*a).clone();
                let n = out.cols();
                for row in out.data_mut().chunks_mut(n) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                    for x in row.iter_mut() {
                        *x -= lse;
                    }
                }
                out
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(Error::shape("concat", "no inputs"));
                }
                let rows = self.value(parts[0]).rows();
                let rank = self.value(parts[0]).rank();
                let mut total = 0;
                for p in parts {
                    let v = self.value(*p);
                    if v.rows() != rows || v.rank() != rank || rank > 2 {
                        return Err(Error::shape(
                            "concat",
                            format!("{:?} vs {:?}", self.shape(parts[0]), v.shape()),
                        ));
                    }
                    total += v.cols();
                }
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row_slice(r));
                    }
                }
                let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
                NdArray::from_parts(shape, data)
            }
            Op::ConcatRows(parts) => {
                if parts.is_empty() {
                    return Err(Error::shape("concat_rows", "no inputs"));
                }
                let cols = self.value(parts[0]).cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for p in parts {
                    let v = self.value(*p);
                    if v.rank() != 2 || v.cols() != cols {
                        return Err(Error::shape(
                            "concat_rows",
                            format!("{:?} vs {:?}", self.shape(parts[0]), v.shape()),
                        ));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                NdArray::from_parts(vec![rows, cols], data)
            }
            Op::SliceCols { input, start, end } => {
                let v = self.value(*input);
                if v.rank() != 2 || start >= end || *end > v.cols() {
                    return Err(Error::shape("slice_cols", format!("[{start}, {end}) of {:?}", v.shape())));
                }
                let mut data = Vec::with_capacity(v.rows() * (end - start));
                for r in 0..v.rows() {
                    data.extend_from_slice(&v.row_slice(r)[*start..*end]);
                }
                NdArray::from_parts(vec![v.rows(), end - start], data)
            }
            Op::Row { input, index } => {
                let v = self.value(*input);
                if v.rank() != 2 || *index >= v.rows() {
                    return Err(Error::shape("row", format!("row {index} of {:?}", v.shape())));
                }
                NdArray::from_parts(vec![1, v.cols()], v.row_slice(*index).to_vec())
            }
            Op::Sum(a) => NdArray::scalar(self.value(*a).sum()),
            Op::Reshape { input, shape } => self.value(*input).clone().reshaped(shape.clone())?,
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let geo = ConvGeometry::new(self.shape(*input), self.shape(*weight), self.shape(*bias), *stride, *pad)?;
                conv2d_forward(&geo, self.value(*input).data(), self.value(*weight).data(), self.value(*bias).data())
            }
            Op::MaxPool2d { input, size, stride } => {
                let geo = PoolGeometry::new(self.shape(*input), *size, *stride)?;
                let (out, _) = max_pool_forward(&geo, self.value(*input).data());
                out
            }
            Op::LstmCell { gates, cell, peephole } => {
                let (z, c) = (self.value(*gates), self.value(*cell));
                let hsize = c.cols();
                if z.rank() != 2 || c.rank() != 2 || z.rows() != c.rows() || z.cols() != 4 * hsize {
                    return Err(Error::shape("lstm_cell", format!("gates {:?}, cell {:?}", z.shape(), c.shape())));
                }
                let peep = match peephole {
                    Some(p) => {
                        let pv = self.value(*p);
                        if pv.len() != 3 * hsize {
                            return Err(Error::shape("lstm_cell", format!("peephole {:?} for H={hsize}", pv.shape())));
                        }
                        Some(pv.data())
                    }
                    None => None,
                };
                let mut out = Vec::with_capacity(z.rows() * 2 * hsize);
                for r in 0..z.rows() {
                    let g = lstm_gates(z.row_slice(r), c.row_slice(r), peep);
                    out.extend(g.o.iter().zip(&g.c).map(|(o, c)| o * c.tanh()));
                    out.extend_from_slice(&g.c);
                }
                NdArray::from_parts(vec![z.rows(), 2 * hsize], out)
            }
        };
        Ok(value)
    }

    /// Propagates `seed` (the gradient of some scalar with respect to
    /// `output`) back through the trace.
    pub fn backward(&self, output: Var, seed: &NdArray) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called on an empty record; run forward first".into()));
        }
        if self.stale {
            return Err(Error::State("inputs changed since the last forward pass".into()));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                self.describe(output.0),
                format!("seed {:?} does not match output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<NdArray>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    if self.requires(*a) {
                        matmul_bt_acc(g.data(), bv, acc(&mut grads, self, *a).data_mut(), m, k, n);
                    }
                    if self.requires(*b) {
                        matmul_at_acc(av, g.data(), acc(&mut grads, self, *b).data_mut(), m, k, n);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, self, *a).add_assign(&g);
                    acc(&mut grads, self, *b).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, self, *a).add_assign(&g);
                    let gb = acc(&mut grads, self, *b);
                    for (o, x) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, self, *a).add_assign(&g);
                    let n = g.cols();
                    let gr = acc(&mut grads, self, *r);
                    for row in g.data().chunks(n) {
                        for (o, x) in gr.data_mut().iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, self, *a);
                    for ((o, x), y) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += x * y;
                    }
                    let gb = acc(&mut grads, self, *b);
                    for ((o, x), y) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += x * y;
                    }
                }
                Op::Scale(a, k) => {
                    let ga = acc(&mut grads, self, *a);
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += k * x;
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, self, *a);
                    for ((o, x), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += x * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, self, *a);
                    for ((o, x), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += x * yv * (1.0 - yv);
                    }
                }
                Op::Relu(a) => {
                    let xin = self.value(*a);
                    let ga = acc(&mut grads, self, *a);
                    for ((o, x), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(xin.data()) {
                        if *xv > 0.0 {
                            *o += x;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let ga = acc(&mut grads, self, *a);
                    for ((o, gr), yr) in ga.data_mut().chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(yr) {
                            *oi += yi * (gi - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let ga = acc(&mut grads, self, *a);
                    for ((o, gr), yr) in ga.data_mut().chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((oi, gi), yi) in o.iter_mut().zip(gr).zip(yr) {
                            *oi += gi - yi.exp() * total;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        let gp = acc(&mut grads, self, *p);
                        for r in 0..rows {
                            let src = &g.data()[r * total + offset..r * total + offset + c];
                            for (o, x) in gp.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        let gp = acc(&mut grads, self, *p);
                        for (o, x) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *o += x;
                        }
                        offset += len;
                    }
                }
                Op::SliceCols { input, start, end } => {
                    let cols = self.value(*input).cols();
                    let w = end - start;
                    let gi = acc(&mut grads, self, *input);
                    for (r, src) in g.data().chunks(w).enumerate() {
                        let dst = &mut gi.data_mut()[r * cols + start..r * cols + end];
                        for (o, x) in dst.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                }
                Op::Row { input, index } => {
                    let cols = self.value(*input).cols();
                    let gi = acc(&mut grads, self, *input);
                    let dst = &mut gi.data_mut()[index * cols..(index + 1) * cols];
                    for (o, x) in dst.iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    for o in acc(&mut grads, self, *a).data_mut() {
                        *o += s;
                    }
                }
                Op::Reshape { input, .. } => {
                    let gi = acc(&mut grads, self, *input);
                    for (o, x) in gi.data_mut().iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    let geo = ConvGeometry::new(self.shape(*input), self.shape(*weight), self.shape(*bias), *stride, *pad)?;
                    let xin = self.value(*input).data();
                    let w = self.value(*weight).data();
                    if self.requires(*input) {
                        conv2d_backward_input(&geo, g.data(), w, acc(&mut grads, self, *input).data_mut());
                    }
                    conv2d_backward_weight(&geo, g.data(), xin, acc(&mut grads, self, *weight).data_mut());
                    let gb = acc(&mut grads, self, *bias);
                    let plane = geo.out_h * geo.out_w;
                    for (f, o) in gb.data_mut().iter_mut().enumerate() {
                        *o += g.data()[f * plane..(f + 1) * plane].iter().sum::<f64>();
                    }
                }
                Op::MaxPool2d { input, size, stride } => {
                    let geo = PoolGeometry::new(self.shape(*input), *size, *stride)?;
                    let (_, argmax) = max_pool_forward(&geo, self.value(*input).data());
                    let gi = acc(&mut grads, self, *input);
                    for (o, &src) in g.data().iter().zip(&argmax) {
                        gi.data_mut()[src] += o;
                    }
                }
                Op::LstmCell { gates, cell, peephole } => {
                    let hsize = self.value(*cell).cols();
                    let rows = self.value(*cell).rows();
                    let peep = peephole.map(|p| self.value(p).data().to_vec());
                    let mut dz = vec![0.0; rows * 4 * hsize];
                    let mut dcp = vec![0.0; rows * hsize];
                    let mut dpeep = vec![0.0; 3 * hsize];
                    for r in 0..rows {
                        let cp = self.value(*cell).row_slice(r);
                        let s = lstm_gates(self.value(*gates).row_slice(r), cp, peep.as_deref());
                        let gr = &g.data()[r * 2 * hsize..(r + 1) * 2 * hsize];
                        let (dh, dc_out) = gr.split_at(hsize);
                        let dzr = &mut dz[r * 4 * hsize..(r + 1) * 4 * hsize];
                        for j in 0..hsize {
                            let tc = s.c[j].tanh();
                            let dzo = dh[j] * tc * s.o[j] * (1.0 - s.o[j]);
                            let po = peep.as_ref().map_or(0.0, |p| p[2 * hsize + j]);
                            let dc = dc_out[j] + dh[j] * s.o[j] * (1.0 - tc * tc) + dzo * po;
                            let dzi = dc * s.g[j] * s.i[j] * (1.0 - s.i[j]);
                            let dzf = dc * cp[j] * s.f[j] * (1.0 - s.f[j]);
                            let dzg = dc * s.i[j] * (1.0 - s.g[j] * s.g[j]);
                            dzr[j] = dzi;
                            dzr[hsize + j] = dzf;
                            dzr[2 * hsize + j] = dzg;
                            dzr[3 * hsize + j] = dzo;
                            let (pi, pf) = peep.as_ref().map_or((0.0, 0.0), |p| (p[j], p[hsize + j]));
                            dcp[r * hsize + j] = dc * s.f[j] + dzi * pi + dzf * pf;
                            dpeep[j] += dzi * cp[j];
                            dpeep[hsize + j] += dzf * cp[j];
                            dpeep[2 * hsize + j] += dzo * s.c[j];
                        }
                    }
                    for (o, x) in acc(&mut grads, self, *gates).data_mut().iter_mut().zip(&dz) {
                        *o += x;
                    }
                    if self.requires(*cell) {
                        for (o, x) in acc(&mut grads, self, *cell).data_mut().iter_mut().zip(&dcp) {
                            *o += x;
                        }
                    }
                    if let Some(p) = peephole {
                        for (o, x) in acc(&mut grads, self, *p).data_mut().iter_mut().zip(&dpeep) {
                            *o += x;
                        }
                    }
                }
            }
        }

        let mut params = BTreeMap::new();
        let mut inputs = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Leaf(Leaf::Param(n)) => {
                    params.insert(n.clone(), Var(idx));
                }
                Op::Leaf(Leaf::Input(n)) => {
                    inputs.insert(n.clone(), Var(idx));
                }
                _ => {}
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            params,
            inputs,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Backward pass from a scalar (`[1]`-shaped) output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, &NdArray::scalar(1.0))
    }
}

fn acc<'a>(grads: &'a mut [Option<NdArray>], tape: &Tape, v: Var) -> &'a mut NdArray {
    grads[v.0].get_or_insert_with(|| NdArray::zeros(tape.shape(v)))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

struct GateValues {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
}

/// Gate activations and new cell state of one peephole LSTM row.
fn lstm_gates(z: &[f64], c_prev: &[f64], peep: Option<&[f64]>) -> GateValues {
    let h = c_prev.len();
    let p = |k: usize, j: usize| peep.map_or(0.0, |p| p[k * h + j]);
    let mut v = GateValues {
        i: Vec::with_capacity(h),
        f: Vec::with_capacity(h),
        g: Vec::with_capacity(h),
        o: Vec::with_capacity(h),
        c: Vec::with_capacity(h),
    };
    for j in 0..h {
        let i = sigmoid(z[j] + p(0, j) * c_prev[j]);
        let f = sigmoid(z[h + j] + p(1, j) * c_prev[j]);
        let g = z[2 * h + j].tanh();
        let c = f * c_prev[j] + i * g;
        let o = sigmoid(z[3 * h + j] + p(2, j) * c);
        v.i.push(i);
        v.f.push(f);
        v.g.push(g);
        v.o.push(o);
        v.c.push(c);
    }
    v
}

struct ConvGeometry {
    channels: usize,
    in_h: usize,
    in_w: usize,
    filters: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || weight.len() != 4 || weight[2] != weight[3] || weight[1] != input[0] {
            return Err(Error::shape("conv2d", format!("input {input:?}, filters {weight:?}")));
        }
        if bias.iter().product::<usize>() != weight[0] {
            return Err(Error::shape("conv2d", format!("bias {bias:?} for {} filters", weight[0])));
        }
        let k = weight[2];
        if stride == 0 || input[1] + 2 * pad < k || input[2] + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel {k} does not fit input {input:?} (pad {pad})")));
        }
        Ok(ConvGeometry {
            channels: input[0],
            in_h: input[1],
            in_w: input[2],
            filters: weight[0],
            kernel: k,
            stride,
            pad,
            out_h: (input[1] + 2 * pad - k) / stride + 1,
            out_w: (input[2] + 2 * pad - k) / stride + 1,
        })
    }

    /// Input coordinate hit by output position `o` and kernel offset `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Patch matrix `[C·k·k, out_h·out_w]`, zero where the kernel overhangs.
fn im2col(geo: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let (oh, ow, k) = (geo.out_h, geo.out_w, geo.kernel);
    let plane_in = geo.in_h * geo.in_w;
    let p = oh * ow;
    let mut cols = vec![0.0; geo.channels * k * k * p];
    for c in 0..geo.channels {
        let x_plane = &x[c * plane_in..(c + 1) * plane_in];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let Some(iy) = geo.src(oy, ky, geo.in_h) else { continue };
                    let x_row = &x_plane[iy * geo.in_w..(iy + 1) * geo.in_w];
                    for ox in 0..ow {
                        if let Some(ix) = geo.src(ox, kx, geo.in_w) {
                            row[oy * ow + ox] = x_row[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatters a patch-matrix gradient back onto the input planes.
fn col2im_acc(geo: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow, k) = (geo.out_h, geo.out_w, geo.kernel);
    let plane_in = geo.in_h * geo.in_w;
    let p = oh * ow;
    for c in 0..geo.channels {
        let dx_plane = &mut dx[c * plane_in..(c + 1) * plane_in];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let Some(iy) = geo.src(oy, ky, geo.in_h) else { continue };
                    for ox in 0..ow {
                        if let Some(ix) = geo.src(ox, kx, geo.in_w) {
                            dx_plane[iy * geo.in_w + ix] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(geo: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> NdArray {
    let p = geo.out_h * geo.out_w;
    let ckk = geo.channels * geo.kernel * geo.kernel;
    let mut out = vec![0.0; geo.filters * p];
    for (f, plane) in out.chunks_mut(p).enumerate() {
        plane.iter_mut().for_each(|v| *v = b[f]);
    }
    matmul_acc(w, &im2col(geo, x), &mut out, geo.filters, ckk, p);
    NdArray::from_parts(vec![geo.filters, geo.out_h, geo.out_w], out)
}

fn conv2d_backward_input(geo: &ConvGeometry, g: &[f64], w: &[f64], dx: &mut [f64]) {
    let p = geo.out_h * geo.out_w;
    let ckk = geo.channels * geo.kernel * geo.kernel;
    let mut dcols = vec![0.0; ckk * p];
    matmul_at_acc(w, g, &mut dcols, geo.filters, ckk, p);
    col2im_acc(geo, &dcols, dx);
}

fn conv2d_backward_weight(geo: &ConvGeometry, g: &[f64], x: &[f64], dw: &mut [f64]) {
    let p = geo.out_h * geo.out_w;
    let ckk = geo.channels * geo.kernel * geo.kernel;
    matmul_bt_acc(g, &im2col(geo, x), dw, geo.filters, ckk, p);
}

struct PoolGeometry {
    channels: usize,
    in_h: usize,
    in_w: usize,
    size: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl PoolGeometry {
    fn new(input: &[usize], size: usize, stride: usize) -> Result<Self> {
        if input.len() != 3 || size == 0 || stride == 0 || input[1] < size || input[2] < size {
            return Err(Error::shape("max_pool2d", format!("window {size} on input {input:?}")));
        }
        Ok(PoolGeometry {
            channels: input[0],
            in_h: input[1],
            in_w: input[2],
            size,
            stride,
            out_h: (input[1] - size) / stride + 1,
            out_w: (input[2] - size) / stride + 1,
        })
    }
}

fn max_pool_forward(geo: &PoolGeometry, x: &[f64]) -> (NdArray, Vec<usize>) {
    let mut out = Vec::with_capacity(geo.channels * geo.out_h * geo.out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    for c in 0..geo.channels {
        let base = c * geo.in_h * geo.in_w;
        for oy in 0..geo.out_h {
            for ox in 0..geo.out_w {
                let mut best = base + oy * geo.stride * geo.in_w + ox * geo.stride;
                for dy in 0..geo.size {
                    for dx in 0..geo.size {
                        let i = base + (oy * geo.stride + dy) * geo.in_w + ox * geo.stride + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (
        NdArray::from_parts(vec![geo.channels, geo.out_h, geo.out_w], out),
        argmax,
    )
}
