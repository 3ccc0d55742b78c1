//! Reverse-mode differentiation over a closed set of tensor primitives.
//!
//! Values are computed eagerly as operations are recorded. Nodes are stored
//! in creation order, which is a topological order, so the backward pass is
//! a single reverse sweep.

use crate::error::{dim_err, Error, Result};
use crate::numerics::reduce::{self, ModePick};
use crate::numerics::tensor::{softmax_rows, Tensor};
use crate::scalar::{lit, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a `1 × c` row broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    MaxRows(Var, Vec<usize>),
    MinRows(Var, Vec<usize>),
    MedianRows(Var, Vec<(usize, usize)>),
    ModeRows(Var, Vec<ModePick<T>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    NormalizeRows(Var, Vec<T>),
    SoftmaxRows(Var, T),
    Transpose(Var),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulBt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | Shift(a)
            | Exp(a)
            | Log(a)
            | Relu(a)
            | Sum(a)
            | SumRows(a)
            | SumCols(a)
            | MaxRows(a, _)
            | MinRows(a, _)
            | MedianRows(a, _)
            | ModeRows(a, _)
            | SliceRows(a, _)
            | SliceCols(a, _)
            | NormalizeRows(a, _)
            | SoftmaxRows(a, _)
            | Transpose(a) => vec![*a],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul(..) => "matmul",
            MatMulBt(..) => "matmul_bt",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            AddRow(..) => "add_row",
            Scale(..) => "scale",
            Shift(..) => "shift",
            Exp(..) => "exp",
            Log(..) => "log",
            Relu(..) => "relu",
            Sum(..) => "sum",
            SumRows(..) => "sum_rows",
            SumCols(..) => "sum_cols",
            MaxRows(..) => "max_rows",
            MinRows(..) => "min_rows",
            MedianRows(..) => "median_rows",
            ModeRows(..) => "mode_rows",
            ConcatCols(..) => "concat_cols",
            ConcatRows(..) => "concat_rows",
            SliceRows(..) => "slice_rows",
            SliceCols(..) => "slice_cols",
            NormalizeRows(..) => "normalize_rows",
            SoftmaxRows(..) => "softmax_rows",
            Transpose(..) => "transpose",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Distance of this node's input from a point where the primitive is not
    /// differentiable; infinite for smooth primitives.
    margin: T,
}

/// A single-threaded recording of one forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after position `len`. Handles to those
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            margin: T::infinity(),
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Graph(format!("variable {} is not on this tape", v.0)))
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, margin: T) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            margin,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn smooth(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        self.push(value, op, T::infinity())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul_unchecked(self.value(b))?;
        self.smooth(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul_bt(self.value(b))?;
        self.smooth(v, Op::MatMulBt(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        if x.same_shape(y) {
            Ok(())
        } else {
            Err(dim_err!("{what} of shapes {:?} and {:?}", x.shape(), y.shape()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.smooth(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.smooth(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.smooth(v, Op::Mul(a, b))
    }

    /// Adds a `1 × c` row to every row of an `r × c` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.check(m)?;
        self.check(row)?;
        let (mv, rv) = (self.value(m), self.value(row));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(dim_err!("add_row of {:?} and {:?}", mv.shape(), rv.shape()));
        }
        let c = mv.cols();
        let mut out = mv.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o = *o + rv.data()[i % c];
        }
        let v = Tensor::from_parts(vec![mv.rows(), c], out);
        self.smooth(v, Op::AddRow(m, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * s);
        self.smooth(v, Op::Scale(a, s))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(|x| x + s);
        self.smooth(v, Op::Shift(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(T::exp);
        self.smooth(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Degenerate("log of a non-positive value".into()));
        }
        let v = self.value(a).map(T::ln);
        self.smooth(v, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let margin = x.data().iter().map(|v| v.abs()).fold(T::infinity(), T::min);
        let v = x.map(|v| v.max(T::zero()));
        self.push(v, Op::Relu(a), margin)
    }

    /// Sum of all elements as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().copied().sum();
        self.smooth(Tensor::from_parts(vec![1, 1], vec![s]), Op::Sum(a))
    }

    /// Column sums: `r × c → 1 × c`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let c = x.cols();
        let mut out = vec![T::zero(); c];
        for i in 0..x.rows() {
            for (o, &v) in out.iter_mut().zip(x.row_slice(i)) {
                *o = *o + v;
            }
        }
        self.smooth(Tensor::from_parts(vec![1, c], out), Op::SumRows(a))
    }

    /// Row sums: `r × c → r × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let out: Vec<T> = (0..x.rows()).map(|i| x.row_slice(i).iter().copied().sum()).collect();
        self.smooth(Tensor::from_parts(vec![x.rows(), 1], out), Op::SumCols(a))
    }

    fn columns(x: &Tensor<T>) -> Vec<Vec<T>> {
        (0..x.cols())
            .map(|j| (0..x.rows()).map(|i| x.get(i, j)).collect())
            .collect()
    }

    /// Column maxima: `r × c → 1 × c`.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let cols = Self::columns(self.value(a));
        let picks: Vec<usize> = cols.iter().map(|c| reduce::argmax(c)).collect();
        let out = cols.iter().zip(&picks).map(|(c, &i)| c[i]).collect();
        let margin = cols.iter().map(|c| top_gap(c, true)).fold(T::infinity(), T::min);
        let n = picks.len();
        self.push(Tensor::from_parts(vec![1, n], out), Op::MaxRows(a, picks), margin)
    }

    /// Column minima: `r × c → 1 × c`.
    pub fn min_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let cols = Self::columns(self.value(a));
        let picks: Vec<usize> = cols.iter().map(|c| reduce::argmin(c)).collect();
        let out = cols.iter().zip(&picks).map(|(c, &i)| c[i]).collect();
        let margin = cols.iter().map(|c| top_gap(c, false)).fold(T::infinity(), T::min);
        let n = picks.len();
        self.push(Tensor::from_parts(vec![1, n], out), Op::MinRows(a, picks), margin)
    }

    /// Column medians (midpoint of the central pair for even row counts).
    pub fn median_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let cols = Self::columns(self.value(a));
        let picks: Vec<(usize, usize)> = cols.iter().map(|c| reduce::median_pick(c)).collect();
        let out = cols
            .iter()
            .zip(&picks)
            .map(|(c, &p)| reduce::median_value(c, p))
            .collect();
        let margin = cols
            .iter()
            .map(|c| reduce::median_margin(c))
            .fold(T::infinity(), T::min);
        let n = picks.len();
        self.push(Tensor::from_parts(vec![1, n], out), Op::MedianRows(a, picks), margin)
    }

    /// Column modes per [`reduce::mode_pick`]. The result is piecewise linear
    /// in the selected entries and differentiates as such.
    pub fn mode_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let cols = Self::columns(self.value(a));
        let picks: Vec<ModePick<T>> = cols.iter().map(|c| reduce::mode_pick(c)).collect();
        let out = cols.iter().zip(&picks).map(|(c, p)| p.value(c)).collect();
        let margin = cols
            .iter()
            .zip(&picks)
            .map(|(c, p)| reduce::mode_margin(c, p))
            .fold(T::infinity(), T::min);
        let n = picks.len();
        self.push(Tensor::from_parts(vec![1, n], out), Op::ModeRows(a, picks), margin)
    }

    /// Horizontal concatenation of tensors sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(dim_err!("concat of zero tensors"));
        };
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(dim_err!("concat_cols with differing row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.smooth(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Vertical concatenation of tensors sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(dim_err!("concat of zero tensors"));
        };
        for &p in parts {
            self.check(p)?;
        }
        let cols = self.value(first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(dim_err!("concat_rows with differing column counts"));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        self.smooth(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        if len == 0 || start + len > x.rows() {
            return Err(dim_err!("row slice {start}..{} of {} rows", start + len, x.rows()));
        }
        let c = x.cols();
        let v = Tensor::from_parts(vec![len, c], x.data()[start * c..(start + len) * c].to_vec());
        self.smooth(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        if len == 0 || start + len > x.cols() {
            return Err(dim_err!("column slice {start}..{} of {} cols", start + len, x.cols()));
        }
        let mut out = Vec::with_capacity(x.rows() * len);
        for i in 0..x.rows() {
            out.extend_from_slice(&x.row_slice(i)[start..start + len]);
        }
        self.smooth(Tensor::from_parts(vec![x.rows(), len], out), Op::SliceCols(a, start))
    }

    /// Scales every row to unit L2 norm. Zero rows are a degenerate input.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let mut norms = Vec::with_capacity(x.rows());
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            let row = x.row_slice(i);
            let n = crate::numerics::tensor::norm(row);
            if n == T::zero() {
                return Err(Error::Degenerate(format!("row {i} has zero norm")));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let v = Tensor::from_parts(vec![x.rows(), x.cols()], out);
        self.smooth(v, Op::NormalizeRows(a, norms))
    }

    /// Row-wise temperature softmax.
    pub fn softmax_rows(&mut self, a: Var, temperature: T) -> Result<Var> {
        self.check(a)?;
        if !(temperature > T::zero()) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let v = softmax_rows(self.value(a), temperature);
        self.smooth(v, Op::SoftmaxRows(a, temperature))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).transpose();
        self.smooth(v, Op::Transpose(a))
    }

    /// Smallest distance from a non-differentiable point over every
    /// primitive whose input depends on a parameter.
    pub fn nonsmooth_margin(&self) -> T {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad)
            .map(|n| n.margin)
            .fold(T::infinity(), T::min)
    }

    /// The primitive closest to a non-differentiable point, with its margin.
    pub fn tightest_nonsmooth(&self) -> Option<(&'static str, T)> {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && n.margin.is_finite())
            .min_by(|a, b| a.margin.partial_cmp(&b.margin).expect("finite"))
            .map(|n| (n.op.name(), n.margin))
    }

    /// Propagates d(root)/d(node) to every node that both depends on a
    /// parameter and influences `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.check(root)?;
        if !self.value(root).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            for p in node.op.parents() {
                if p.0 >= idx {
                    return Err(Error::Graph(format!(
                        "node {idx} ({}) references later node {}: cycle",
                        node.op.name(),
                        p.0
                    )));
                }
            }
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |p: Var, contribution: Tensor<T>| {
            if !self.nodes[p.0].requires_grad {
                return;
            }
            match &mut grads[p.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // dA = G·Bᵀ, dB = Aᵀ·G
                send(*a, g.matmul_bt(val(*b))?);
                send(*b, val(*a).matmul_at(g)?);
            }
            Op::MatMulBt(a, b) => {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                send(*a, g.matmul_unchecked(val(*b))?);
                send(*b, g.matmul_at(val(*a))?);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(m, row) => {
                send(*m, g.clone());
                let c = g.cols();
                let mut acc = vec![T::zero(); c];
                for i in 0..g.rows() {
                    for (o, &v) in acc.iter_mut().zip(g.row_slice(i)) {
                        *o = *o + v;
                    }
                }
                send(*row, Tensor::from_parts(vec![1, c], acc));
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * *s)),
            Op::Shift(a) => send(*a, g.clone()),
            Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Log(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Relu(a) => send(*a, g.zip_map(val(*a), |x, y| if y > T::zero() { x } else { T::zero() })),
            Op::Sum(a) => {
                let x = val(*a);
                send(*a, Tensor::filled(&[x.rows(), x.cols()], g.item()));
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let mut out = Vec::with_capacity(x.len());
                for _ in 0..x.rows() {
                    out.extend_from_slice(g.data());
                }
                send(*a, Tensor::from_parts(vec![x.rows(), x.cols()], out));
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let c = x.cols();
                let out = (0..x.len()).map(|k| g.data()[k / c]).collect();
                send(*a, Tensor::from_parts(vec![x.rows(), c], out));
            }
            Op::MaxRows(a, picks) | Op::MinRows(a, picks) => {
                let x = val(*a);
                let mut out = Tensor::zeros(&[x.rows(), x.cols()]);
                let c = x.cols();
                for (j, &i) in picks.iter().enumerate() {
                    out.data_mut()[i * c + j] = g.data()[j];
                }
                send(*a, out);
            }
            Op::MedianRows(a, picks) => {
                let x = val(*a);
                let mut out = Tensor::zeros(&[x.rows(), x.cols()]);
                let c = x.cols();
                let half: T = lit(0.5);
                for (j, &(lo, hi)) in picks.iter().enumerate() {
                    let d = out.data_mut();
                    d[lo * c + j] = d[lo * c + j] + g.data()[j] * half;
                    d[hi * c + j] = d[hi * c + j] + g.data()[j] * half;
                }
                send(*a, out);
            }
            Op::ModeRows(a, picks) => {
                let x = val(*a);
                let mut out = Tensor::zeros(&[x.rows(), x.cols()]);
                let c = x.cols();
                for (j, pick) in picks.iter().enumerate() {
                    let gj = g.data()[j];
                    let d = out.data_mut();
                    match *pick {
                        ModePick::Exact(i) => d[i * c + j] = d[i * c + j] + gj,
                        ModePick::Bin { min_idx, max_idx, frac } => {
                            d[min_idx * c + j] = d[min_idx * c + j] + gj * (T::one() - frac);
                            d[max_idx * c + j] = d[max_idx * c + j] + gj * frac;
                        }
                    }
                }
                send(*a, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut out = Vec::with_capacity(val(p).len());
                    for i in 0..g.rows() {
                        out.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                    }
                    send(p, Tensor::from_parts(vec![g.rows(), w], out));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = val(p).rows();
                    let out = g.data()[offset * c..(offset + r) * c].to_vec();
                    send(p, Tensor::from_parts(vec![r, c], out));
                    offset += r;
                }
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let c = x.cols();
                let mut out = Tensor::zeros(&[x.rows(), c]);
                out.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*a, out);
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let c = x.cols();
                let w = g.cols();
                let mut out = Tensor::zeros(&[x.rows(), c]);
                for i in 0..x.rows() {
                    out.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                send(*a, out);
            }
            Op::NormalizeRows(a, norms) => {
                // y = x/|x|: dx = (g - y (y·g)) / |x|
                let y = &node.value;
                let c = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for (i, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let yg = crate::numerics::tensor::dot(yr, gr);
                    out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * yg) / n));
                }
                send(*a, Tensor::from_parts(vec![y.rows(), c], out));
            }
            Op::SoftmaxRows(a, t) => {
                // y = softmax(x/T): dx = y ⊙ (g - g·y) / T
                let y = &node.value;
                let mut out = Vec::with_capacity(y.len());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let gy = crate::numerics::tensor::dot(yr, gr);
                    out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - gy) / *t));
                }
                send(*a, Tensor::from_parts(vec![y.rows(), y.cols()], out));
            }
            Op::Transpose(a) => send(*a, g.transpose()),
        }
        Ok(())
    }
}

/// Gap between the extreme value of a column and the runner-up.
fn top_gap<T: Scalar>(col: &[T], max: bool) -> T {
    if col.len() < 2 {
        return T::infinity();
    }
    let ord = reduce::order(col);
    let n = ord.len();
    if max {
        col[ord[n - 1]] - col[ord[n - 2]]
    } else {
        col[ord[1]] - col[ord[0]]
    }
}
