//! Reverse-mode automatic differentiation on a flat tape of matrix ops.
//!
//! A [`Tape`] records every operation as a node holding its output value;
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients for
//! every node that (transitively) depends on a gradient-requiring leaf. The op
//! set is exactly what the transformer forward pass and the alignment
//! objectives need; norms and softmax use analytic backward rules.

mod adam;

pub use adam::Adam;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Targets (and per-row weights) for the cross-entropy op. A weight of zero
/// masks the row out of both the loss and its gradient.
#[derive(Debug, Clone)]
pub struct CeTargets {
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
}

impl CeTargets {
    /// All rows weighted equally.
    pub fn dense(ids: Vec<usize>) -> Self {
        let weights = vec![1.0; ids.len()];
        Self { ids, weights }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Row-broadcast add: (m x n) + (1 x n).
    AddRow(Var, Var),
    /// Hadamard product of same-shape matrices.
    Mul(Var, Var),
    /// Row-broadcast multiply: (m x n) * (1 x n).
    MulRow(Var, Var),
    Scale(Var, f64),
    /// Multiply by a 1x1 tape scalar.
    ScaleVar(Var, Var),
    Transpose(Var),
    RowSoftmax(Var),
    Gelu(Var),
    Relu(Var),
    LayerNormCore(Var, f64),
    RmsNormCore(Var, f64),
    CrossEntropy(Var, CeTargets),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Slice {
        input: Var,
        r0: usize,
        c0: usize,
    },
    Exp(Var),
    RowNormalize(Var),
    ColNormalize(Var),
    Sum(Var),
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Leaf whose gradient will be computed.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    /// Adds a `1 x n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims();
        if self.value(v).dims() != (1, n) {
            return Err(Error::ShapeMismatch {
                op: "Tape::add_row",
                expected: format!("1x{n}"),
                got: format!("{}x{}", self.value(v).rows(), self.value(v).cols()),
            });
        }
        let row = self.value(v).row(0).to_vec();
        let value = Matrix::from_fn(m, n, |i, j| self.value(a).get(i, j) + row[j]);
        let needs = self.needs(&[a, v]);
        Ok(self.push(Op::AddRow(a, v), value, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::ShapeMismatch {
                op: "Tape::mul",
                expected: format!("{:?}", self.value(a).dims()),
                got: format!("{:?}", self.value(b).dims()),
            });
        }
        let value = Matrix::from_fn(self.value(a).rows(), self.value(a).cols(), |i, j| {
            self.value(a).get(i, j) * self.value(b).get(i, j)
        });
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, needs))
    }

    /// Multiplies every row of an `m x n` matrix by a `1 x n` row vector.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims();
        if self.value(v).dims() != (1, n) {
            return Err(Error::ShapeMismatch {
                op: "Tape::mul_row",
                expected: format!("1x{n}"),
                got: format!("{}x{}", self.value(v).rows(), self.value(v).cols()),
            });
        }
        let row = self.value(v).row(0).to_vec();
        let value = Matrix::from_fn(m, n, |i, j| self.value(a).get(i, j) * row[j]);
        let needs = self.needs(&[a, v]);
        Ok(self.push(Op::MulRow(a, v), value, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scaled(c);
        let needs = self.needs(&[a]);
        self.push(Op::Scale(a, c), value, needs)
    }

    /// Multiplies a matrix by a `1 x 1` tape scalar.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).dims() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "Tape::scale_var",
                expected: "1x1 scalar".into(),
                got: format!("{:?}", self.value(s).dims()),
            });
        }
        let c = self.value(s).get(0, 0);
        let value = self.value(a).scaled(c);
        let needs = self.needs(&[a, s]);
        Ok(self.push(Op::ScaleVar(a, s), value, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let needs = self.needs(&[a]);
        self.push(Op::Transpose(a), value, needs)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.dims();
        let mut value = Matrix::zeros(m, n);
        for i in 0..m {
            let row = x.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                value.set(i, j, e);
                denom += e;
            }
            for j in 0..n {
                value.set(i, j, value.get(i, j) / denom);
            }
        }
        let needs = self.needs(&[a]);
        self.push(Op::RowSoftmax(a), value, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let needs = self.needs(&[a]);
        self.push(Op::Gelu(a), value, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let needs = self.needs(&[a]);
        self.push(Op::Relu(a), value, needs)
    }

    /// Per-row `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layernorm_core(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (m, n) = x.dims();
        let mut value = Matrix::zeros(m, n);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                value.set(i, j, (row[j] - mean) * inv);
            }
        }
        let needs = self.needs(&[a]);
        self.push(Op::LayerNormCore(a, eps), value, needs)
    }

    /// Per-row `x / sqrt(mean(x^2) + eps)`, no affine part.
    pub fn rmsnorm_core(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (m, n) = x.dims();
        let mut value = Matrix::zeros(m, n);
        for i in 0..m {
            let row = x.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..n {
                value.set(i, j, row[j] * inv);
            }
        }
        let needs = self.needs(&[a]);
        self.push(Op::RmsNormCore(a, eps), value, needs)
    }

    /// Mean masked cross-entropy of row-wise logits against target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: CeTargets) -> Result<Var> {
        let x = self.value(logits);
        let (m, n) = x.dims();
        if targets.ids.len() != m || targets.weights.len() != m {
            return Err(Error::ShapeMismatch {
                op: "Tape::cross_entropy",
                expected: format!("{m} targets and weights"),
                got: format!("{} / {}", targets.ids.len(), targets.weights.len()),
            });
        }
        if let Some(&bad) = targets.ids.iter().find(|&&t| t >= n) {
            return Err(Error::ConfigMismatch {
                detail: format!("cross_entropy: target id {bad} out of range (vocab {n})"),
            });
        }
        let total_w: f64 = targets.weights.iter().sum();
        if !(total_w > 0.0) {
            return Err(Error::ConfigMismatch {
                detail: "cross_entropy: all rows masked out".into(),
            });
        }
        let mut loss = 0.0;
        for i in 0..m {
            let w = targets.weights[i];
            if w == 0.0 {
                continue;
            }
            let row = x.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[targets.ids[i]]);
        }
        loss /= total_w;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy(logits, targets),
            Matrix::new(1, 1, vec![loss])?,
            needs,
        ))
    }

    /// Selects rows of a table by index (rows may repeat).
    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::ConfigMismatch {
                detail: format!("gather_rows: row {bad} out of range ({} rows)", t.rows()),
            });
        }
        let value = Matrix::from_fn(ids.len(), t.cols(), |i, j| t.get(ids[i], j));
        let needs = self.needs(&[table]);
        Ok(self.push(Op::GatherRows(table, ids), value, needs))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput {
                context: "Tape::concat_rows".into(),
            });
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "Tape::concat_rows",
                    expected: format!("{cols} columns"),
                    got: format!("{} columns", v.cols()),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::new(rows, cols, data)?;
        let needs = self.needs(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, needs))
    }

    /// Sub-block `[r0, r1) x [c0, c1)`.
    pub fn slice(&mut self, a: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Var> {
        let x = self.value(a);
        if r1 > x.rows() || c1 > x.cols() || r0 >= r1 || c0 >= c1 {
            return Err(Error::ShapeMismatch {
                op: "Tape::slice",
                expected: format!("ranges within {}x{}", x.rows(), x.cols()),
                got: format!("[{r0},{r1}) x [{c0},{c1})"),
            });
        }
        let value = Matrix::from_fn(r1 - r0, c1 - c0, |i, j| x.get(r0 + i, c0 + j));
        let needs = self.needs(&[a]);
        Ok(self.push(Op::Slice { input: a, r0, c0 }, value, needs))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let needs = self.needs(&[a]);
        self.push(Op::Exp(a), value, needs)
    }

    /// Divides each row by its sum (sums must be nonzero).
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.dims();
        let mut value = Matrix::zeros(m, n);
        for i in 0..m {
            let s: f64 = x.row(i).iter().sum();
            for j in 0..n {
                value.set(i, j, x.get(i, j) / s);
            }
        }
        let needs = self.needs(&[a]);
        self.push(Op::RowNormalize(a), value, needs)
    }

    /// Divides each column by its sum (sums must be nonzero).
    pub fn col_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.dims();
        let mut value = Matrix::zeros(m, n);
        for j in 0..n {
            let s: f64 = (0..m).map(|i| x.get(i, j)).sum();
            for i in 0..m {
                value.set(i, j, x.get(i, j) / s);
            }
        }
        let needs = self.needs(&[a]);
        self.push(Op::ColNormalize(a), value, needs)
    }

    /// Sum of all entries, as a `1 x 1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(&[a]);
        self.push(Op::Sum(a), Matrix::new(1, 1, vec![s]).unwrap(), needs)
    }

    /// Backpropagates from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dims() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "Tape::backward",
                expected: "1x1 loss".into(),
                got: format!("{:?}", self.value(loss).dims()),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::new(1, 1, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let add_to = |grads: &mut [Option<Matrix>], v: Var, piece: Matrix| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => *existing = existing.add(&piece)?,
                slot @ None => *slot = Some(piece),
            }
            Ok(())
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_transb(self.value(*b))?;
                let gb = self.value(*a).matmul_transa(g)?;
                add_to(grads, *a, ga)?;
                add_to(grads, *b, gb)?;
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone())?;
                add_to(grads, *b, g.clone())?;
            }
            Op::AddRow(a, v) => {
                add_to(grads, *a, g.clone())?;
                let mut col_sum = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (s, &x) in col_sum.iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                add_to(grads, *v, Matrix::from_row(&col_sum))?;
            }
            Op::Mul(a, b) => {
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    g.get(i, j) * self.value(*b).get(i, j)
                });
                let gb = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    g.get(i, j) * self.value(*a).get(i, j)
                });
                add_to(grads, *a, ga)?;
                add_to(grads, *b, gb)?;
            }
            Op::MulRow(a, v) => {
                let row = self.value(*v).row(0).to_vec();
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * row[j]);
                let mut gv = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        gv[j] += g.get(i, j) * self.value(*a).get(i, j);
                    }
                }
                add_to(grads, *a, ga)?;
                add_to(grads, *v, Matrix::from_row(&gv))?;
            }
            Op::Scale(a, c) => add_to(grads, *a, g.scaled(*c))?,
            Op::ScaleVar(a, s) => {
                let c = self.value(*s).get(0, 0);
                add_to(grads, *a, g.scaled(c))?;
                let gs = g.frobenius_inner(self.value(*a))?;
                add_to(grads, *s, Matrix::new(1, 1, vec![gs])?)?;
            }
            Op::Transpose(a) => add_to(grads, *a, g.transpose())?,
            Op::RowSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..g.cols() {
                        gx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                add_to(grads, *a, gx)?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let gx = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    g.get(i, j) * gelu_grad(x.get(i, j))
                });
                add_to(grads, *a, gx)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let gx = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    if x.get(i, j) > 0.0 {
                        g.get(i, j)
                    } else {
                        0.0
                    }
                });
                add_to(grads, *a, gx)?;
            }
            Op::LayerNormCore(a, eps) => {
                let x = self.value(*a);
                let y = &self.nodes[idx].value;
                let n = x.cols() as f64;
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let row = x.row(i);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean: f64 = g.row(i).iter().sum::<f64>() / n;
                    let gy_mean: f64 =
                        g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..x.cols() {
                        gx.set(
                            i,
                            j,
                            inv * (g.get(i, j) - g_mean - y.get(i, j) * gy_mean),
                        );
                    }
                }
                add_to(grads, *a, gx)?;
            }
            Op::RmsNormCore(a, eps) => {
                let x = self.value(*a);
                let y = &self.nodes[idx].value;
                let n = x.cols() as f64;
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let ms = x.row(i).iter().map(|v| v * v).sum::<f64>() / n;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let gy_mean: f64 =
                        g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..x.cols() {
                        gx.set(i, j, inv * (g.get(i, j) - y.get(i, j) * gy_mean));
                    }
                }
                add_to(grads, *a, gx)?;
            }
            Op::CrossEntropy(logits, targets) => {
                let x = self.value(*logits);
                let scale = g.get(0, 0);
                let total_w: f64 = targets.weights.iter().sum();
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let w = targets.weights[i];
                    if w == 0.0 {
                        continue;
                    }
                    let row = x.row(i);
                    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    for j in 0..x.cols() {
                        let p = (row[j] - max).exp() / denom;
                        let onehot = if j == targets.ids[i] { 1.0 } else { 0.0 };
                        gx.set(i, j, scale * w / total_w * (p - onehot));
                    }
                }
                add_to(grads, *logits, gx)?;
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..t.cols() {
                        gt.set(id, j, gt.get(id, j) + g.get(i, j));
                    }
                }
                add_to(grads, *table, gt)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let piece =
                        Matrix::from_fn(rows, g.cols(), |i, j| g.get(offset + i, j));
                    add_to(grads, p, piece)?;
                    offset += rows;
                }
            }
            Op::Slice { input, r0, c0 } => {
                let x = self.value(*input);
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        gx.set(r0 + i, c0 + j, g.get(i, j));
                    }
                }
                add_to(grads, *input, gx)?;
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                let gx = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * y.get(i, j));
                add_to(grads, *a, gx)?;
            }
            Op::RowNormalize(a) => {
                let x = self.value(*a);
                let y = &self.nodes[idx].value;
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let s: f64 = x.row(i).iter().sum();
                    let gy: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..x.cols() {
                        gx.set(i, j, (g.get(i, j) - gy) / s);
                    }
                }
                add_to(grads, *a, gx)?;
            }
            Op::ColNormalize(a) => {
                let x = self.value(*a);
                let y = &self.nodes[idx].value;
                let mut gx = Matrix::zeros(x.rows(), x.cols());
                for j in 0..x.cols() {
                    let s: f64 = (0..x.rows()).map(|i| x.get(i, j)).sum();
                    let gy: f64 = (0..x.rows()).map(|i| g.get(i, j) * y.get(i, j)).sum();
                    for i in 0..x.rows() {
                        gx.set(i, j, (g.get(i, j) - gy) / s);
                    }
                }
                add_to(grads, *a, gx)?;
            }
            Op::Sum(a) => {
                let c = g.get(0, 0);
                let x = self.value(*a);
                add_to(grads, *a, Matrix::from_fn(x.rows(), x.cols(), |_, _| c))?;
            }
        }
        Ok(())
    }
}

/// Tanh-approximation GELU (the GPT-2 variant).
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
