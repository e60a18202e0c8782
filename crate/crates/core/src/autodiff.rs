//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Nodes whose inputs
//! carry no gradient are recorded as constants, so value-only forwards cost
//! little more than plain arithmetic. Stop-gradient is expressed with
//! [`Graph::detach`].

use std::rc::Rc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    SmoothAbs(Var, f64),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherCols(Var, Rc<Vec<usize>>),
    NormalizeRows(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    PickPerRow(Var, Vec<usize>),
    Transpose(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Same value as `v`, cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Broadcast-add a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1, "add_row expects a 1×c row");
        assert_eq!(av.cols, rv.cols, "add_row width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows {
            for (x, b) in value.data[r * av.cols..(r + 1) * av.cols].iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiply each row `i` of `a` by `col[i]` (`col` is `r×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.cols, 1, "mul_col expects an r×1 column");
        assert_eq!(av.rows, cv.rows, "mul_col height mismatch");
        let mut value = av.clone();
        for r in 0..value.rows {
            let s = cv.data[r];
            for x in &mut value.data[r * av.cols..(r + 1) * av.cols] {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    /// `sqrt(x² + eps²) − eps`: zero at zero, smooth everywhere.
    pub fn smooth_abs(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).map(|x| (x * x + eps * eps).sqrt() - eps);
        let rg = self.rg(a);
        self.push(value, Op::SmoothAbs(a, eps), rg)
    }

    /// Elementwise clamp; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row_slice(r).iter().sum()).collect();
        let value = Tensor::new(av.rows, 1, data);
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                value.data[r * cols + offset..r * cols + offset + pv.cols]
                    .copy_from_slice(pv.row_slice(r));
            }
            offset += pv.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let value = Tensor::new(
            len,
            av.cols,
            av.data[start * av.cols..(start + len) * av.cols].to_vec(),
        );
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    /// `out[r][j] = a[r][index[j]]`.
    pub fn gather_cols(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let n = index.len();
        let mut data = Vec::with_capacity(av.rows * n);
        for r in 0..av.rows {
            let row = av.row_slice(r);
            data.extend(index.iter().map(|&j| row[j]));
        }
        let value = Tensor::new(av.rows, n, data);
        let rg = self.rg(a);
        self.push(value, Op::GatherCols(a, index), rg)
    }

    /// Divide every row by its L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..av.rows {
            let norm = av.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            for x in &mut value.data[r * av.cols..(r + 1) * av.cols] {
                *x /= norm;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::NormalizeRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..av.rows {
            let row = &mut value.data[r * av.cols..(r + 1) * av.cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row {
                *x -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..av.rows {
            let row = &mut value.data[r * av.cols..(r + 1) * av.cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row {
                *x /= total;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// `out[r] = a[r][index[r]]` as an `r×1` column.
    pub fn pick_per_row(&mut self, a: Var, index: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(index.len(), av.rows, "pick_per_row needs one index per row");
        let data = index.iter().enumerate().map(|(r, &j)| av.at(r, j)).collect();
        let value = Tensor::new(av.rows, 1, data);
        let rg = self.rg(a);
        self.push(value, Op::PickPerRow(a, index), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Backpropagate from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut acc = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, v) in acc.data.iter_mut().zip(g.row_slice(r)) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *row, acc);
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows {
                        let s = cv.data[r];
                        for x in &mut ga.data[r * g.cols..(r + 1) * g.cols] {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*col) {
                    let data = (0..g.rows)
                        .map(|r| g.row_slice(r).iter().zip(av.row_slice(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Tensor::new(g.rows, 1, data));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x);
                self.accumulate(grads, *a, ga);
            }
            Op::SmoothAbs(a, eps) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * x / (x * x + eps * eps).sqrt());
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(av.rows, av.cols, g.item()));
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let gv = g.data[r];
                    ga.data[r * av.cols..(r + 1) * av.cols].fill(gv);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.data[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.data[r * g.cols + offset..r * g.cols + offset + pc]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows;
                    if self.rg(p) {
                        let gp = Tensor::new(
                            pr,
                            g.cols,
                            g.data[offset * g.cols..(offset + pr) * g.cols].to_vec(),
                        );
                        self.accumulate(grads, p, gp);
                    }
                    offset += pr;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                ga.data[start * av.cols..start * av.cols + g.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *a, ga);
            }
            Op::GatherCols(a, index) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..g.rows {
                    for (j, &src) in index.iter().enumerate() {
                        ga.data[r * av.cols + src] += g.data[r * g.cols + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let norm = av.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..av.cols {
                        ga.data[r * av.cols + c] = (gr[c] - y[c] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = g.clone();
                for r in 0..g.rows {
                    let gsum: f64 = g.row_slice(r).iter().sum();
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] -= out.at(r, c).exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g.clone();
                for r in 0..g.rows {
                    let dot: f64 = g.row_slice(r).iter().zip(out.row_slice(r)).map(|(x, y)| x * y).sum();
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] = out.at(r, c) * (g.at(r, c) - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PickPerRow(a, index) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for (r, &j) in index.iter().enumerate() {
                    ga.data[r * av.cols + j] = g.data[r];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
        let mut out = Tensor::zeros(x.rows, x.cols);
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.data[i];
            xp.data[i] = orig + h;
            let fp = f(&xp);
            xp.data[i] = orig - h;
            let fm = f(&xp);
            xp.data[i] = orig;
            out.data[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn check(build: &dyn Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = build(&mut g, v);
        let analytic = g.backward(out).get(v).cloned().unwrap();
        let numeric = numeric_grad(&eval, &x, 1e-6);
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Tensor {
        Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.4, -0.5]])
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(&|g, x| { let y = g.silu(x); g.sum(y) }, sample());
        check(&|g, x| { let y = g.sigmoid(x); let y = g.square(y); g.sum(y) }, sample());
        check(&|g, x| { let y = g.smooth_abs(x, 1e-3); g.mean(y) }, sample());
        check(&|g, x| { let y = g.square(x); let y = g.add_scalar(y, 1.0); let y = g.log(y); g.sum(y) }, sample());
        check(&|g, x| { let y = g.mul(x, x); let y = g.scale(y, 0.5); g.sum(y) }, sample());
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let w = Tensor::from_rows(&[vec![0.2, -0.4], vec![0.9, 0.1], vec![-0.3, 0.8]]);
        check(
            &move |g, x| {
                let wv = g.constant(w.clone());
                let y = g.matmul(x, wv);
                let y = g.normalize_rows(y);
                let t = g.transpose(y);
                let y = g.matmul(y, t);
                let y = g.square(y);
                g.sum(y)
            },
            sample(),
        );
        check(
            &|g, x| {
                let ls = g.log_softmax_rows(x);
                let p = g.pick_per_row(ls, vec![2, 0]);
                g.sum(p)
            },
            sample(),
        );
        check(
            &|g, x| {
                let sm = g.softmax_rows(x);
                let w = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]));
                let e = g.matmul(sm, w);
                let e = g.square(e);
                g.sum(e)
            },
            sample(),
        );
        check(
            &|g, x| {
                let a = g.slice_rows(x, 1, 1);
                let b = g.slice_rows(x, 0, 1);
                let c = g.concat_rows(&[a, b, a]);
                let d = g.concat_cols(&[c, c]);
                let e = g.gather_cols(d, Rc::new(vec![0, 4, 4, 2]));
                let s = g.sum_cols(e);
                let s = g.square(s);
                g.sum(s)
            },
            sample(),
        );
        check(
            &|g, x| {
                let col = g.slice_rows(x, 0, 1);
                let col = g.transpose(col);
                let col = g.slice_rows(col, 0, 2);
                let y = g.mul_col(x, col);
                let row = g.slice_rows(x, 1, 1);
                let y = g.add_row(y, row);
                let y = g.square(y);
                g.sum(y)
            },
            sample(),
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        let y = g.square(c);
        assert!(!g.requires_grad(y));
    }
}
