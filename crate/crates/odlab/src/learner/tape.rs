//! Minimal reverse-mode automatic differentiation over `Array2<f64>` values.
//!
//! A [`Tape`] records matrix operations as they execute; [`Tape::backward`]
//! replays them in reverse to accumulate gradients. The op set is exactly
//! what the distribution learner needs — dense affine maps, pointwise
//! nonlinearities, row softmax/normalization, concatenation/slicing and the
//! Jensen-Shannon loss against a constant target.

use ndarray::{s, Array2, Axis};

/// Floor used inside the loss logarithms.
const JSD_EPS: f64 = 1e-12;
/// Variance floor of row normalization.
const LN_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Broadcast-add a (1 x n) row onto every row.
    AddRow(usize, usize),
    /// Broadcast-multiply every row by a (1 x n) row.
    MulRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    /// a * b^T without materializing the transpose.
    MatMulNt(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    SoftmaxRows(usize),
    /// Zero-mean unit-variance per row (no learned gain/offset).
    NormalizeRows(usize),
    SumRows(usize),
    /// Jensen-Shannon divergence against a constant target distribution.
    Jsd(usize, Array2<f64>),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the differentiated scalar with respect to `v`; zero-shaped
    /// entries are returned as a zero array.
    pub fn get(&self, v: Var, like: &Array2<f64>) -> Array2<f64> {
        match &self.by_node[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(like.raw_dim()),
        }
    }
}

/// A linear record of matrix operations supporting reverse sweeps.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes; pair with [`Tape::truncate`] to reuse the
    /// prefix (typically the parameter leaves) across samples.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark`.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// New leaf holding `value`; `trainable` marks it as a gradient target.
    pub fn leaf(&mut self, value: Array2<f64>, trainable: bool) -> Var {
        self.push(Op::Leaf, value, trainable)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(Op::Add(a.0, b.0), v, g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a.0, b.0), v, g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a.0, b.0), v, g)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        let g = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a.0, row.0), v, g)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) * self.value(row);
        let g = self.needs(a) || self.needs(row);
        self.push(Op::MulRow(a.0, row.0), v, g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let g = self.needs(a);
        self.push(Op::Scale(a.0, c), v, g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a.0, b.0), v, g)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let g = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNt(a.0, b.0), v, g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let g = self.needs(a);
        self.push(Op::Sigmoid(a.0), v, g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let g = self.needs(a);
        self.push(Op::Tanh(a.0), v, g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let g = self.needs(a);
        self.push(Op::Gelu(a.0), v, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("column concat shapes");
        let g = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), v, g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("row concat shapes");
        let g = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), v, g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let g = self.needs(a);
        self.push(Op::SliceCols(a.0, start, len), v, g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let g = self.needs(a);
        self.push(Op::SoftmaxRows(a.0), v, g)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        let g = self.needs(a);
        self.push(Op::NormalizeRows(a.0), v, g)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let g = self.needs(a);
        self.push(Op::SumRows(a.0), v, g)
    }

    /// Jensen-Shannon divergence of `p` (a single-row distribution) against a
    /// constant target of the same shape, as a 1x1 node.
    pub fn jsd_loss(&mut self, p: Var, target: Array2<f64>) -> Var {
        assert_eq!(self.value(p).raw_dim(), target.raw_dim());
        let pv = self.value(p);
        let mut acc = 0.0;
        for (a, b) in pv.iter().zip(target.iter()) {
            let m = 0.5 * (a + b);
            if *a > 0.0 {
                acc += 0.5 * a * (a.max(JSD_EPS) / m.max(JSD_EPS)).ln();
            }
            if *b > 0.0 {
                acc += 0.5 * b * (b.max(JSD_EPS) / m.max(JSD_EPS)).ln();
            }
        }
        let g = self.needs(p);
        self.push(Op::Jsd(p.0, target), Array2::from_elem((1, 1), acc), g)
    }

    /// Reverse sweep from scalar node `loss` (must be 1x1). Returns the
    /// gradient of `loss` with respect to every node that required one.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let ga = &g * &self.nodes[*row].value;
                    let gr = (&g * &self.nodes[*a].value).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, &g * *c);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value);
                    let gb = g.t().dot(&self.nodes[*a].value);
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = &g * &(y * &(1.0 - y));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = &g * &(1.0 - y * y);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = &g * &x.mapv(gelu_grad);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.ncols();
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        self.accumulate(&mut grads, *p, gp);
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.nodes[*p].value.nrows();
                        let gp = g.slice(s![start..start + h, ..]).to_owned();
                        self.accumulate(&mut grads, *p, gp);
                        start += h;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(src.raw_dim());
                    ga.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let mut ga = Array2::zeros(x.raw_dim());
                    let n = x.ncols() as f64;
                    for r in 0..x.nrows() {
                        let row = x.row(r);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gr = g.row(r);
                        let g_mean = gr.sum() / n;
                        let gy_dot: f64 =
                            gr.iter().zip(y.row(r).iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..x.ncols() {
                            ga[[r, c]] = inv * (gr[c] - g_mean - y[[r, c]] * gy_dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let rows = self.nodes[*a].value.nrows();
                    let mut ga = Array2::zeros(self.nodes[*a].value.raw_dim());
                    for r in 0..rows {
                        ga.row_mut(r).assign(&g.row(0));
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Jsd(a, target) => {
                    let p = &self.nodes[*a].value;
                    let scale = g[[0, 0]];
                    let mut ga = Array2::zeros(p.raw_dim());
                    for (idx, (pv, qv)) in p.iter().zip(target.iter()).enumerate() {
                        let m = 0.5 * (pv + qv);
                        // d/dp of 0.5 p (ln max(p,eps) - ln max(m,eps))
                        //      + 0.5 q (ln max(q,eps) - ln max(m,eps))
                        let mut d = 0.0;
                        if *pv > 0.0 {
                            d += 0.5 * (pv.max(JSD_EPS) / m.max(JSD_EPS)).ln();
                            if *pv > JSD_EPS {
                                d += 0.5;
                            }
                        }
                        if m > JSD_EPS {
                            d -= 0.25 * (pv + qv) / m;
                        }
                        let (r, c) = (idx / p.ncols(), idx % p.ncols());
                        ga[[r, c]] = scale * d;
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
            }
            grads[id] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gaussian error linear unit, tanh form.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}
