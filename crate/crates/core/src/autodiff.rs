//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a flat tape: pushing an op computes its value eagerly and
//! records how to route gradients. [`Graph::backward`] walks the tape in
//! reverse and accumulates a gradient for every node, so one pass yields
//! gradients with respect to parameters (for training) and with respect to
//! latent inputs (for guidance). Scalars are 1×1 matrices.
//!
//! Everything is single-threaded and evaluated in insertion order, which
//! keeps results bitwise reproducible across runs.

use ndarray::{Array1, Array2, Axis};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    /// Broadcast-add a 1×m row vector to every row of an n×m matrix.
    AddRow(NodeId, NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Sum(NodeId),
    SumSquares(NodeId),
    /// Select rows of the source by index; duplicates allowed.
    GatherRows(NodeId, Vec<usize>),
    /// Negative sum of one picked entry per row: -Σ_i x[i, targets[i]].
    NegPick(NodeId, Vec<usize>),
}

pub struct Graph {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &Array2<f64> {
        &self.grads[id]
    }

    pub fn take(mut self, id: NodeId) -> Array2<f64> {
        std::mem::replace(&mut self.grads[id], Array2::zeros((0, 0)))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.values[id]
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id].dim(), (1, 1));
        self.values[id][(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a] + &self.values[b];
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a] - &self.values[b];
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a] * &self.values[b];
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a].dot(&self.values[b]);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.values[a] * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.values[row].nrows(), 1);
        debug_assert_eq!(self.values[a].ncols(), self.values[row].ncols());
        let r = self.values[row].row(0).to_owned();
        let v = &self.values[a] + &r;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a].mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let v = row_softmax(&self.values[a]);
        self.push(v, Op::RowSoftmax(a))
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let v = row_log_softmax(&self.values[a]);
        self.push(v, Op::RowLogSoftmax(a))
    }

    /// Row-wise layer normalisation with a learned 1×m gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.values[x];
        let g = self.values[gain].row(0).to_owned();
        let b = self.values[bias].row(0).to_owned();
        let mut out = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let (y0, _) = ln_normalize(&row.to_owned());
            let o = &y0 * &g + &b;
            out.row_mut(i).assign(&o);
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.values[a].sum());
        self.push(v, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.values[a].iter().map(|x| x * x).sum());
        self.push(v, Op::SumSquares(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a].len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let src = &self.values[a];
        let mut out = Array2::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).assign(&src.row(r));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// `-Σ_i a[i, targets[i]]`; with `a` holding log-probabilities this is the
    /// summed negative log-likelihood.
    pub fn neg_pick(&mut self, a: NodeId, targets: &[usize]) -> NodeId {
        let src = &self.values[a];
        let mut s = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            s -= src[(i, t)];
        }
        self.push(
            Array2::from_elem((1, 1), s),
            Op::NegPick(a, targets.to_vec()),
        )
    }

    /// Backpropagate from a scalar root node; returns gradients for all nodes.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.values[root].dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Array2<f64>> = self
            .values
            .iter()
            .map(|v| Array2::zeros(v.raw_dim()))
            .collect();
        grads[root][(0, 0)] = 1.0;

        for id in (0..=root).rev() {
            if grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[id].clone();
            match &self.ops[id] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[*a] += &g;
                    grads[*b] += &g;
                }
                Op::Sub(a, b) => {
                    grads[*a] += &g;
                    grads[*b] -= &g;
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.values[*b];
                    let db = &g * &self.values[*a];
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.values[*b].t());
                    let db = self.values[*a].t().dot(&g);
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::Transpose(a) => {
                    let da = g.t().to_owned();
                    grads[*a] += &da;
                }
                Op::Scale(a, c) => {
                    let da = &g * *c;
                    grads[*a] += &da;
                }
                Op::AddRow(a, row) => {
                    grads[*a] += &g;
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[*row] += &col_sum;
                }
                Op::Tanh(a) => {
                    let y = &self.values[id];
                    let da = &g * &y.mapv(|t| 1.0 - t * t);
                    grads[*a] += &da;
                }
                Op::Gelu(a) => {
                    let da = &g * &self.values[*a].mapv(gelu_grad);
                    grads[*a] += &da;
                }
                Op::RowSoftmax(a) => {
                    let y = &self.values[id];
                    let mut da = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let yi = y.row(i);
                        let gi = g.row(i);
                        let dot: f64 = yi.iter().zip(gi.iter()).map(|(p, d)| p * d).sum();
                        for j in 0..y.ncols() {
                            da[(i, j)] = yi[j] * (gi[j] - dot);
                        }
                    }
                    grads[*a] += &da;
                }
                Op::RowLogSoftmax(a) => {
                    let y = &self.values[id];
                    let mut da = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let gi = g.row(i);
                        let gsum: f64 = gi.sum();
                        for j in 0..y.ncols() {
                            da[(i, j)] = gi[j] - y[(i, j)].exp() * gsum;
                        }
                    }
                    grads[*a] += &da;
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &self.values[*x];
                    let gv = self.values[*gain].row(0).to_owned();
                    let m = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.raw_dim());
                    let mut dgain = Array1::zeros(xv.ncols());
                    let mut dbias = Array1::zeros(xv.ncols());
                    for i in 0..xv.nrows() {
                        let row = xv.row(i).to_owned();
                        let (y0, inv) = ln_normalize(&row);
                        let gi = g.row(i).to_owned();
                        dbias += &gi;
                        dgain += &(&gi * &y0);
                        let dy0 = &gi * &gv;
                        let mean_dy0 = dy0.sum() / m;
                        let mean_dy0_y0 = (&dy0 * &y0).sum() / m;
                        let dxi = (&dy0 - mean_dy0 - &(&y0 * mean_dy0_y0)) * inv;
                        dx.row_mut(i).assign(&dxi);
                    }
                    grads[*x] += &dx;
                    grads[*gain] += &dgain.insert_axis(Axis(0));
                    grads[*bias] += &dbias.insert_axis(Axis(0));
                }
                Op::Sum(a) => {
                    let da = Array2::from_elem(self.values[*a].raw_dim(), g[(0, 0)]);
                    grads[*a] += &da;
                }
                Op::SumSquares(a) => {
                    let da = &self.values[*a] * (2.0 * g[(0, 0)]);
                    grads[*a] += &da;
                }
                Op::GatherRows(a, idx) => {
                    for (i, &r) in idx.iter().enumerate() {
                        let gi = g.row(i).to_owned();
                        let mut dst = grads[*a].row_mut(r);
                        dst += &gi;
                    }
                }
                Op::NegPick(a, targets) => {
                    let gv = g[(0, 0)];
                    for (i, &t) in targets.iter().enumerate() {
                        grads[*a][(i, t)] -= gv;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn row_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Array1<f64> = row.mapv(|v| (v - m).exp());
        let s = e.sum();
        out.row_mut(i).assign(&(&e / s));
    }
    out
}

fn row_log_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
        out.row_mut(i).assign(&row.mapv(|v| v - lse));
    }
    out
}

/// Returns the normalized row and 1/sqrt(var+eps).
fn ln_normalize(row: &Array1<f64>) -> (Array1<f64>, f64) {
    let m = row.len() as f64;
    let mu = row.sum() / m;
    let var = row.mapv(|v| (v - mu) * (v - mu)).sum() / m;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (row.mapv(|v| (v - mu) * inv), inv)
}

/// Central-difference gradient of `f` with respect to each parameter matrix.
///
/// This is a testing oracle: it exercises only forward evaluations of `f`, so
/// it stays independent of the tape's backward rules.
pub fn finite_difference_gradient<F>(f: F, params: &[Array2<f64>], h: f64) -> Vec<Array2<f64>>
where
    F: Fn(&[Array2<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Array2<f64>> = params.to_vec();
    for pi in 0..params.len() {
        let mut gp = Array2::zeros(params[pi].raw_dim());
        for idx in 0..params[pi].len() {
            let (r, c) = (idx / params[pi].ncols(), idx % params[pi].ncols());
            let orig = work[pi][(r, c)];
            work[pi][(r, c)] = orig + h;
            let fp = f(&work);
            work[pi][(r, c)] = orig - h;
            let fm = f(&work);
            work[pi][(r, c)] = orig;
            gp[(r, c)] = (fp - fm) / (2.0 * h);
        }
        grads.push(gp);
    }
    grads
}

/// Largest relative error between two gradient sets, with a floor so that
/// near-zero pairs compare absolutely.
pub fn max_relative_error(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (ga, gb) in a.iter().zip(b.iter()) {
        for (x, y) in ga.iter().zip(gb.iter()) {
            let denom = x.abs().max(y.abs());
            let err = if denom > 1e-6 {
                (x - y).abs() / denom
            } else {
                (x - y).abs()
            };
            worst = worst.max(err);
        }
    }
    worst
}
