//! Shared neural building blocks: dense layers, two-layer perceptrons,
//! sinusoidal encodings and the Adam optimizer.

use crate::autodiff::{Graph, NodeId};
use crate::SeedRng;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn randn(rng: &mut SeedRng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape")
}

pub fn rand_uniform(rng: &mut SeedRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape")
}

/// Standard-normal matrix draw, unscaled. Used for diffusion noise.
pub fn noise_like(rng: &mut SeedRng, rows: usize, cols: usize) -> Array2<f64> {
    randn(rng, rows, cols, 1.0)
}

/// A dense layer: `x·w + b` with `w` of shape in×out and `b` of shape 1×out.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

pub struct StagedDense {
    pub w: NodeId,
    pub b: NodeId,
}

impl Dense {
    pub fn new(rng: &mut SeedRng, dim_in: usize, dim_out: usize) -> Self {
        let std = (1.0 / dim_in as f64).sqrt();
        Dense {
            w: randn(rng, dim_in, dim_out, std),
            b: Array2::zeros((1, dim_out)),
        }
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn stage(&self, g: &mut Graph) -> StagedDense {
        StagedDense {
            w: g.leaf(self.w.clone()),
            b: g.leaf(self.b.clone()),
        }
    }
}

impl StagedDense {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let xw = g.matmul(x, self.w);
        g.add_row(xw, self.b)
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Non-saturating for positive inputs; used where gradients must keep
    /// flowing at confident predictions (guidance heads).
    Gelu,
}

/// Single-hidden-layer perceptron producing logits.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Dense,
    pub out: Dense,
    pub activation: Activation,
}

pub struct StagedMlp {
    pub hidden: StagedDense,
    pub out: StagedDense,
    activation: Activation,
}

impl Mlp {
    pub fn new(rng: &mut SeedRng, dim_in: usize, dim_hidden: usize, dim_out: usize) -> Self {
        Mlp {
            hidden: Dense::new(rng, dim_in, dim_hidden),
            out: Dense::new(rng, dim_hidden, dim_out),
            activation: Activation::Tanh,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn out_dim(&self) -> usize {
        self.out.w.ncols()
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = self.hidden.params_mut();
        p.extend(self.out.params_mut());
        p
    }

    pub fn stage(&self, g: &mut Graph) -> StagedMlp {
        StagedMlp {
            hidden: self.hidden.stage(g),
            out: self.out.stage(g),
            activation: self.activation,
        }
    }

    /// Plain (graph-free) logits for inference paths that need no gradient.
    pub fn logits_plain(&self, x: &Array2<f64>) -> Array2<f64> {
        let h = x.dot(&self.hidden.w) + &self.hidden.b.row(0);
        let h = match self.activation {
            Activation::Tanh => h.mapv(f64::tanh),
            Activation::Gelu => {
                let mut g = Graph::new();
                let id = g.leaf(h);
                let out = g.gelu(id);
                g.value(out).clone()
            }
        };
        h.dot(&self.out.w) + &self.out.b.row(0)
    }
}

impl StagedMlp {
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.hidden.apply(g, x);
        let h = match self.activation {
            Activation::Tanh => g.tanh(h),
            Activation::Gelu => g.gelu(h),
        };
        self.out.apply(g, h)
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut p = self.hidden.param_ids();
        p.extend(self.out.param_ids());
        p
    }
}

/// Sinusoidal encoding of a scalar step index into a 1×dim row.
pub fn timestep_embedding(t: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((1, dim));
    fill_sinusoid(&mut out, 0, t as f64, dim);
    out
}

/// Sinusoidal position encoding for a length-n sequence: n×dim.
pub fn positional_encoding(n: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, dim));
    for pos in 0..n {
        fill_sinusoid(&mut out, pos, pos as f64, dim);
    }
    out
}

fn fill_sinusoid(out: &mut Array2<f64>, row: usize, value: f64, dim: usize) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10000.0f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[(row, 2 * i)] = (value * freq).sin();
        out[(row, 2 * i + 1)] = (value * freq).cos();
    }
    if dim % 2 == 1 {
        out[(row, dim - 1)] = 0.0;
    }
}

/// Adam optimizer over an externally owned, fixed-order parameter list.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Array2<f64>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            self.v[i]
                .zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            let lr = self.lr;
            let eps = self.eps;
            let mi = &self.m[i];
            let vi = &self.v[i];
            ndarray::Zip::from(&mut **params[i])
                .and(mi)
                .and(vi)
                .for_each(|p, &m, &v| {
                    let mhat = m / b1c;
                    let vhat = v / b2c;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut rng = SeedRng::seed_from_u64(0);
        let mut p = randn(&mut rng, 2, 2, 1.0);
        let refs: Vec<&Array2<f64>> = vec![&p];
        let mut opt = Adam::new(0.1, &refs);
        for _ in 0..200 {
            let g = p.clone() * 2.0; // d/dp ||p||^2
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(p.iter().all(|&x| x.abs() < 1e-2));
    }

    #[test]
    fn sinusoid_values_are_bounded_and_distinct() {
        let pe = positional_encoding(8, 16);
        assert!(pe.iter().all(|&v| v.abs() <= 1.0));
        for i in 0..7 {
            let a = pe.row(i);
            let b = pe.row(i + 1);
            assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-9));
        }
    }

    #[test]
    fn staged_dense_matches_plain() {
        let mut rng = SeedRng::seed_from_u64(3);
        let mlp = Mlp::new(&mut rng, 4, 8, 5);
        let x = randn(&mut rng, 3, 4, 1.0);
        let plain = mlp.logits_plain(&x);

        let mut g = Graph::new();
        let staged = mlp.stage(&mut g);
        let xid = g.leaf(x);
        let out = staged.logits(&mut g, xid);
        let diff = (g.value(out) - &plain).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}
