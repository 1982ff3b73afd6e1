//! The continuous diffusion machinery: noise schedules, the forward
//! (noising) process, the denoiser network, and the semantic training loss.
//!
//! Timesteps run 1..=T; `alpha_bar(0)` is defined as 1. The denoiser
//! predicts the clean state x₀ from (x_t, t); the reverse-step mean
//! comes from the Gaussian posterior around that prediction.

use crate::autodiff::{Graph, NodeId};
use crate::corpus::PAD;
use crate::embedding::{EmbeddingTable, RoundingHead};
use crate::nn::{positional_encoding, timestep_embedding, Adam, Dense, StagedDense};
use crate::{Error, Result, SeedRng};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Sqrt,
    Linear,
}

/// β/α/ᾱ arrays for T noising steps. Index i holds the value for t = i+1.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub kind: ScheduleKind,
}

const MAX_BETA: f64 = 0.999;
const SQRT_SHIFT: f64 = 1e-4;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
pub const SIGMA_FLOOR: f64 = 1e-12;

pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::Config(format!("T must be at least 2, got {t_max}")));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_max)
            .map(|i| {
                LINEAR_BETA_START
                    + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (t_max - 1) as f64
            })
            .collect(),
        ScheduleKind::Sqrt => {
            // target ᾱ(s) = 1 - sqrt(s/T + shift), betas derived step-wise and
            // clipped into (0, MAX_BETA]
            let abar = |s: f64| 1.0 - (s / t_max as f64 + SQRT_SHIFT).sqrt();
            (0..t_max)
                .map(|i| {
                    let b = 1.0 - abar((i + 1) as f64) / abar(i as f64);
                    b.clamp(SQRT_SHIFT * SQRT_SHIFT, MAX_BETA)
                })
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let schedule = NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
        kind,
    };
    schedule.validate()?;
    Ok(schedule)
}

impl NoiseSchedule {
    fn validate(&self) -> Result<()> {
        for (i, &b) in self.beta.iter().enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Numeric(format!("beta[{i}]={b} outside (0,1)")));
            }
            if (self.alpha[i] - (1.0 - b)).abs() != 0.0 {
                return Err(Error::Numeric("alpha != 1 - beta".into()));
            }
        }
        for w in self.alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Numeric("alpha_bar not strictly decreasing".into()));
            }
        }
        Ok(())
    }

    /// ᾱ_t with the convention ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Posterior mean coefficients (c_x0, c_xt) for q(x_{t-1} | x_t, x_0).
    pub fn posterior_coeffs(&self, t: usize) -> (f64, f64) {
        let ab_prev = self.alpha_bar(t - 1);
        let ab = self.alpha_bar(t);
        let beta = self.beta_at(t);
        let alpha = self.alpha_at(t);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }

    /// Posterior variance β̃_t, floored to keep t=1 non-degenerate.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let v = self.beta_at(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t));
        v.max(SIGMA_FLOOR)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// An N×d latent state tagged with its timestep.
#[derive(Clone, Debug)]
pub struct LatentSeq {
    pub values: Array2<f64>,
    pub t: usize,
}

impl LatentSeq {
    pub fn seq_len(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Closed-form forward sample: x_t = √ᾱ_t·x₀ + √(1-ᾱ_t)·noise.
pub fn q_sample(x0: &LatentSeq, t: usize, noise: &Array2<f64>, schedule: &NoiseSchedule) -> Result<LatentSeq> {
    schedule.check_t(t)?;
    if noise.raw_dim() != x0.values.raw_dim() {
        return Err(Error::Shape("noise shape differs from x0".into()));
    }
    let ab = schedule.alpha_bar(t);
    let values = &x0.values * ab.sqrt() + noise * (1.0 - ab).sqrt();
    Ok(LatentSeq { values, t })
}

/// Mean of the Gaussian posterior q(x_{t-1} | x_t, x_0).
pub fn posterior_mean(x_t: &LatentSeq, x0: &LatentSeq, schedule: &NoiseSchedule) -> Result<Array2<f64>> {
    if x_t.t == 0 {
        return Err(Error::Config("no posterior at t=0".into()));
    }
    schedule.check_t(x_t.t)?;
    if x_t.values.raw_dim() != x0.values.raw_dim() {
        return Err(Error::Shape("x_t and x0 shapes differ".into()));
    }
    let (c0, ct) = schedule.posterior_coeffs(x_t.t);
    Ok(&x0.values * c0 + &x_t.values * ct)
}

/// Configuration of the denoiser network.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub ffn: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            dim: 16,
            hidden: 64,
            blocks: 2,
            ffn: 128,
        }
    }
}

/// One pre-norm self-attention block with a feed-forward half.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub ff1: Dense,
    pub ff2: Dense,
}

impl Block {
    fn new(rng: &mut SeedRng, hidden: usize, ffn: usize) -> Self {
        Block {
            ln1_g: Array2::ones((1, hidden)),
            ln1_b: Array2::zeros((1, hidden)),
            wq: Dense::new(rng, hidden, hidden),
            wk: Dense::new(rng, hidden, hidden),
            wv: Dense::new(rng, hidden, hidden),
            wo: Dense::new(rng, hidden, hidden),
            ln2_g: Array2::ones((1, hidden)),
            ln2_b: Array2::zeros((1, hidden)),
            ff1: Dense::new(rng, hidden, ffn),
            ff2: Dense::new(rng, ffn, hidden),
        }
    }

    fn params(&self) -> Vec<&Array2<f64>> {
        let mut p = vec![&self.ln1_g, &self.ln1_b];
        p.extend(self.wq.params());
        p.extend(self.wk.params());
        p.extend(self.wv.params());
        p.extend(self.wo.params());
        p.push(&self.ln2_g);
        p.push(&self.ln2_b);
        p.extend(self.ff1.params());
        p.extend(self.ff2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = vec![&mut self.ln1_g, &mut self.ln1_b];
        p.extend(self.wq.params_mut());
        p.extend(self.wk.params_mut());
        p.extend(self.wv.params_mut());
        p.extend(self.wo.params_mut());
        p.push(&mut self.ln2_g);
        p.push(&mut self.ln2_b);
        p.extend(self.ff1.params_mut());
        p.extend(self.ff2.params_mut());
        p
    }
}

struct StagedBlock {
    ln1_g: NodeId,
    ln1_b: NodeId,
    wq: StagedDense,
    wk: StagedDense,
    wv: StagedDense,
    wo: StagedDense,
    ln2_g: NodeId,
    ln2_b: NodeId,
    ff1: StagedDense,
    ff2: StagedDense,
}

/// A small bidirectional sequence encoder predicting x₀ from (x_t, t).
/// Sinusoidal timestep and position encodings are added per position after
/// the input projection.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub w_in: Dense,
    pub blocks: Vec<Block>,
    pub ln_f_g: Array2<f64>,
    pub ln_f_b: Array2<f64>,
    pub w_out: Dense,
}

pub struct StagedDenoiser {
    w_in: StagedDense,
    blocks: Vec<StagedBlock>,
    ln_f_g: NodeId,
    ln_f_b: NodeId,
    w_out: StagedDense,
}

impl DenoiserModel {
    pub fn new(rng: &mut SeedRng, config: DenoiserConfig) -> Self {
        DenoiserModel {
            config,
            w_in: Dense::new(rng, config.dim, config.hidden),
            blocks: (0..config.blocks)
                .map(|_| Block::new(rng, config.hidden, config.ffn))
                .collect(),
            ln_f_g: Array2::ones((1, config.hidden)),
            ln_f_b: Array2::zeros((1, config.hidden)),
            w_out: Dense::new(rng, config.hidden, config.dim),
        }
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut p = self.w_in.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.push(&self.ln_f_g);
        p.push(&self.ln_f_b);
        p.extend(self.w_out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = self.w_in.params_mut();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.push(&mut self.ln_f_g);
        p.push(&mut self.ln_f_b);
        p.extend(self.w_out.params_mut());
        p
    }

    pub fn stage(&self, g: &mut Graph) -> StagedDenoiser {
        StagedDenoiser {
            w_in: self.w_in.stage(g),
            blocks: self
                .blocks
                .iter()
                .map(|b| StagedBlock {
                    ln1_g: g.leaf(b.ln1_g.clone()),
                    ln1_b: g.leaf(b.ln1_b.clone()),
                    wq: b.wq.stage(g),
                    wk: b.wk.stage(g),
                    wv: b.wv.stage(g),
                    wo: b.wo.stage(g),
                    ln2_g: g.leaf(b.ln2_g.clone()),
                    ln2_b: g.leaf(b.ln2_b.clone()),
                    ff1: b.ff1.stage(g),
                    ff2: b.ff2.stage(g),
                })
                .collect(),
            ln_f_g: g.leaf(self.ln_f_g.clone()),
            ln_f_b: g.leaf(self.ln_f_b.clone()),
            w_out: self.w_out.stage(g),
        }
    }

    /// Forward pass inside an existing graph; `x` is an N×d node.
    pub fn forward_staged(
        &self,
        g: &mut Graph,
        staged: &StagedDenoiser,
        x: NodeId,
        n: usize,
        t: usize,
    ) -> NodeId {
        let hidden = self.config.hidden;
        let scale = 1.0 / (hidden as f64).sqrt();
        let mut h = staged.w_in.apply(g, x);
        let t_emb = g.leaf(timestep_embedding(t, hidden));
        h = g.add_row(h, t_emb);
        let pos = g.leaf(positional_encoding(n, hidden));
        h = g.add(h, pos);
        for sb in &staged.blocks {
            let a = g.layer_norm(h, sb.ln1_g, sb.ln1_b);
            let q = sb.wq.apply(g, a);
            let k = sb.wk.apply(g, a);
            let v = sb.wv.apply(g, a);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, scale);
            let attn = g.row_softmax(scores);
            let mixed = g.matmul(attn, v);
            let proj = sb.wo.apply(g, mixed);
            h = g.add(h, proj);
            let f = g.layer_norm(h, sb.ln2_g, sb.ln2_b);
            let f = sb.ff1.apply(g, f);
            let f = g.gelu(f);
            let f = sb.ff2.apply(g, f);
            h = g.add(h, f);
        }
        let hf = g.layer_norm(h, staged.ln_f_g, staged.ln_f_b);
        staged.w_out.apply(g, hf)
    }

    /// Graph-free prediction of x₀ for inference paths.
    pub fn predict_x0(&self, x_t: &LatentSeq) -> Array2<f64> {
        let mut g = Graph::new();
        let staged = self.stage(&mut g);
        let x = g.leaf(x_t.values.clone());
        let out = self.forward_staged(&mut g, &staged, x, x_t.seq_len(), x_t.t);
        g.value(out).clone()
    }
}

impl StagedDenoiser {
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut p = self.w_in.param_ids();
        for b in &self.blocks {
            p.push(b.ln1_g);
            p.push(b.ln1_b);
            p.extend(b.wq.param_ids());
            p.extend(b.wk.param_ids());
            p.extend(b.wv.param_ids());
            p.extend(b.wo.param_ids());
            p.push(b.ln2_g);
            p.push(b.ln2_b);
            p.extend(b.ff1.param_ids());
            p.extend(b.ff2.param_ids());
        }
        p.push(self.ln_f_g);
        p.push(self.ln_f_b);
        p.extend(self.w_out.param_ids());
        p
    }
}

/// μ_θ and σ²_θ of the reverse kernel p(x_{t-1} | x_t): the posterior mean
/// around the model's x₀ prediction, with variance fixed to β̃_t.
pub fn p_mean_sigma(
    model: &DenoiserModel,
    x_t: &LatentSeq,
    schedule: &NoiseSchedule,
) -> Result<(Array2<f64>, f64)> {
    schedule.check_t(x_t.t)?;
    let x0_hat = model.predict_x0(x_t);
    let mu = posterior_mean(
        x_t,
        &LatentSeq {
            values: x0_hat,
            t: 0,
        },
        schedule,
    )?;
    Ok((mu, schedule.posterior_variance(x_t.t)))
}

/// The random draws consumed by one loss evaluation, kept explicit so
/// finite-difference oracles can replay the loss deterministically.
#[derive(Clone, Debug)]
pub struct LossDraws {
    pub t: usize,
    pub noise_t: Array2<f64>,
    pub noise_1: Array2<f64>,
}

impl LossDraws {
    pub fn sample(rng: &mut SeedRng, n: usize, d: usize, schedule: &NoiseSchedule) -> Self {
        let t = rng.random_range(1..=schedule.t_max);
        LossDraws {
            t,
            noise_t: crate::nn::noise_like(rng, n, d),
            noise_1: crate::nn::noise_like(rng, n, d),
        }
    }
}

/// Decomposed value of the semantic loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct SemanticLossValue {
    pub total: f64,
    pub mse: f64,
    pub anchor: f64,
    pub rounding: f64,
}

/// Build the semantic loss for one token sequence inside `g`:
/// `‖μ_θ(x_t,t) − μ̂(x_t,x₀)‖² + ‖E(w) − μ_θ(x₁,1)‖² − log p(w|x₀)`,
/// with t sampled once per call (an unbiased single-term estimator of the
/// step sum). Returns the root node plus the component nodes.
pub struct StagedSemanticLoss {
    pub root: NodeId,
    pub mse: NodeId,
    pub anchor: NodeId,
    pub rounding: NodeId,
}

pub fn stage_semantic_loss(
    g: &mut Graph,
    model: &DenoiserModel,
    staged_model: &StagedDenoiser,
    table_node: NodeId,
    head: &crate::nn::StagedMlp,
    tokens: &[u32],
    schedule: &NoiseSchedule,
    draws: &LossDraws,
) -> Result<StagedSemanticLoss> {
    let n = tokens.len();
    let t = draws.t;
    schedule.check_t(t)?;
    let idx: Vec<usize> = tokens.iter().map(|&u| u as usize).collect();
    let x0 = g.gather_rows(table_node, &idx);

    // x_t and the posterior target μ̂, all differentiable through x0
    let ab = schedule.alpha_bar(t);
    let noise_t = g.leaf(draws.noise_t.clone());
    let x0_scaled = g.scale(x0, ab.sqrt());
    let noise_scaled = g.scale(noise_t, (1.0 - ab).sqrt());
    let x_t = g.add(x0_scaled, noise_scaled);
    let (c0, ct) = schedule.posterior_coeffs(t);
    let mu_hat_a = g.scale(x0, c0);
    let mu_hat_b = g.scale(x_t, ct);
    let mu_hat = g.add(mu_hat_a, mu_hat_b);

    // μ_θ(x_t, t)
    let x0_pred = model.forward_staged(g, staged_model, x_t, n, t);
    let mu_theta_a = g.scale(x0_pred, c0);
    let mu_theta_b = g.scale(x_t, ct);
    let mu_theta = g.add(mu_theta_a, mu_theta_b);
    let diff = g.sub(mu_theta, mu_hat);
    let mse = g.sum_squares(diff);

    // anchor: μ_θ(x₁, 1) = x₀-prediction at t=1, pulled toward E(w)
    let ab1 = schedule.alpha_bar(1);
    let noise_1 = g.leaf(draws.noise_1.clone());
    let x0_scaled1 = g.scale(x0, ab1.sqrt());
    let noise_scaled1 = g.scale(noise_1, (1.0 - ab1).sqrt());
    let x_1 = g.add(x0_scaled1, noise_scaled1);
    let x0_pred1 = model.forward_staged(g, staged_model, x_1, n, 1);
    let adiff = g.sub(x0_pred1, x0);
    let anchor = g.sum_squares(adiff);

    // rounding: -log p(w | x₀) through the softmax head
    let logits = head.logits(g, x0);
    let logp = g.row_log_softmax(logits);
    let rounding = g.neg_pick(logp, &idx);

    let partial = g.add(mse, anchor);
    let root = g.add(partial, rounding);
    Ok(StagedSemanticLoss {
        root,
        mse,
        anchor,
        rounding,
    })
}

/// Evaluate (without training) the semantic loss for one sequence.
pub fn loss_semantic(
    model: &DenoiserModel,
    table: &EmbeddingTable,
    head: &RoundingHead,
    tokens: &[u32],
    schedule: &NoiseSchedule,
    rng: &mut SeedRng,
) -> Result<SemanticLossValue> {
    let draws = LossDraws::sample(rng, tokens.len(), table.dim(), schedule);
    loss_semantic_with_draws(model, table, head, tokens, schedule, &draws)
}

pub fn loss_semantic_with_draws(
    model: &DenoiserModel,
    table: &EmbeddingTable,
    head: &RoundingHead,
    tokens: &[u32],
    schedule: &NoiseSchedule,
    draws: &LossDraws,
) -> Result<SemanticLossValue> {
    let mut g = Graph::new();
    let staged_model = model.stage(&mut g);
    let table_node = g.leaf(table.matrix.clone());
    let staged_head = head.mlp.stage(&mut g);
    let staged = stage_semantic_loss(
        &mut g,
        model,
        &staged_model,
        table_node,
        &staged_head,
        tokens,
        schedule,
        draws,
    )?;
    Ok(SemanticLossValue {
        total: g.scalar_value(staged.root),
        mse: g.scalar_value(staged.mse),
        anchor: g.scalar_value(staged.anchor),
        rounding: g.scalar_value(staged.rounding),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 4000,
            lr: 1e-3,
            seed: 0,
            log_every: 50,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub anchor: f64,
    pub rounding: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainStats {
    pub log: Vec<TrainLogRow>,
    /// Mean loss over the first `window` steps.
    pub initial_avg: f64,
    /// Mean loss over the last `window` steps.
    pub final_avg: f64,
    /// Exponential running average of the total loss at the end of training;
    /// persisted so guidance weights can be scaled against it.
    pub semantic_loss_avg: f64,
}

const AVG_WINDOW: usize = 100;

/// Joint training of denoiser, embedding table and rounding head on batches
/// of token rows. Rows are treated independently; PAD is embedded like any
/// other token. Mutates the models in place.
pub fn train(
    model: &mut DenoiserModel,
    table: &mut EmbeddingTable,
    head: &mut RoundingHead,
    batches: &[Array2<u32>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    use rand::SeedableRng;
    if batches.is_empty() {
        return Err(Error::Config("no training batches".into()));
    }
    let mut rng = SeedRng::seed_from_u64(cfg.seed);
    let mut opt = {
        let mut refs = table.params();
        refs.extend(head.params());
        refs.extend(model.params());
        Adam::new(cfg.lr, &refs)
    };

    let mut stats = TrainStats::default();
    let mut ema = 0.0f64;
    let mut losses: Vec<f64> = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let batch = &batches[step % batches.len()];
        let rows = batch.nrows();

        let mut g = Graph::new();
        let staged_model = model.stage(&mut g);
        let table_node = g.leaf(table.matrix.clone());
        let staged_head = head.mlp.stage(&mut g);

        let mut total: Option<NodeId> = None;
        let mut parts = SemanticLossValue::default();
        for r in 0..rows {
            let tokens: Vec<u32> = batch.row(r).to_vec();
            let draws = LossDraws::sample(&mut rng, tokens.len(), table.dim(), schedule);
            let staged = stage_semantic_loss(
                &mut g,
                model,
                &staged_model,
                table_node,
                &staged_head,
                &tokens,
                schedule,
                &draws,
            )?;
            parts.mse += g.scalar_value(staged.mse);
            parts.anchor += g.scalar_value(staged.anchor);
            parts.rounding += g.scalar_value(staged.rounding);
            total = Some(match total {
                None => staged.root,
                Some(acc) => g.add(acc, staged.root),
            });
        }
        let total = total.expect("at least one row");
        let loss_node = g.scale(total, 1.0 / rows as f64);
        let loss = g.scalar_value(loss_node);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss={loss}"
            )));
        }

        let grads = g.backward(loss_node);
        let mut grad_list: Vec<Array2<f64>> = vec![grads.wrt(table_node).clone()];
        for id in staged_head.param_ids() {
            grad_list.push(grads.wrt(id).clone());
        }
        for id in staged_model.param_ids() {
            grad_list.push(grads.wrt(id).clone());
        }
        {
            let mut refs: Vec<&mut Array2<f64>> = table.params_mut();
            refs.extend(head.params_mut());
            refs.extend(model.params_mut());
            opt.step(&mut refs, &grad_list);
        }
        table.renormalize_rows();

        losses.push(loss);
        ema = if step == 0 { loss } else { 0.99 * ema + 0.01 * loss };
        if step % cfg.log_every == 0 || step + 1 == cfg.iterations {
            stats.log.push(TrainLogRow {
                step,
                loss,
                mse: parts.mse / rows as f64,
                anchor: parts.anchor / rows as f64,
                rounding: parts.rounding / rows as f64,
            });
        }
    }
    let w = AVG_WINDOW.min(losses.len().max(1));
    if !losses.is_empty() {
        stats.initial_avg = losses[..w].iter().sum::<f64>() / w as f64;
        stats.final_avg = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
        stats.semantic_loss_avg = ema;
    }
    Ok(stats)
}

/// Token-level accuracy of decode(embed(w)) over a set of poems: the share
/// of positions whose argmax decode returns the original token.
pub fn roundtrip_accuracy(
    table: &EmbeddingTable,
    head: &RoundingHead,
    poems: &[crate::corpus::Poem],
) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for poem in poems {
        let x0 = match crate::embedding::embed(poem, table) {
            Ok(x) => x,
            Err(_) => continue,
        };
        let probs = crate::embedding::round_logits(&x0, head);
        for (i, &tok) in poem.tokens.iter().enumerate() {
            let row = probs.row(i);
            let mut best = 0usize;
            let mut best_p = row[0];
            for (j, &p) in row.iter().enumerate().skip(1) {
                if p > best_p {
                    best = j;
                    best_p = p;
                }
            }
            if best as u32 == tok {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Share of PAD-normalized rows; helper for sanity checks on batches.
pub fn pad_fraction(batch: &Array2<u32>) -> f64 {
    let pads = batch.iter().filter(|&&t| t == PAD).count();
    pads as f64 / batch.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_schedule_t2_matches_hand_arithmetic() {
        let s = make_schedule(2, ScheduleKind::Linear).unwrap();
        assert!((s.beta[0] - 1e-4).abs() < 1e-15);
        assert!((s.beta[1] - 0.02).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.9999 * 0.98).abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_1_equals_alpha_1() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Sqrt] {
            let s = make_schedule(50, kind).unwrap();
            assert_eq!(s.alpha_bar(1), s.alpha_at(1));
        }
    }

    #[test]
    fn full_scale_schedules_end_nearly_destroyed() {
        for kind in [ScheduleKind::Sqrt, ScheduleKind::Linear] {
            let s = make_schedule(2000, kind).unwrap();
            assert!(
                s.alpha_bar(2000) < 0.01,
                "{kind:?}: alpha_bar(T) = {}",
                s.alpha_bar(2000)
            );
        }
    }

    #[test]
    fn schedule_rejects_tiny_t() {
        assert!(make_schedule(1, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_zero_noise_scales_x0() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let x0 = LatentSeq {
            values: ndarray::array![[1.0, -2.0], [0.5, 3.0]],
            t: 0,
        };
        let noise = Array2::zeros((2, 2));
        let xt = q_sample(&x0, 4, &noise, &s).unwrap();
        let expect = &x0.values * s.alpha_bar(4).sqrt();
        assert!((&xt.values - &expect).iter().all(|d| d.abs() < 1e-15));
        assert_eq!(xt.t, 4);
    }

    #[test]
    fn q_sample_small_t_stays_close_to_x0() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        let x0 = LatentSeq {
            values: ndarray::array![[1.0, -1.0]],
            t: 0,
        };
        let noise = ndarray::array![[1.0, 1.0]];
        let xt = q_sample(&x0, 1, &noise, &s).unwrap();
        let max_shift = (&xt.values - &x0.values)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        // within the √β₁ noise scale (plus the tiny ᾱ shrinkage)
        assert!(max_shift < 2.0 * s.beta_at(1).sqrt());
    }

    #[test]
    fn q_sample_rejects_out_of_range_t() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let x0 = LatentSeq {
            values: Array2::zeros((1, 2)),
            t: 0,
        };
        let z = Array2::zeros((1, 2));
        assert!(q_sample(&x0, 0, &z, &s).is_err());
        assert!(q_sample(&x0, 11, &z, &s).is_err());
    }

    #[test]
    fn posterior_mean_at_t1_returns_x0() {
        let s = make_schedule(8, ScheduleKind::Linear).unwrap();
        let x0 = LatentSeq {
            values: ndarray::array![[0.3, -0.7]],
            t: 0,
        };
        let xt = LatentSeq {
            values: ndarray::array![[5.0, 5.0]],
            t: 1,
        };
        let mu = posterior_mean(&xt, &x0, &s).unwrap();
        assert!((&mu - &x0.values).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn posterior_mean_zero_inputs_zero() {
        let s = make_schedule(8, ScheduleKind::Linear).unwrap();
        let zero = LatentSeq {
            values: Array2::zeros((2, 3)),
            t: 0,
        };
        let xt = LatentSeq {
            values: Array2::zeros((2, 3)),
            t: 5,
        };
        let mu = posterior_mean(&xt, &zero, &s).unwrap();
        assert!(mu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn posterior_mean_rejects_t0() {
        let s = make_schedule(8, ScheduleKind::Linear).unwrap();
        let x = LatentSeq {
            values: Array2::zeros((1, 2)),
            t: 0,
        };
        assert!(posterior_mean(&x, &x, &s).is_err());
    }

    #[test]
    fn sigma_at_t1_is_floored() {
        let s = make_schedule(8, ScheduleKind::Linear).unwrap();
        assert_eq!(s.posterior_variance(1), SIGMA_FLOOR);
        assert!(s.posterior_variance(2) > SIGMA_FLOOR);
    }

    #[test]
    fn sigma_matches_direct_formula_on_linear_t10() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        for t in 2..=10 {
            let direct =
                s.beta_at(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
            assert!((s.posterior_variance(t) - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_model_gives_mu_hat_exactly() {
        // a model that outputs the true x0 makes μ_θ equal μ̂ by construction
        let s = make_schedule(6, ScheduleKind::Linear).unwrap();
        let x0 = LatentSeq {
            values: ndarray::array![[0.2, -0.4], [1.0, 0.1]],
            t: 0,
        };
        let xt = LatentSeq {
            values: ndarray::array![[0.9, 0.3], [-0.2, 0.8]],
            t: 3,
        };
        let (c0, ct) = s.posterior_coeffs(3);
        let mu_theta = &x0.values * c0 + &xt.values * ct; // model output == x0
        let mu_hat = posterior_mean(&xt, &x0, &s).unwrap();
        assert!((&mu_theta - &mu_hat).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn denoiser_is_deterministic_and_finite() {
        let mut rng = SeedRng::seed_from_u64(12);
        let cfg = DenoiserConfig {
            dim: 4,
            hidden: 16,
            blocks: 2,
            ffn: 32,
        };
        let model = DenoiserModel::new(&mut rng, cfg);
        let x = LatentSeq {
            values: crate::nn::noise_like(&mut rng, 5, 4),
            t: 3,
        };
        let a = model.predict_x0(&x);
        let b = model.predict_x0(&x);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a.dim(), (5, 4));
    }

    #[test]
    fn zero_iterations_leaves_models_at_initialization() {
        let mut rng = SeedRng::seed_from_u64(7);
        let cfg = DenoiserConfig {
            dim: 4,
            hidden: 8,
            blocks: 1,
            ffn: 16,
        };
        let mut model = DenoiserModel::new(&mut rng, cfg);
        let mut table = EmbeddingTable::new(&mut rng, 10, 4);
        let mut head = RoundingHead::new(&mut rng, 4, 8, 10);
        let before: Vec<Array2<f64>> = model.params().iter().map(|p| (*p).clone()).collect();
        let batches = vec![Array2::zeros((2, 4))];
        let s = make_schedule(5, ScheduleKind::Linear).unwrap();
        let stats = train(
            &mut model,
            &mut table,
            &mut head,
            &batches,
            &s,
            &TrainConfig {
                iterations: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let after: Vec<Array2<f64>> = model.params().iter().map(|p| (*p).clone()).collect();
        assert_eq!(before, after);
        assert!(stats.log.is_empty());
    }
}
