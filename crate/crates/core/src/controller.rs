//! The metrical controller: per-position heads over diffusion latents that
//! score format, rhyme and tone compliance, trained separately from the
//! denoiser on noised latents so their gradients stay meaningful throughout
//! the reverse process.

use crate::autodiff::{Graph, NodeId};
use crate::corpus::{
    build_format_template, FormatTemplate, Language, Poem, RhymeLexicon, Symbol, Tone, Vocab,
};
use crate::diffusion::{q_sample, LatentSeq, NoiseSchedule};
use crate::embedding::EmbeddingTable;
use crate::nn::{noise_like, Activation, Adam, Mlp, StagedMlp};
use crate::{Error, Result, SeedRng};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const TONE_CLASSES: usize = 3;

/// Running averages of the component losses observed in training; used to
/// scale guidance weights against the semantic loss.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossAverages {
    pub format: f64,
    pub rhyme: f64,
    pub tone: f64,
}

/// Weights of the joint metrical loss, in the order (format, tone, rhyme).
pub type Lambda = (f64, f64, f64);

#[derive(Clone, Debug)]
pub struct ControllerModel {
    pub language: Language,
    /// φ: per-position symbol classifier over the language's symbol set.
    pub format_head: Mlp,
    /// Rhyme-class classifier over R classes.
    pub rhyme_head: Mlp,
    /// Tone classifier; songci only.
    pub tone_head: Option<Mlp>,
    pub r_size: u32,
    pub lambda: Lambda,
    pub loss_avgs: LossAverages,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            hidden: 64,
            iterations: 30000,
            lr: 1e-3,
            seed: 0,
            log_every: 500,
        }
    }
}

impl ControllerModel {
    pub fn new(
        rng: &mut SeedRng,
        language: Language,
        dim: usize,
        hidden: usize,
        r_size: u32,
    ) -> Self {
        let n_symbols = Symbol::set_for(language).len();
        // GELU heads: guidance needs gradients that survive confident
        // predictions, where tanh saturates.
        let tone_head = match language {
            Language::SongCi => {
                Some(Mlp::new(rng, dim, hidden, TONE_CLASSES).with_activation(Activation::Gelu))
            }
            Language::Sonnet => None,
        };
        ControllerModel {
            language,
            format_head: Mlp::new(rng, dim, hidden, n_symbols)
                .with_activation(Activation::Gelu),
            rhyme_head: Mlp::new(rng, dim, hidden, r_size as usize)
                .with_activation(Activation::Gelu),
            tone_head,
            r_size,
            lambda: (1.0, 1.0, 1.0),
            loss_avgs: LossAverages::default(),
        }
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut p = self.format_head.params();
        p.extend(self.rhyme_head.params());
        if let Some(t) = &self.tone_head {
            p.extend(t.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>>{
        let mut p = self.format_head.params_mut();
        p.extend(self.rhyme_head.params_mut());
        if let Some(t) = &mut self.tone_head {
            p.extend(t.params_mut());
        }
        p
    }
}

pub struct StagedController {
    pub format_head: StagedMlp,
    pub rhyme_head: StagedMlp,
    pub tone_head: Option<StagedMlp>,
}

impl ControllerModel {
    pub fn stage(&self, g: &mut Graph) -> StagedController {
        StagedController {
            format_head: self.format_head.stage(g),
            rhyme_head: self.rhyme_head.stage(g),
            tone_head: self.tone_head.as_ref().map(|t| t.stage(g)),
        }
    }
}

impl StagedController {
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut p = self.format_head.param_ids();
        p.extend(self.rhyme_head.param_ids());
        if let Some(t) = &self.tone_head {
            p.extend(t.param_ids());
        }
        p
    }
}

/// A loss value plus how many positions actually constrained it. Zero
/// effective positions means the loss is trivially 0 (flagged).
#[derive(Clone, Copy, Debug)]
pub struct MetricalTerm {
    pub value: f64,
    pub effective_positions: usize,
}

impl MetricalTerm {
    pub fn no_effective_positions(&self) -> bool {
        self.effective_positions == 0
    }
}

fn one_hot(rows: usize, cols: usize, hot: impl Iterator<Item = usize>) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for (i, j) in hot.enumerate() {
        m[(i, j)] = 1.0;
    }
    m
}

/// Stage the format loss: mean-squared error between the one-hot template
/// symbols and φ's softmax output, averaged over positions and classes.
pub fn stage_format_loss(
    g: &mut Graph,
    staged: &StagedController,
    language: Language,
    x: NodeId,
    template: &FormatTemplate,
) -> Result<NodeId> {
    let n = g.value(x).nrows();
    if template.symbols.len() != n {
        return Err(Error::Shape(format!(
            "template length {} != sequence length {n}",
            template.symbols.len()
        )));
    }
    let classes = Symbol::set_for(language).len();
    let hot = one_hot(
        n,
        classes,
        template.symbols.iter().map(|s| {
            s.class_index(language)
                .expect("template validated against language")
        }),
    );
    let logits = staged.format_head.logits(g, x);
    let probs = g.row_softmax(logits);
    let target = g.leaf(hot);
    let diff = g.sub(probs, target);
    let ss = g.sum_squares(diff);
    Ok(g.scale(ss, 1.0 / (n * classes) as f64))
}

/// Stage the rhyme loss: mean negative log-probability of the true rhyme
/// class at each labelled rhyme position. Positions carrying the UNK class
/// are excluded. Returns the node and the number of effective positions.
pub fn stage_rhyme_loss(
    g: &mut Graph,
    staged: &StagedController,
    r_size: u32,
    x: NodeId,
    template: &FormatTemplate,
) -> Result<(NodeId, usize)> {
    let n = g.value(x).nrows();
    let mut positions = Vec::new();
    let mut classes = Vec::new();
    for &(pos, class) in &template.rhyme_positions {
        if pos >= n {
            return Err(Error::Shape(format!(
                "rhyme position {pos} outside sequence of length {n}"
            )));
        }
        if class < r_size {
            positions.push(pos);
            classes.push(class as usize);
        }
    }
    if positions.is_empty() {
        return Ok((g.scalar(0.0), 0));
    }
    let rows = g.gather_rows(x, &positions);
    let logits = staged.rhyme_head.logits(g, rows);
    let logp = g.row_log_softmax(logits);
    let nll = g.neg_pick(logp, &classes);
    Ok((g.scale(nll, 1.0 / positions.len() as f64), positions.len()))
}

/// Stage the tone loss: mean negative log-probability of the true tone over
/// positions with a level/oblique requirement ("0" positions are excluded).
pub fn stage_tone_loss(
    g: &mut Graph,
    staged: &StagedController,
    language: Language,
    x: NodeId,
    template: &FormatTemplate,
) -> Result<(NodeId, usize)> {
    if language == Language::Sonnet {
        return Err(Error::Config("tone undefined for sonnet".into()));
    }
    let tone_head = staged
        .tone_head
        .as_ref()
        .ok_or_else(|| Error::Config("controller has no tone head".into()))?;
    let labels = template
        .tone_labels
        .as_ref()
        .ok_or_else(|| Error::Config("template has no tone labels".into()))?;
    let n = g.value(x).nrows();
    if labels.len() != n {
        return Err(Error::Shape("tone labels length mismatch".into()));
    }
    let mut positions = Vec::new();
    let mut classes = Vec::new();
    for (i, &tone) in labels.iter().enumerate() {
        if tone != Tone::Free {
            positions.push(i);
            classes.push(tone.index());
        }
    }
    if positions.is_empty() {
        return Ok((g.scalar(0.0), 0));
    }
    let rows = g.gather_rows(x, &positions);
    let logits = tone_head.logits(g, rows);
    let logp = g.row_log_softmax(logits);
    let nll = g.neg_pick(logp, &classes);
    Ok((g.scale(nll, 1.0 / positions.len() as f64), positions.len()))
}

/// Stage the weighted joint metrical loss λ₁·format + λ₂·tone + λ₃·rhyme.
/// The tone term is omitted for sonnets.
pub fn stage_metrical_loss(
    g: &mut Graph,
    staged: &StagedController,
    model: &ControllerModel,
    lambda: Lambda,
    x: NodeId,
    template: &FormatTemplate,
) -> Result<NodeId> {
    let (l1, l2, l3) = lambda;
    let format = stage_format_loss(g, staged, model.language, x, template)?;
    let mut total = g.scale(format, l1);
    if model.language == Language::SongCi {
        let (tone, _) = stage_tone_loss(g, staged, model.language, x, template)?;
        let tone = g.scale(tone, l2);
        total = g.add(total, tone);
    }
    let (rhyme, _) = stage_rhyme_loss(g, staged, model.r_size, x, template)?;
    let rhyme = g.scale(rhyme, l3);
    Ok(g.add(total, rhyme))
}

/// Plain evaluation wrappers over the staged losses.
pub fn format_loss(x: &LatentSeq, template: &FormatTemplate, model: &ControllerModel) -> Result<f64> {
    let mut g = Graph::new();
    let staged = model.stage(&mut g);
    let xid = g.leaf(x.values.clone());
    let node = stage_format_loss(&mut g, &staged, model.language, xid, template)?;
    Ok(g.scalar_value(node))
}

pub fn rhyme_loss(
    x: &LatentSeq,
    template: &FormatTemplate,
    model: &ControllerModel,
) -> Result<MetricalTerm> {
    let mut g = Graph::new();
    let staged = model.stage(&mut g);
    let xid = g.leaf(x.values.clone());
    let (node, effective) = stage_rhyme_loss(&mut g, &staged, model.r_size, xid, template)?;
    Ok(MetricalTerm {
        value: g.scalar_value(node),
        effective_positions: effective,
    })
}

pub fn tone_loss(
    x: &LatentSeq,
    template: &FormatTemplate,
    model: &ControllerModel,
) -> Result<MetricalTerm> {
    let mut g = Graph::new();
    let staged = model.stage(&mut g);
    let xid = g.leaf(x.values.clone());
    let (node, effective) = stage_tone_loss(&mut g, &staged, model.language, xid, template)?;
    Ok(MetricalTerm {
        value: g.scalar_value(node),
        effective_positions: effective,
    })
}

pub fn metrical_loss(
    x: &LatentSeq,
    template: &FormatTemplate,
    model: &ControllerModel,
    lambda: Lambda,
) -> Result<f64> {
    let mut g = Graph::new();
    let staged = model.stage(&mut g);
    let xid = g.leaf(x.values.clone());
    let node = stage_metrical_loss(&mut g, &staged, model, lambda, xid, template)?;
    Ok(g.scalar_value(node))
}

#[derive(Clone, Debug, Default)]
pub struct ControllerTrainStats {
    pub log: Vec<(usize, f64)>,
    pub final_avgs: LossAverages,
}

/// Train the controller heads on noised latents `q_sample(E(w), t)` with
/// uniformly random t, against targets read off each poem's template.
/// The embedding table is frozen; only head parameters move.
pub fn train_controller(
    model: &mut ControllerModel,
    poems: &[Poem],
    lexicon: &RhymeLexicon,
    vocab: &Vocab,
    table: &EmbeddingTable,
    schedule: &NoiseSchedule,
    cfg: &ControllerConfig,
) -> Result<ControllerTrainStats> {
    use rand::SeedableRng;
    if poems.is_empty() {
        return Err(Error::Config("no poems for controller training".into()));
    }
    let templates: Vec<FormatTemplate> = poems
        .iter()
        .map(|p| build_format_template(p, lexicon, vocab))
        .collect();
    let mut rng = SeedRng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr, &model.params());
    let mut stats = ControllerTrainStats::default();
    let mut avgs = LossAverages::default();
    let decay = 0.99;
    for step in 0..cfg.iterations {
        let pidx = rng.random_range(0..poems.len());
        let poem = &poems[pidx];
        let template = &templates[pidx];
        let t = rng.random_range(1..=schedule.t_max);
        let x0 = crate::embedding::embed(poem, table)?;
        let noise = noise_like(&mut rng, x0.seq_len(), x0.dim());
        let x_t = q_sample(&x0, t, &noise, schedule)?;

        let mut g = Graph::new();
        let staged = model.stage(&mut g);
        let xid = g.leaf(x_t.values);
        let format = stage_format_loss(&mut g, &staged, model.language, xid, template)?;
        let (rhyme, _) = stage_rhyme_loss(&mut g, &staged, model.r_size, xid, template)?;
        let mut total = g.add(format, rhyme);
        let mut tone_val = 0.0;
        if model.language == Language::SongCi {
            let (tone, _) = stage_tone_loss(&mut g, &staged, model.language, xid, template)?;
            tone_val = g.scalar_value(tone);
            total = g.add(total, tone);
        }
        let loss = g.scalar_value(total);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "controller training diverged at step {step}"
            )));
        }
        let grads = g.backward(total);
        let grad_list: Vec<Array2<f64>> = staged
            .param_ids()
            .iter()
            .map(|&id| grads.wrt(id).clone())
            .collect();
        opt.step(&mut model.params_mut(), &grad_list);

        let f = g.scalar_value(format);
        let r = g.scalar_value(rhyme);
        if step == 0 {
            avgs = LossAverages {
                format: f,
                rhyme: r,
                tone: tone_val,
            };
        } else {
            avgs.format = decay * avgs.format + (1.0 - decay) * f;
            avgs.rhyme = decay * avgs.rhyme + (1.0 - decay) * r;
            avgs.tone = decay * avgs.tone + (1.0 - decay) * tone_val;
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.iterations {
            stats.log.push((step, loss));
        }
    }
    model.loss_avgs = avgs;
    stats.final_avgs = avgs;
    Ok(stats)
}

/// Position accuracy of the format head on noised latents at timestep t.
pub fn format_accuracy(
    model: &ControllerModel,
    poems: &[Poem],
    lexicon: &RhymeLexicon,
    vocab: &Vocab,
    table: &EmbeddingTable,
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut SeedRng,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for poem in poems {
        let template = build_format_template(poem, lexicon, vocab);
        let x0 = crate::embedding::embed(poem, table)?;
        let noise = noise_like(rng, x0.seq_len(), x0.dim());
        let x_t = q_sample(&x0, t, &noise, schedule)?;
        let logits = model.format_head.logits_plain(&x_t.values);
        for (i, symbol) in template.symbols.iter().enumerate() {
            let want = symbol.class_index(model.language).unwrap();
            let row = logits.row(i);
            let got = argmax(row.as_slice().unwrap());
            if got == want {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Accuracy of the rhyme head at labelled rhyme positions, at timestep t.
pub fn rhyme_accuracy(
    model: &ControllerModel,
    poems: &[Poem],
    lexicon: &RhymeLexicon,
    vocab: &Vocab,
    table: &EmbeddingTable,
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut SeedRng,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for poem in poems {
        let template = build_format_template(poem, lexicon, vocab);
        let x0 = crate::embedding::embed(poem, table)?;
        let noise = noise_like(rng, x0.seq_len(), x0.dim());
        let x_t = q_sample(&x0, t, &noise, schedule)?;
        for &(pos, class) in &template.rhyme_positions {
            if class >= model.r_size {
                continue;
            }
            let row = x_t.values.row(pos).insert_axis(ndarray::Axis(0)).to_owned();
            let logits = model.rhyme_head.logits_plain(&row);
            if argmax(logits.row(0).as_slice().unwrap()) == class as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = xs[0];
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Symbol, Tone};
    use rand::SeedableRng;

    fn template_sonnet(symbols: Vec<Symbol>, rhyme: Vec<(usize, u32)>, r: u32) -> FormatTemplate {
        FormatTemplate {
            language: Language::Sonnet,
            symbols,
            rhyme_positions: rhyme,
            tone_labels: None,
            r_size: r,
            vocab_hash: None,
        }
    }

    fn zeroed_controller(language: Language, dim: usize, r: u32) -> ControllerModel {
        let mut rng = SeedRng::seed_from_u64(0);
        let mut m = ControllerModel::new(&mut rng, language, dim, 8, r);
        for p in m.params_mut() {
            p.fill(0.0);
        }
        m
    }

    #[test]
    fn uniform_format_head_matches_algebra() {
        // uniform φ over k symbols vs one-hot target:
        // ((1-1/k)^2 + (k-1)/k^2)/k per position
        let model = zeroed_controller(Language::Sonnet, 4, 6);
        let k = Symbol::set_for(Language::Sonnet).len() as f64;
        let expect = ((1.0 - 1.0 / k).powi(2) + (k - 1.0) / (k * k)) / k;
        let x = LatentSeq {
            values: Array2::zeros((3, 4)),
            t: 1,
        };
        let template = template_sonnet(
            vec![Symbol::Mask, Symbol::Mask, Symbol::Eos],
            vec![(1, 0)],
            6,
        );
        let got = format_loss(&x, &template, &model).unwrap();
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
    }

    #[test]
    fn uniform_rhyme_head_gives_ln_r() {
        let model = zeroed_controller(Language::Sonnet, 4, 17);
        let x = LatentSeq {
            values: Array2::zeros((5, 4)),
            t: 1,
        };
        let template = template_sonnet(
            vec![Symbol::Mask; 5],
            vec![(0, 3), (2, 11)],
            17,
        );
        let got = rhyme_loss(&x, &template, &model).unwrap();
        assert_eq!(got.effective_positions, 2);
        assert!((got.value - (17.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_unk_rhyme_positions_flagged() {
        let model = zeroed_controller(Language::Sonnet, 4, 17);
        let x = LatentSeq {
            values: Array2::zeros((3, 4)),
            t: 1,
        };
        let template = template_sonnet(vec![Symbol::Mask; 3], vec![(0, 17), (1, 17)], 17);
        let got = rhyme_loss(&x, &template, &model).unwrap();
        assert!(got.no_effective_positions());
        assert_eq!(got.value, 0.0);
    }

    #[test]
    fn uniform_tone_head_gives_ln_3() {
        let model = zeroed_controller(Language::SongCi, 4, 17);
        let x = LatentSeq {
            values: Array2::zeros((4, 4)),
            t: 1,
        };
        let template = FormatTemplate {
            language: Language::SongCi,
            symbols: vec![Symbol::Mask; 4],
            rhyme_positions: vec![],
            tone_labels: Some(vec![Tone::Level, Tone::Oblique, Tone::Level, Tone::Oblique]),
            r_size: 17,
            vocab_hash: None,
        };
        let got = tone_loss(&x, &template, &model).unwrap();
        assert_eq!(got.effective_positions, 4);
        assert!((got.value - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_free_tone_labels_flagged() {
        let model = zeroed_controller(Language::SongCi, 4, 17);
        let x = LatentSeq {
            values: Array2::zeros((2, 4)),
            t: 1,
        };
        let template = FormatTemplate {
            language: Language::SongCi,
            symbols: vec![Symbol::Mask; 2],
            rhyme_positions: vec![],
            tone_labels: Some(vec![Tone::Free, Tone::Free]),
            r_size: 17,
            vocab_hash: None,
        };
        let got = tone_loss(&x, &template, &model).unwrap();
        assert!(got.no_effective_positions());
        assert_eq!(got.value, 0.0);
    }

    #[test]
    fn tone_loss_rejects_sonnet() {
        let model = zeroed_controller(Language::Sonnet, 4, 6);
        let x = LatentSeq {
            values: Array2::zeros((2, 4)),
            t: 1,
        };
        let template = template_sonnet(vec![Symbol::Mask; 2], vec![], 6);
        let err = tone_loss(&x, &template, &model).unwrap_err();
        assert!(err.to_string().contains("tone undefined for sonnet"));
    }

    #[test]
    fn metrical_loss_zero_lambda_is_zero() {
        let mut rng = SeedRng::seed_from_u64(3);
        let model = ControllerModel::new(&mut rng, Language::Sonnet, 4, 8, 6);
        let x = LatentSeq {
            values: crate::nn::noise_like(&mut rng, 3, 4),
            t: 1,
        };
        let template = template_sonnet(
            vec![Symbol::Mask, Symbol::Mask, Symbol::Eos],
            vec![(1, 2)],
            6,
        );
        let got = metrical_loss(&x, &template, &model, (0.0, 0.0, 0.0)).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn metrical_loss_lambda_100_equals_format_loss() {
        let mut rng = SeedRng::seed_from_u64(4);
        let model = ControllerModel::new(&mut rng, Language::Sonnet, 4, 8, 6);
        let x = LatentSeq {
            values: crate::nn::noise_like(&mut rng, 3, 4),
            t: 1,
        };
        let template = template_sonnet(
            vec![Symbol::Mask, Symbol::Mask, Symbol::Eos],
            vec![(1, 2)],
            6,
        );
        let joint = metrical_loss(&x, &template, &model, (1.0, 0.0, 0.0)).unwrap();
        let format = format_loss(&x, &template, &model).unwrap();
        assert!((joint - format).abs() < 1e-15);
    }

    #[test]
    fn metrical_loss_sums_components() {
        let mut rng = SeedRng::seed_from_u64(5);
        let model = ControllerModel::new(&mut rng, Language::SongCi, 4, 8, 17);
        let x = LatentSeq {
            values: crate::nn::noise_like(&mut rng, 4, 4),
            t: 2,
        };
        let template = FormatTemplate {
            language: Language::SongCi,
            symbols: vec![Symbol::Mask, Symbol::Mask, Symbol::Comma, Symbol::Mask],
            rhyme_positions: vec![(1, 5)],
            tone_labels: Some(vec![Tone::Level, Tone::Oblique, Tone::Free, Tone::Level]),
            r_size: 17,
            vocab_hash: None,
        };
        let joint = metrical_loss(&x, &template, &model, (1.0, 1.0, 1.0)).unwrap();
        let f = format_loss(&x, &template, &model).unwrap();
        let r = rhyme_loss(&x, &template, &model).unwrap().value;
        let t = tone_loss(&x, &template, &model).unwrap().value;
        assert!((joint - (f + r + t)).abs() < 1e-9);
    }

    #[test]
    fn metrical_loss_is_linear_in_lambda() {
        let mut rng = SeedRng::seed_from_u64(6);
        let model = ControllerModel::new(&mut rng, Language::Sonnet, 4, 8, 6);
        let x = LatentSeq {
            values: crate::nn::noise_like(&mut rng, 3, 4),
            t: 1,
        };
        let template = template_sonnet(
            vec![Symbol::Mask, Symbol::Mask, Symbol::Eos],
            vec![(1, 2)],
            6,
        );
        let l1 = metrical_loss(&x, &template, &model, (0.7, 0.0, 1.3)).unwrap();
        let l2 = metrical_loss(&x, &template, &model, (1.4, 0.0, 2.6)).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn perfect_heads_give_zero_losses() {
        // Construct a 1-position case where heads put all mass on the target:
        // drive logits through large biases.
        let mut model = zeroed_controller(Language::Sonnet, 4, 6);
        model.format_head.out.b[(0, 1)] = 50.0; // class 1 = Eos
        model.rhyme_head.out.b[(0, 3)] = 50.0;
        let x = LatentSeq {
            values: Array2::zeros((1, 4)),
            t: 1,
        };
        let template = template_sonnet(vec![Symbol::Eos], vec![(0, 3)], 6);
        let f = format_loss(&x, &template, &model).unwrap();
        let r = rhyme_loss(&x, &template, &model).unwrap().value;
        assert!(f < 1e-9, "format {f}");
        assert!(r < 1e-9, "rhyme {r}");
    }

    #[test]
    fn format_loss_rejects_length_mismatch() {
        let model = zeroed_controller(Language::Sonnet, 4, 6);
        let x = LatentSeq {
            values: Array2::zeros((2, 4)),
            t: 1,
        };
        let template = template_sonnet(vec![Symbol::Mask; 3], vec![], 6);
        assert!(format_loss(&x, &template, &model).is_err());
    }

    #[test]
    fn rhyme_loss_rejects_position_past_end() {
        let model = zeroed_controller(Language::Sonnet, 4, 6);
        let x = LatentSeq {
            values: Array2::zeros((2, 4)),
            t: 1,
        };
        let template = template_sonnet(vec![Symbol::Mask; 2], vec![(5, 0)], 6);
        assert!(rhyme_loss(&x, &template, &model).is_err());
    }
}
