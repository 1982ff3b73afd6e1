//! Token ↔ continuous-vector maps: the embedding table and the softmax
//! rounding head that turns latent rows back into token distributions.

use crate::autodiff::Graph;
use crate::corpus::{Language, Poem, Vocab};
use crate::diffusion::LatentSeq;
use crate::nn::{rand_uniform, Mlp};
use crate::{Error, Result, SeedRng};
use ndarray::Array2;

/// |V|×d table of token embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub matrix: Array2<f64>,
}

impl EmbeddingTable {
    /// Rows drawn uniform in [-1,1]^d, then normalized to length √d so each
    /// coordinate carries unit variance against the forward noise. Distinct
    /// draws give pairwise distinct rows with probability one.
    pub fn new(rng: &mut SeedRng, vocab_size: usize, dim: usize) -> Self {
        let matrix = rand_uniform(rng, vocab_size, dim, -1.0, 1.0);
        let mut table = EmbeddingTable { matrix };
        table.renormalize_rows();
        table
    }

    /// Project every row back to length √d. Applied after each training
    /// step: the mean-squared diffusion terms otherwise shrink the table,
    /// starving the rounding head and the controller of signal.
    pub fn renormalize_rows(&mut self) {
        let target = (self.dim() as f64).sqrt();
        for mut row in self.matrix.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v * target / norm);
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        vec![&self.matrix]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.matrix]
    }
}

/// A rounding head: single-hidden-layer perceptron from latent rows to
/// vocabulary logits, applied with a softmax.
#[derive(Clone, Debug)]
pub struct RoundingHead {
    pub mlp: Mlp,
}

impl RoundingHead {
    pub fn new(rng: &mut SeedRng, dim: usize, hidden: usize, vocab_size: usize) -> Self {
        RoundingHead {
            mlp: Mlp::new(rng, dim, hidden, vocab_size),
        }
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.mlp.params_mut()
    }
}

/// Look up the embedding rows of a poem's tokens: the t=0 latent state.
pub fn embed(poem: &Poem, table: &EmbeddingTable) -> Result<LatentSeq> {
    embed_tokens(&poem.tokens, table)
}

pub fn embed_tokens(tokens: &[u32], table: &EmbeddingTable) -> Result<LatentSeq> {
    let mut values = Array2::zeros((tokens.len(), table.dim()));
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= table.vocab_size() {
            return Err(Error::Corpus(format!(
                "token id {t} out of range for vocab of {}",
                table.vocab_size()
            )));
        }
        values.row_mut(i).assign(&table.matrix.row(t as usize));
    }
    Ok(LatentSeq { values, t: 0 })
}

/// Per-position probability distributions over the vocabulary: N×|V| rows
/// summing to one. Positions are independent (the product form of the
/// rounding distribution).
pub fn round_logits(x: &LatentSeq, head: &RoundingHead) -> Array2<f64> {
    let logits = head.mlp.logits_plain(&x.values);
    let mut g = Graph::new();
    let id = g.leaf(logits);
    let sm = g.row_softmax(id);
    g.value(sm).clone()
}

/// Decoded poem plus whether the decode found no ending signal at all.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub poem: Poem,
    pub degenerate: bool,
}

/// Per-position argmax decode; ties break toward the lowest token id.
/// Line spans are recomputed from wherever ending signals landed.
pub fn decode(x: &LatentSeq, head: &RoundingHead, language: Language, vocab: &Vocab) -> Decoded {
    let probs = round_logits(x, head);
    let tokens: Vec<u32> = probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_p = row[0];
            for (j, &p) in row.iter().enumerate().skip(1) {
                if p > best_p {
                    best = j;
                    best_p = p;
                }
            }
            best as u32
        })
        .collect();
    let (poem, degenerate) = Poem::from_tokens(tokens, language, vocab);
    Decoded { poem, degenerate }
}
