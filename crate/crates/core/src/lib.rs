//! Classifier-guided continuous diffusion for metrically constrained verse.
//!
//! The pipeline has three trainable pieces and a scoring toolkit:
//!
//! * [`diffusion`] — a denoising model over sequences of token embeddings,
//!   trained with a variational-bound objective ([`embedding`] supplies the
//!   token ↔ vector maps and the softmax rounding head).
//! * [`controller`] — a separately trained metrical controller whose format,
//!   rhyme and tone heads score intermediate latents.
//! * [`sampler`] — reverse-process generation with DDIM-style step
//!   subsetting; at each step the controller's loss gradient nudges the
//!   latent toward the requested template.
//! * [`metrics`] — format/rhyme/tone accuracies, BLEU/ROUGE/Distinct/PPL
//!   and the per-language overall score.
//!
//! All randomness flows through explicitly seeded [`SeedRng`] generators;
//! identical seeds give bitwise-identical checkpoints and samples.

pub mod autodiff;
pub mod checkpoint;
pub mod controller;
pub mod corpus;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod fixture;
pub mod metrics;
pub mod nn;
pub mod sampler;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// The single RNG type used everywhere; seedable and platform-stable.
pub type SeedRng = rand_chacha::ChaCha8Rng;

/// A generator seeded directly from a u64.
pub fn seeded_rng(seed: u64) -> SeedRng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a per-chain generator from a base seed and a chain index.
pub fn chain_rng(seed: u64, chain: u64) -> SeedRng {
    use rand::SeedableRng;
    // splitmix-style mixing so nearby chain indices decorrelate
    let mut z = seed ^ chain.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    rand_chacha::ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}
