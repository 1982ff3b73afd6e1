//! Property tests for the structural invariants: schedules, batching,
//! subsequences, rounding distributions and loss linearity.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use versecraft::controller::{metrical_loss, ControllerModel};
use versecraft::corpus::{make_batches, BatchMode, FormatTemplate, Language, Poem, Symbol, EOS, RESERVED};
use versecraft::diffusion::{make_schedule, LatentSeq, ScheduleKind};
use versecraft::embedding::{round_logits, RoundingHead};
use versecraft::metrics::distinct;
use versecraft::sampler::ddim_subsequence;
use versecraft::SeedRng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_hold_their_invariants(t_max in 2usize..400, sqrt_kind in any::<bool>()) {
        let kind = if sqrt_kind { ScheduleKind::Sqrt } else { ScheduleKind::Linear };
        let s = make_schedule(t_max, kind).unwrap();
        prop_assert_eq!(s.beta.len(), t_max);
        for t in 1..=t_max {
            let b = s.beta_at(t);
            prop_assert!(0.0 < b && b < 1.0);
            prop_assert!((s.alpha_at(t) - (1.0 - b)).abs() == 0.0);
        }
        for t in 1..t_max {
            prop_assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
    }

    #[test]
    fn subsequences_start_at_t_end_at_1_strictly_decreasing(
        t_max in 2usize..3000,
        k_frac in 0.01f64..1.0,
    ) {
        let k = ((t_max as f64 * k_frac) as usize).clamp(2, t_max);
        let steps = ddim_subsequence(t_max, k).unwrap();
        prop_assert_eq!(steps.len(), k);
        prop_assert_eq!(steps[0], t_max);
        prop_assert_eq!(*steps.last().unwrap(), 1);
        for w in steps.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn concat_chunk_conserves_tokens(
        lens in prop::collection::vec(2usize..40, 1..30),
        block_len in 2usize..50,
    ) {
        let poems: Vec<Poem> = lens
            .iter()
            .map(|&n| Poem {
                tokens: {
                    let mut t: Vec<u32> = (0..n as u32 - 1).map(|i| RESERVED + i % 5).collect();
                    t.push(EOS);
                    t
                },
                line_spans: vec![(0, n)],
                language: Language::Sonnet,
                raw_text: String::new(),
            })
            .collect();
        let total: usize = poems.iter().map(|p| p.tokens.len()).sum();
        let batches = make_batches(&poems, BatchMode::ConcatChunk, block_len, 7).unwrap();
        let rows: usize = batches.iter().map(|b| b.nrows()).sum();
        let dropped = total - rows * block_len;
        prop_assert_eq!(rows, total / block_len);
        prop_assert!(dropped < block_len);
        for b in &batches {
            prop_assert_eq!(b.ncols(), block_len);
            prop_assert!(b.nrows() <= 7);
        }
    }

    #[test]
    fn rounding_rows_are_distributions_for_any_finite_input(
        seed in any::<u64>(),
        n in 1usize..8,
        scale in 0.1f64..50.0,
    ) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let head = RoundingHead::new(&mut rng, 4, 6, 11);
        let x = LatentSeq {
            values: versecraft::nn::randn(&mut rng, n, 4, scale),
            t: 0,
        };
        let probs = round_logits(&x, &head);
        for row in probs.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
        }
    }

    #[test]
    fn metrical_loss_scales_linearly_in_lambda(
        seed in any::<u64>(),
        a in 0.0f64..10.0,
    ) {
        let mut rng = SeedRng::seed_from_u64(seed);
        let model = ControllerModel::new(&mut rng, Language::Sonnet, 4, 6, 5);
        let x = LatentSeq {
            values: versecraft::nn::randn(&mut rng, 4, 4, 1.0),
            t: 1,
        };
        let template = FormatTemplate {
            language: Language::Sonnet,
            symbols: vec![Symbol::Mask, Symbol::Mask, Symbol::Mask, Symbol::Eos],
            rhyme_positions: vec![(2, 3)],
            tone_labels: None,
            r_size: 5,
            vocab_hash: None,
        };
        let base = metrical_loss(&x, &template, &model, (1.0, 0.0, 1.0)).unwrap();
        let scaled = metrical_loss(&x, &template, &model, (a, 0.0, a)).unwrap();
        prop_assert!((scaled - a * base).abs() < 1e-9 * (1.0 + a * base.abs()));
    }

    #[test]
    fn distinct_stays_in_bounds_and_drops_under_duplication(
        toks in prop::collection::vec(RESERVED..RESERVED + 12, 2..40),
    ) {
        let mut tokens = toks.clone();
        tokens.push(EOS);
        let poem = Poem {
            line_spans: vec![(0, tokens.len())],
            tokens,
            language: Language::Sonnet,
            raw_text: String::new(),
        };
        let d = distinct(std::slice::from_ref(&poem), 2);
        prop_assert!((0.0..=100.0).contains(&d));
        let d_dup = distinct(&[poem.clone(), poem], 2);
        prop_assert!(d_dup <= d + 1e-12);
    }

    #[test]
    fn pad_batches_tile_every_poem(
        lens in prop::collection::vec(2usize..20, 1..20),
        batch_size in 1usize..9,
    ) {
        let poems: Vec<Poem> = lens
            .iter()
            .map(|&n| Poem {
                tokens: {
                    let mut t: Vec<u32> = (0..n as u32 - 1).map(|i| RESERVED + i % 5).collect();
                    t.push(EOS);
                    t
                },
                line_spans: vec![(0, n)],
                language: Language::Sonnet,
                raw_text: String::new(),
            })
            .collect();
        let block_len = *lens.iter().max().unwrap();
        let batches = make_batches(&poems, BatchMode::Pad, block_len, batch_size).unwrap();
        let rows: usize = batches.iter().map(Array2::nrows).sum();
        prop_assert_eq!(rows, poems.len());
    }
}
