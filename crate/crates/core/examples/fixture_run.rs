//! End-to-end fixture walkthrough: synthesize a corpus, train the denoiser
//! and controller, then compare guided and unguided generation.
//!
//! Run with: cargo run --release -p versecraft --example fixture_run

use rand::SeedableRng;
use versecraft::controller::{ControllerConfig, ControllerModel};
use versecraft::corpus::{make_batches, BatchMode};
use versecraft::diffusion::{
    make_schedule, roundtrip_accuracy, train, DenoiserConfig, DenoiserModel, ScheduleKind,
    TrainConfig,
};
use versecraft::embedding::{EmbeddingTable, RoundingHead};
use versecraft::fixture::{sonnet_fixture, synthesize_sonnet_template, SonnetFixtureConfig};
use versecraft::metrics::{format_score_template, rhyme_compliance};
use versecraft::sampler::{generate, GuidanceConfig, Models};
use versecraft::SeedRng;

fn main() -> versecraft::Result<()> {
    let t0 = std::time::Instant::now();
    let fcfg = SonnetFixtureConfig::default();
    let fixture = sonnet_fixture(&fcfg)?;
    let vocab = &fixture.corpus.vocab;
    println!(
        "fixture: {} poems, vocab {}, {:?}",
        fixture.corpus.poems.len(),
        vocab.len(),
        t0.elapsed()
    );

    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let ctrl_iterations: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);

    let block_len = fixture
        .corpus
        .poems
        .iter()
        .map(|p| p.tokens.len())
        .max()
        .unwrap();
    let batches = make_batches(&fixture.corpus.poems, BatchMode::Pad, block_len, 16)?;
    println!("batches: {} of {}x{}", batches.len(), 16, block_len);

    let schedule = make_schedule(200, ScheduleKind::Sqrt)?;
    let mut rng = SeedRng::seed_from_u64(7);
    let dcfg = DenoiserConfig {
        dim: 16,
        hidden: 64,
        blocks: 2,
        ffn: 128,
    };
    let mut denoiser = DenoiserModel::new(&mut rng, dcfg);
    let mut table = EmbeddingTable::new(&mut rng, vocab.len() as usize, 16);
    let mut rounding = RoundingHead::new(&mut rng, 16, 64, vocab.len() as usize);

    let t1 = std::time::Instant::now();
    let stats = train(
        &mut denoiser,
        &mut table,
        &mut rounding,
        &batches,
        &schedule,
        &TrainConfig {
            iterations,
            lr: 1e-3,
            seed: 7,
            log_every: 200,
        },
    )?;
    println!(
        "train {} iters in {:?}: initial_avg {:.3}, final_avg {:.3}, ema {:.3}",
        iterations,
        t1.elapsed(),
        stats.initial_avg,
        stats.final_avg,
        stats.semantic_loss_avg
    );
    for row in &stats.log {
        println!(
            "  step {:5}  loss {:9.3}  mse {:8.3} anchor {:8.3} round {:8.3}",
            row.step, row.loss, row.mse, row.anchor, row.rounding
        );
    }
    let acc = roundtrip_accuracy(&table, &rounding, &fixture.heldout);
    println!("decode(embed(w)) heldout accuracy: {:.4}", acc);

    let t2 = std::time::Instant::now();
    let mut controller = ControllerModel::new(
        &mut rng,
        versecraft::corpus::Language::Sonnet,
        16,
        64,
        fcfg.r_size,
    );
    let cstats = versecraft::controller::train_controller(
        &mut controller,
        &fixture.corpus.poems,
        &fixture.lexicon,
        vocab,
        &table,
        &schedule,
        &ControllerConfig {
            iterations: ctrl_iterations,
            seed: 8,
            ..ControllerConfig::default()
        },
    )?;
    println!(
        "controller {} iters in {:?}; avgs format {:.4} rhyme {:.4}",
        ctrl_iterations,
        t2.elapsed(),
        cstats.final_avgs.format,
        cstats.final_avgs.rhyme
    );
    let mut acc_rng = SeedRng::seed_from_u64(99);
    for t in [10usize, 100, 190] {
        let fa = versecraft::controller::format_accuracy(
            &controller,
            &fixture.heldout,
            &fixture.lexicon,
            vocab,
            &table,
            &schedule,
            t,
            &mut acc_rng,
        )?;
        let ra = versecraft::controller::rhyme_accuracy(
            &controller,
            &fixture.heldout,
            &fixture.lexicon,
            vocab,
            &table,
            &schedule,
            t,
            &mut acc_rng,
        )?;
        println!("  t={t:3}: format acc {fa:.3}, rhyme acc {ra:.3}");
    }

    let norms: Vec<f64> = table
        .matrix
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    println!(
        "table row norms: mean {:.3}, min {:.3}, max {:.3}",
        norms.iter().sum::<f64>() / norms.len() as f64,
        norms.iter().cloned().fold(f64::INFINITY, f64::min),
        norms.iter().cloned().fold(0.0, f64::max)
    );

    // guided vs unguided over seeds, across guidance settings
    let k = 50;
    let base = Models {
        denoiser: &denoiser,
        table: &table,
        rounding: &rounding,
        schedule: &schedule,
        vocab,
        controller: None,
        semantic_loss_avg: Some(stats.semantic_loss_avg),
    };
    let guided_models = Models {
        controller: Some(&controller),
        ..base
    };
    let grid: Vec<GuidanceConfig> = vec![
        GuidanceConfig::default(),
        GuidanceConfig {
            guidance_steps_per_t: 5,
            step_size: 0.3,
            ..GuidanceConfig::default()
        },
        GuidanceConfig {
            guidance_steps_per_t: 5,
            step_size: 0.3,
            lambda_override: Some((125.0, 0.0, 50.0)),
            ..GuidanceConfig::default()
        },
        GuidanceConfig {
            guidance_steps_per_t: 5,
            step_size: 0.3,
            lambda_override: Some((125.0, 0.0, 100.0)),
            ..GuidanceConfig::default()
        },
        GuidanceConfig {
            guidance_steps_per_t: 8,
            step_size: 0.5,
            lambda_override: Some((150.0, 0.0, 100.0)),
            ..GuidanceConfig::default()
        },
        GuidanceConfig {
            guidance_steps_per_t: 8,
            step_size: 0.5,
            lambda_override: Some((200.0, 0.0, 150.0)),
            ..GuidanceConfig::default()
        },
    ];
    for gcfg in &grid {
        let t3 = std::time::Instant::now();
        let mut sums = [0.0f64; 4];
        let n_seeds = 20;
        for seed in 0..n_seeds {
            let mut trng = SeedRng::seed_from_u64(1000 + seed);
            let template = synthesize_sonnet_template(&fcfg, None, &mut trng)?;
            let mut r1 = versecraft::chain_rng(42, seed);
            let mut r2 = versecraft::chain_rng(42, seed);
            let (u, _) = generate(&base, &template, k, gcfg, &mut r1)?;
            let (g, _) = generate(&guided_models, &template, k, gcfg, &mut r2)?;
            sums[0] += format_score_template(&u.poem, &template)?;
            sums[1] += rhyme_compliance(&u.poem, &template, &fixture.lexicon, vocab).score;
            sums[2] += format_score_template(&g.poem, &template)?;
            sums[3] += rhyme_compliance(&g.poem, &template, &fixture.lexicon, vocab).score;
        }
        let n = n_seeds as f64;
        println!(
            "steps {:2} size {:4.2} lambda {:?} ({:?}): unguided fmt {:5.1} rhyme {:5.1} | guided fmt {:5.1} rhyme {:5.1}",
            gcfg.guidance_steps_per_t,
            gcfg.step_size,
            gcfg.lambda_override,
            t3.elapsed(),
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        );
    }

    // stepwise dynamics under the tuned configuration
    let tuned_grid = [
        (12usize, 0.5f64, (150.0, 0.0, 100.0)),
    ];
    for &(gsteps, gsize, glambda) in &tuned_grid {
    let tuned = GuidanceConfig {
        guidance_steps_per_t: gsteps,
        step_size: gsize,
        lambda_override: Some(glambda),
        log_trajectory: true,
        ..GuidanceConfig::default()
    };
    println!("== tuned {gsteps} {gsize} {glambda:?}");
    {
        let mut sums = [0.0f64; 4];
        let n_seeds = 24;
        for seed in 0..n_seeds {
            let mut trng = SeedRng::seed_from_u64(1000 + seed);
            let template = synthesize_sonnet_template(&fcfg, None, &mut trng)?;
            let mut r1 = versecraft::chain_rng(42, seed);
            let mut r2 = versecraft::chain_rng(42, seed);
            let (u, _) = generate(&base, &template, k, &tuned, &mut r1)?;
            let (g, _) = generate(&guided_models, &template, k, &tuned, &mut r2)?;
            sums[0] += format_score_template(&u.poem, &template)?;
            sums[1] += rhyme_compliance(&u.poem, &template, &fixture.lexicon, vocab).score;
            sums[2] += format_score_template(&g.poem, &template)?;
            sums[3] += rhyme_compliance(&g.poem, &template, &fixture.lexicon, vocab).score;
        }
        let n = n_seeds as f64;
        println!("  c5: unguided fmt {:.1} rhyme {:.1} | guided fmt {:.1} rhyme {:.1}",
            sums[0]/n, sums[1]/n, sums[2]/n, sums[3]/n);
    }
    let db = versecraft::metrics::ReferenceDb::new(&fixture.heldout, 4)?;
    let n_seeds = 32u64;
    let mut mean_metrical = vec![0.0f64; k];
    let mut mean_fmt = vec![0.0f64; k];
    let mut mean_rhyme = vec![0.0f64; k];
    let mut mean_bleu = vec![0.0f64; k];
    for seed in 0..n_seeds {
        let mut trng = SeedRng::seed_from_u64(5000 + seed);
        let template = synthesize_sonnet_template(&fcfg, None, &mut trng)?;
        let mut r = versecraft::chain_rng(77, seed);
        let (_, trace) = generate(&guided_models, &template, k, &tuned, &mut r)?;
        let ctx = versecraft::sampler::TraceScoreContext {
            template: &template,
            lexicon: &fixture.lexicon,
            vocab,
            reference_db: Some(&db),
        };
        let rows = versecraft::sampler::trace_scores(&trace, &ctx);
        assert_eq!(rows.len(), k);
        for (i, row) in rows.iter().enumerate() {
            mean_metrical[i] += (row.format_score + row.rhyme_score) / 2.0 / n_seeds as f64;
            mean_fmt[i] += row.format_score / n_seeds as f64;
            mean_rhyme[i] += row.rhyme_score / n_seeds as f64;
            mean_bleu[i] += row.bleu_proxy / n_seeds as f64;
        }
    }
    println!("mean trace (every 5th step):");
    for i in (0..k).step_by(5).chain([k - 1]) {
        println!(
            "  step {i:2}: metrical {:6.2} (fmt {:6.2} rhyme {:6.2})  bleu {:6.2}",
            mean_metrical[i], mean_fmt[i], mean_rhyme[i], mean_bleu[i]
        );
    }
    let half = k / 2;
    let non_dec = mean_metrical[half..].windows(2).all(|w| w[1] >= w[0] - 2.0);
    let max_drop = mean_metrical[half..]
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::NEG_INFINITY, f64::max);
    println!("  max consecutive drop in last half: {max_drop:.3}");
    let final_gt_mid = mean_metrical[k - 1] > mean_metrical[half];
    let quarter = k / 4;
    let bleu_ok = mean_bleu[k - 1] >= mean_bleu[quarter];
    println!(
        "mean-trace checks: non_dec {non_dec}, final {:.2} > mid {:.2}: {final_gt_mid}, bleu final {:.2} >= quarter {:.2}: {bleu_ok}",
        mean_metrical[k - 1], mean_metrical[half], mean_bleu[k - 1], mean_bleu[quarter]
    );
    }
    Ok(())
}
