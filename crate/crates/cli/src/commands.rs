//! Command implementations. Each returns `Ok(())` or a [`CliError`] that
//! main maps onto the documented exit codes.

use crate::config::RunConfig;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use versecraft::checkpoint::{ModelBundle, TrainMeta};
use versecraft::controller::ControllerModel;
use versecraft::corpus::{
    build_format_template, detokenize, load_corpus, load_corpus_extend, load_corpus_frozen,
    load_rhyme_lexicon, make_batches, BatchMode, FormatTemplate, Language, Poem, Vocab,
};
use versecraft::diffusion::{make_schedule, train, DenoiserModel, TrainStats};
use versecraft::embedding::{EmbeddingTable, RoundingHead};
use versecraft::metrics::{
    bleu, distinct, format_score_sonnet, format_score_template, ngram_ppl, overall_score,
    rhyme_score_songci, rhyme_score_sonnet, rouge_l, tone_score, BigramLm, Components,
    ReferenceDb, ScoreReport,
};
use versecraft::sampler::{generate, trace_csv, trace_scores, TraceScoreContext};
use versecraft::{chain_rng, seeded_rng};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    Usage(String),
    /// Everything that fails after validation; exit code 2.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<versecraft::Error> for CliError {
    fn from(e: versecraft::Error) -> Self {
        match e {
            versecraft::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CmdResult = Result<(), CliError>;

pub fn cmd_print_config() -> CmdResult {
    print!("{}", RunConfig::default().to_toml());
    Ok(())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn effective_block_len(cfg: &RunConfig, poems: &[Poem]) -> Result<usize, CliError> {
    let longest = poems.iter().map(|p| p.tokens.len()).max().unwrap_or(0);
    let block_len = if cfg.diffusion.block_len == 0 {
        longest
    } else {
        cfg.diffusion.block_len
    };
    if cfg.diffusion.batch_mode == BatchMode::Pad && block_len < longest {
        return Err(CliError::Usage(format!(
            "block_len {block_len} is shorter than the longest poem ({longest} tokens) in pad mode"
        )));
    }
    Ok(block_len)
}

fn write_train_log(path: &Path, stats: &TrainStats) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,loss,mse,anchor,rounding")?;
    for row in &stats.log {
        writeln!(
            f,
            "{},{},{},{},{}",
            row.step, row.loss, row.mse, row.anchor, row.rounding
        )?;
    }
    Ok(())
}

pub fn cmd_train(config_path: &Path) -> CmdResult {
    let cfg = RunConfig::load(config_path).map_err(CliError::Usage)?;
    let corpus = load_corpus(&cfg.corpus, cfg.language)?;
    let block_len = effective_block_len(&cfg, &corpus.poems)?;
    let batches = make_batches(
        &corpus.poems,
        cfg.diffusion.batch_mode,
        block_len,
        cfg.diffusion.batch_size,
    )?;
    let schedule = make_schedule(cfg.diffusion.t_max, cfg.diffusion.schedule)?;

    let mut rng = seeded_rng(cfg.seed);
    let mut denoiser = DenoiserModel::new(&mut rng, cfg.denoiser_config());
    let mut table = EmbeddingTable::new(
        &mut rng,
        corpus.vocab.len() as usize,
        cfg.diffusion.embed_dim,
    );
    let mut rounding = RoundingHead::new(
        &mut rng,
        cfg.diffusion.embed_dim,
        cfg.diffusion.rounding_hidden,
        corpus.vocab.len() as usize,
    );

    eprintln!(
        "training: {} poems, vocab {}, {} batches of up to {}x{block_len}, {} iterations",
        corpus.poems.len(),
        corpus.vocab.len(),
        batches.len(),
        cfg.diffusion.batch_size,
        cfg.diffusion.iterations
    );
    let stats = train(
        &mut denoiser,
        &mut table,
        &mut rounding,
        &batches,
        &schedule,
        &cfg.train_config(),
    )?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let bundle = ModelBundle {
        language: cfg.language,
        vocab: corpus.vocab,
        schedule,
        table,
        rounding,
        rounding_hidden: cfg.diffusion.rounding_hidden,
        denoiser,
        controller: None,
        train_meta: TrainMeta {
            iterations: cfg.diffusion.iterations,
            seed: cfg.seed,
            semantic_loss_avg: stats.semantic_loss_avg,
            initial_avg: stats.initial_avg,
            final_avg: stats.final_avg,
        },
    };
    let ckpt = cfg.checkpoint_dir();
    bundle.save(&ckpt)?;
    write_train_log(&cfg.out_dir.join("training_log.csv"), &stats)?;
    eprintln!(
        "checkpoint written to {} (loss avg {:.3} -> {:.3})",
        ckpt.display(),
        stats.initial_avg,
        stats.final_avg
    );
    println!("{}", ckpt.display());
    Ok(())
}

pub fn cmd_train_controller(config_path: &Path) -> CmdResult {
    let cfg = RunConfig::load(config_path).map_err(CliError::Usage)?;
    let ckpt = cfg.checkpoint_dir();
    let mut bundle = ModelBundle::load(&ckpt)
        .map_err(|e| runtime(format!("missing or unreadable diffusion checkpoint: {e}")))?;
    if bundle.language != cfg.language {
        return Err(CliError::Usage(format!(
            "checkpoint language {} does not match config {}",
            bundle.language, cfg.language
        )));
    }
    let poems = load_corpus_frozen(&cfg.corpus, cfg.language, &bundle.vocab)?;
    let lexicon = load_rhyme_lexicon(&cfg.lexicon, cfg.r_size())?;
    let ccfg = cfg.controller_config();
    let mut init_rng = seeded_rng(ccfg.seed);
    let mut controller = ControllerModel::new(
        &mut init_rng,
        cfg.language,
        bundle.table.dim(),
        ccfg.hidden,
        cfg.r_size(),
    );
    let stats = versecraft::controller::train_controller(
        &mut controller,
        &poems,
        &lexicon,
        &bundle.vocab,
        &bundle.table,
        &bundle.schedule,
        &ccfg,
    )?;

    // accuracy summary on held-out poems (falls back to the training set)
    let eval_poems = match &cfg.heldout {
        Some(path) => load_corpus_frozen(path, cfg.language, &bundle.vocab)?,
        None => poems.clone(),
    };
    let mut acc_rng = seeded_rng(ccfg.seed.wrapping_add(99));
    let t_probe = (bundle.schedule.t_max / 20).max(1);
    let fmt_acc = versecraft::controller::format_accuracy(
        &controller,
        &eval_poems,
        &lexicon,
        &bundle.vocab,
        &bundle.table,
        &bundle.schedule,
        t_probe,
        &mut acc_rng,
    )?;
    let rhyme_acc = versecraft::controller::rhyme_accuracy(
        &controller,
        &eval_poems,
        &lexicon,
        &bundle.vocab,
        &bundle.table,
        &bundle.schedule,
        t_probe,
        &mut acc_rng,
    )?;
    eprintln!(
        "controller trained: format acc {:.3}, rhyme acc {:.3} at t={t_probe} on {} held-out poems",
        fmt_acc,
        rhyme_acc,
        eval_poems.len()
    );

    let mut log = std::fs::File::create(cfg.out_dir.join("controller_log.csv"))?;
    writeln!(log, "step,loss")?;
    for (step, loss) in &stats.log {
        writeln!(log, "{step},{loss}")?;
    }
    bundle.save_controller(&ckpt, controller)?;
    println!("{}", ckpt.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GeneratedRecord {
    text: String,
    language: Language,
    seed: u64,
    chain: u64,
    degenerate: bool,
}

pub struct GenerateArgs {
    pub spec: PathBuf,
    pub count: usize,
    pub unguided: bool,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
    pub references: Option<PathBuf>,
}

pub fn cmd_generate(config_path: &Path, args: &GenerateArgs) -> CmdResult {
    let cfg = RunConfig::load(config_path).map_err(CliError::Usage)?;
    let bundle = ModelBundle::load(&cfg.checkpoint_dir())
        .map_err(|e| runtime(format!("cannot load checkpoint: {e}")))?;
    let template = FormatTemplate::load(&args.spec)
        .map_err(|e| CliError::Usage(format!("bad spec file: {e}")))?;
    if template.language != cfg.language {
        return Err(CliError::Usage(format!(
            "spec language {} does not match config {}",
            template.language, cfg.language
        )));
    }
    match &template.vocab_hash {
        None => {
            return Err(CliError::Usage(
                "spec file lacks vocab_hash; regenerate it against this checkpoint".into(),
            ))
        }
        Some(h) if *h != bundle.vocab.hash() => {
            return Err(runtime("spec vocab_hash does not match the checkpoint"))
        }
        Some(_) => {}
    }
    if !args.unguided && bundle.controller.is_none() {
        return Err(runtime(
            "checkpoint has no controller; train one or pass --unguided",
        ));
    }

    let mut gcfg = cfg.guidance_config();
    if args.trace_dir.is_some() {
        gcfg.log_trajectory = true;
    }
    let mut models = bundle.models();
    if args.unguided {
        models.controller = None;
    }
    let base_seed = args.seed.unwrap_or(cfg.seed);
    let k = cfg.diffusion.rescaled_steps;

    let lexicon = load_rhyme_lexicon(&cfg.lexicon, cfg.r_size())?;
    let reference_db = match &args.references {
        Some(path) => {
            let refs = load_corpus_frozen(path, cfg.language, &bundle.vocab)?;
            Some(ReferenceDb::new(&refs, 4)?)
        }
        None => None,
    };
    if let Some(dir) = &args.trace_dir {
        std::fs::create_dir_all(dir)?;
    }

    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("poems.jsonl"));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::fs::File::create(&out_path)?;
    for chain in 0..args.count as u64 {
        let mut rng = chain_rng(base_seed, chain);
        let (decoded, trace) = generate(&models, &template, k, &gcfg, &mut rng)?;
        let record = GeneratedRecord {
            text: detokenize(&decoded.poem, &bundle.vocab),
            language: cfg.language,
            seed: base_seed,
            chain,
            degenerate: decoded.degenerate,
        };
        writeln!(out, "{}", serde_json::to_string(&record).map_err(|e| runtime(e.to_string()))?)?;
        if let Some(dir) = &args.trace_dir {
            let ctx = TraceScoreContext {
                template: &template,
                lexicon: &lexicon,
                vocab: &bundle.vocab,
                reference_db: reference_db.as_ref(),
            };
            let rows = trace_scores(&trace, &ctx);
            std::fs::write(dir.join(format!("trace_{chain:03}.csv")), trace_csv(&rows))?;
        }
    }
    eprintln!("wrote {} poems to {}", args.count, out_path.display());
    println!("{}", out_path.display());
    Ok(())
}

pub struct EvaluateArgs {
    pub poems: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub components: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct ComponentsFile {
    language: Language,
    bleu: Option<f64>,
    rouge: Option<f64>,
    distinct: Option<f64>,
    ppl: Option<f64>,
    format: Option<f64>,
    tone: Option<f64>,
    rhyme: Option<f64>,
}

fn load_generated(path: &Path, language: Language, vocab: &mut Vocab) -> Result<Vec<Poem>, CliError> {
    // generated files carry extra fields; accept plain corpora too
    let text = std::fs::read_to_string(path)?;
    let mut texts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let t = value
            .get("text")
            .and_then(|v| v.as_str())
            .ok_or_else(|| runtime(format!("{}:{}: missing text field", path.display(), i + 1)))?;
        texts.push(t.to_string());
    }
    if texts.is_empty() {
        return Err(runtime(format!("empty poems file: {}", path.display())));
    }
    let dir = std::env::temp_dir().join(format!("versecraft-eval-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let tmp = dir.join("poems.jsonl");
    let mut f = std::fs::File::create(&tmp)?;
    for t in &texts {
        writeln!(
            f,
            "{}",
            serde_json::json!({"text": t, "language": language})
        )?;
    }
    drop(f);
    let poems = load_corpus_extend(&tmp, language, vocab)?;
    std::fs::remove_dir_all(&dir).ok();
    Ok(poems)
}

fn load_templates(path: &Path) -> Result<Vec<FormatTemplate>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut templates = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: FormatTemplate = serde_json::from_str(line)
            .map_err(|e| runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
        templates.push(t);
    }
    Ok(templates)
}

pub fn cmd_evaluate(config_path: &Path, args: &EvaluateArgs) -> CmdResult {
    let cfg = RunConfig::load(config_path).map_err(CliError::Usage)?;

    let report = if let Some(components_path) = &args.components {
        let text = std::fs::read_to_string(components_path)?;
        let c: ComponentsFile =
            serde_json::from_str(&text).map_err(|e| runtime(format!("bad components file: {e}")))?;
        let components = Components {
            bleu: c.bleu,
            rouge: c.rouge,
            distinct: c.distinct,
            ppl: c.ppl,
            format: c.format,
            tone: c.tone,
            rhyme: c.rhyme,
        };
        ScoreReport::from_components(c.language, &components, 0)
            .map_err(|e| runtime(e.to_string()))?
    } else {
        let poems_path = args
            .poems
            .as_ref()
            .ok_or_else(|| CliError::Usage("evaluate needs --poems (or --components)".into()))?;
        let refs_path = args.references.clone().or_else(|| cfg.heldout.clone());
        let refs_path = refs_path.ok_or_else(|| {
            CliError::Usage("evaluate needs --references (or heldout in the config)".into())
        })?;
        let mut vocab = Vocab::new();
        let refs = load_corpus_extend(&refs_path, cfg.language, &mut vocab)?;
        let poems = load_generated(poems_path, cfg.language, &mut vocab)?;
        let lexicon = load_rhyme_lexicon(&cfg.lexicon, cfg.r_size())?;

        let db = ReferenceDb::new(&refs, 4)?;
        let candidate_lines: Vec<Vec<u32>> = poems
            .iter()
            .flat_map(versecraft::metrics::content_lines)
            .collect();
        let bleu_score = bleu(&candidate_lines, &db, 4)?;
        let rouge_score = rouge_l(&candidate_lines, &db)?;
        let distinct_score = distinct(&poems, 2);
        let lm = BigramLm::train(&refs);
        let ppl = ngram_ppl(&poems, &lm);

        let templates = match &args.templates {
            Some(path) => Some(load_templates(path)?),
            None => None,
        };
        let (format, tone, rhyme) = match cfg.language {
            Language::Sonnet => {
                let format = mean(poems.iter().map(format_score_sonnet));
                let rhyme = mean(
                    poems
                        .iter()
                        .map(|p| rhyme_score_sonnet(p, &lexicon, &vocab).score),
                );
                (format, None, rhyme)
            }
            Language::SongCi => {
                let templates = match templates {
                    Some(t) => t,
                    None => {
                        // fall back to reference poems as the originals
                        refs.iter()
                            .map(|p| build_format_template(p, &lexicon, &vocab))
                            .collect()
                    }
                };
                if templates.is_empty() {
                    return Err(runtime("no reference templates for songci scoring"));
                }
                let pick = |i: usize| &templates[i % templates.len()];
                let format = mean(
                    poems
                        .iter()
                        .enumerate()
                        .map(|(i, p)| format_score_template(p, pick(i)).unwrap_or(0.0)),
                );
                let tone = mean(poems.iter().enumerate().map(|(i, p)| {
                    tone_score(p, pick(i), &lexicon, &vocab).unwrap_or(0.0)
                }));
                let rhyme = mean(poems.iter().enumerate().map(|(i, p)| {
                    rhyme_score_songci(p, pick(i), &lexicon, &vocab).score
                }));
                (format, Some(tone), rhyme)
            }
        };
        let components = Components {
            bleu: Some(bleu_score),
            rouge: Some(rouge_score),
            distinct: Some(distinct_score),
            ppl: Some(ppl),
            format: Some(format),
            tone,
            rhyme: Some(rhyme),
        };
        let overall = overall_score(cfg.language, &components).map_err(|e| runtime(e.to_string()))?;
        ScoreReport {
            language: cfg.language,
            bleu: bleu_score,
            rouge: rouge_score,
            distinct: distinct_score,
            ppl,
            format,
            tone,
            rhyme,
            overall,
            poems: poems.len(),
        }
    };

    let json = serde_json::to_string_pretty(&report).map_err(|e| runtime(e.to_string()))?;
    println!("{json}");
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, format!("{json}\n"))?;
    }
    if let Some(traces) = &args.traces {
        let out = args
            .out
            .as_ref()
            .and_then(|o| o.parent().map(Path::to_path_buf))
            .unwrap_or_else(|| cfg.out_dir.clone());
        std::fs::create_dir_all(&out)?;
        aggregate_traces(traces, &out.join("step_scores.csv"))?;
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Average per-step rows across every trace CSV in a directory.
fn aggregate_traces(dir: &Path, out_path: &Path) -> Result<(), CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(runtime(format!("no trace CSVs in {}", dir.display())));
    }
    // step -> (count, sums for l_m, format, rhyme, bleu count, bleu sum, t)
    let mut acc: Vec<(usize, usize, f64, f64, f64, usize, f64)> = Vec::new();
    for file in &files {
        let text = std::fs::read_to_string(file)?;
        for (i, line) in text.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(runtime(format!("{}:{}: bad trace row", file.display(), i + 1)));
            }
            let step: usize = cols[0].parse().map_err(|_| runtime("bad step"))?;
            let t: usize = cols[1].parse().map_err(|_| runtime("bad t"))?;
            let l_m: f64 = cols[2].parse().unwrap_or(f64::NAN);
            let fmt: f64 = cols[3].parse().map_err(|_| runtime("bad format"))?;
            let rhyme: f64 = cols[4].parse().map_err(|_| runtime("bad rhyme"))?;
            let bleu: f64 = cols[5].parse().unwrap_or(f64::NAN);
            if acc.len() <= step {
                acc.resize(step + 1, (0, 0, 0.0, 0.0, 0.0, 0, 0.0));
            }
            let e = &mut acc[step];
            e.0 = t;
            e.1 += 1;
            if l_m.is_finite() {
                e.2 += l_m;
            }
            e.3 += fmt;
            e.4 += rhyme;
            if bleu.is_finite() {
                e.5 += 1;
                e.6 += bleu;
            }
        }
    }
    let mut f = std::fs::File::create(out_path)?;
    writeln!(f, "step,t,l_m,format_score,rhyme_score,bleu_proxy")?;
    for (step, e) in acc.iter().enumerate() {
        if e.1 == 0 {
            continue;
        }
        let n = e.1 as f64;
        let bleu = if e.5 > 0 { e.6 / e.5 as f64 } else { f64::NAN };
        writeln!(
            f,
            "{},{},{},{},{},{}",
            step,
            e.0,
            e.2 / n,
            e.3 / n,
            e.4 / n,
            bleu
        )?;
    }
    eprintln!("wrote {}", out_path.display());
    Ok(())
}

pub struct FixtureArgs {
    pub out: PathBuf,
    pub language: Language,
    pub poems: usize,
    pub heldout: usize,
    pub templates: usize,
    pub seed: u64,
}

/// Write a synthetic corpus plus a ready-to-run config pointing at it.
pub fn cmd_make_fixture(args: &FixtureArgs) -> CmdResult {
    use versecraft::fixture::{
        write_songci_fixture, write_sonnet_fixture, SonnetFixtureConfig, SongCiFixtureConfig,
    };
    let (r_size, lambda) = match args.language {
        Language::Sonnet => {
            let cfg = SonnetFixtureConfig {
                n_poems: args.poems,
                n_heldout: args.heldout,
                seed: args.seed,
                ..SonnetFixtureConfig::default()
            };
            write_sonnet_fixture(&args.out, &cfg, args.templates)?;
            (cfg.r_size, [150.0, 0.0, 100.0])
        }
        Language::SongCi => {
            let cfg = SongCiFixtureConfig {
                n_poems: args.poems,
                n_heldout: args.heldout,
                seed: args.seed,
                ..SongCiFixtureConfig::default()
            };
            write_songci_fixture(&args.out, &cfg, args.templates)?;
            (cfg.r_size, [150.0, 50.0, 100.0])
        }
    };
    let mut cfg = RunConfig::default();
    cfg.language = args.language;
    cfg.corpus = args.out.join("train.jsonl");
    cfg.heldout = Some(args.out.join("heldout.jsonl"));
    cfg.lexicon = args.out.join("lexicon.tsv");
    cfg.out_dir = args.out.join("run");
    cfg.r_size = Some(r_size);
    cfg.diffusion.t_max = 200;
    cfg.diffusion.rescaled_steps = 50;
    cfg.guidance.lambda = Some(lambda);
    let cfg_path = args.out.join("fixture.toml");
    std::fs::write(&cfg_path, cfg.to_toml())?;
    eprintln!(
        "fixture written to {}; config at {}",
        args.out.display(),
        cfg_path.display()
    );
    println!("{}", cfg_path.display());
    Ok(())
}
