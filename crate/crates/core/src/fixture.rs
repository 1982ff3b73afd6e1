//! Synthetic desk-scale corpora with ground truth known by construction:
//! exact line counts, scheme-conforming rhyme classes, and (for songci)
//! deterministic tone assignments. Tests and demos train on these.

use crate::corpus::{
    load_corpus_frozen, save_corpus, Corpus, FormatTemplate, Language, Poem, RhymeLexicon,
    Symbol, Tone, Vocab,
};
use crate::{Error, Result, SeedRng};
use rand::{Rng, SeedableRng};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct SonnetFixtureConfig {
    pub n_poems: usize,
    pub n_heldout: usize,
    pub lines: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Rhyme-space size; every content word belongs to class (index mod r).
    pub r_size: u32,
    pub content_words: usize,
    /// Letter pattern the line-final rhyme classes realize, e.g. "ABAB".
    pub scheme: String,
    pub seed: u64,
}

impl Default for SonnetFixtureConfig {
    fn default() -> Self {
        SonnetFixtureConfig {
            n_poems: 500,
            n_heldout: 50,
            lines: 4,
            min_words: 4,
            max_words: 7,
            r_size: 8,
            content_words: 120,
            scheme: "ABAB".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SongCiFixtureConfig {
    pub n_poems: usize,
    pub n_heldout: usize,
    pub lines: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub r_size: u32,
    pub content_words: usize,
    pub seed: u64,
}

impl Default for SongCiFixtureConfig {
    fn default() -> Self {
        SongCiFixtureConfig {
            n_poems: 120,
            n_heldout: 20,
            lines: 4,
            min_words: 3,
            max_words: 6,
            r_size: 17,
            content_words: 60,
            seed: 0,
        }
    }
}

/// A generated fixture: training corpus (with its vocab), held-out poems
/// parsed against the same vocab, and the total lexicon.
pub struct Fixture {
    pub corpus: Corpus,
    pub heldout: Vec<Poem>,
    pub lexicon: RhymeLexicon,
}

fn word_name(language: Language, i: usize) -> String {
    match language {
        Language::Sonnet => format!("w{i:03}"),
        Language::SongCi => format!("z{i:02}"),
    }
}

fn class_of_word(i: usize, r: u32) -> u32 {
    (i as u32) % r
}

fn tone_of_word(i: usize) -> Tone {
    match i % 3 {
        0 => Tone::Level,
        1 => Tone::Oblique,
        _ => Tone::Free,
    }
}

/// Words of a rhyme class, as indices into the content-word list.
fn class_pool(class: u32, content_words: usize, r: u32) -> Vec<usize> {
    (0..content_words)
        .filter(|&i| class_of_word(i, r) == class)
        .collect()
}

fn build_lexicon(language: Language, content_words: usize, r: u32) -> RhymeLexicon {
    let mut lex = RhymeLexicon::new(r);
    for i in 0..content_words {
        let tone = (language == Language::SongCi).then(|| tone_of_word(i));
        lex.insert(&word_name(language, i), class_of_word(i, r), tone)
            .expect("class < r by construction");
    }
    lex
}

/// Assign a distinct rhyme class to each distinct scheme letter.
fn assign_classes(rng: &mut SeedRng, scheme: &str, r: u32) -> Result<Vec<u32>> {
    let mut letters: Vec<char> = Vec::new();
    for c in scheme.chars() {
        if !c.is_ascii_uppercase() {
            return Err(Error::Config(format!("bad scheme letter {c:?}")));
        }
        if !letters.contains(&c) {
            letters.push(c);
        }
    }
    if letters.len() > r as usize {
        return Err(Error::Config(format!(
            "scheme needs {} classes but R={r}",
            letters.len()
        )));
    }
    // partial Fisher-Yates over 0..r
    let mut classes: Vec<u32> = (0..r).collect();
    for i in 0..letters.len() {
        let j = rng.random_range(i..classes.len());
        classes.swap(i, j);
    }
    let map: Vec<u32> = classes[..letters.len()].to_vec();
    Ok(scheme
        .chars()
        .map(|c| map[letters.iter().position(|&l| l == c).unwrap()])
        .collect())
}

fn sonnet_poem_text(rng: &mut SeedRng, cfg: &SonnetFixtureConfig) -> Result<String> {
    let line_classes = assign_classes(rng, &cfg.scheme, cfg.r_size)?;
    let mut lines = Vec::with_capacity(cfg.lines);
    for line_idx in 0..cfg.lines {
        let class = line_classes[line_idx % line_classes.len()];
        let len = rng.random_range(cfg.min_words..=cfg.max_words);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len - 1 {
            let w = rng.random_range(0..cfg.content_words);
            words.push(word_name(Language::Sonnet, w));
        }
        let pool = class_pool(class, cfg.content_words, cfg.r_size);
        let w = pool[rng.random_range(0..pool.len())];
        words.push(word_name(Language::Sonnet, w));
        lines.push(words.join(" "));
    }
    Ok(lines.join("\n"))
}

fn songci_poem_text(rng: &mut SeedRng, cfg: &SongCiFixtureConfig) -> Result<String> {
    // one dominant rhyme class for the whole poem
    let class = rng.random_range(0..cfg.r_size);
    let pool = class_pool(class, cfg.content_words, cfg.r_size);
    if pool.is_empty() {
        return Err(Error::Config("rhyme class with no words".into()));
    }
    let mut tokens: Vec<String> = Vec::new();
    for line_idx in 0..cfg.lines {
        let len = rng.random_range(cfg.min_words..=cfg.max_words);
        for _ in 0..len - 1 {
            let w = rng.random_range(0..cfg.content_words);
            tokens.push(word_name(Language::SongCi, w));
        }
        let w = pool[rng.random_range(0..pool.len())];
        tokens.push(word_name(Language::SongCi, w));
        tokens.push(if line_idx + 1 == cfg.lines { "." } else { "," }.to_string());
    }
    Ok(tokens.join(" "))
}

fn texts_to_fixture(
    train_texts: Vec<String>,
    heldout_texts: Vec<String>,
    language: Language,
    lexicon: RhymeLexicon,
) -> Result<Fixture> {
    // round-trip through temp JSONL so fixtures see exactly the loader path
    let dir = tempdir_in_target()?;
    let train_path = dir.join("train.jsonl");
    write_jsonl(&train_path, &train_texts, language)?;
    let corpus = crate::corpus::load_corpus(&train_path, language)?;
    let heldout_path = dir.join("heldout.jsonl");
    write_jsonl(&heldout_path, &heldout_texts, language)?;
    let heldout = load_corpus_frozen(&heldout_path, language, &corpus.vocab)?;
    std::fs::remove_dir_all(&dir).ok();
    Ok(Fixture {
        corpus,
        heldout,
        lexicon,
    })
}

fn tempdir_in_target() -> Result<std::path::PathBuf> {
    let base = std::env::temp_dir().join(format!(
        "versecraft-fixture-{}-{:x}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    std::fs::create_dir_all(&base)?;
    Ok(base)
}

fn write_jsonl(path: &Path, texts: &[String], language: Language) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for text in texts {
        writeln!(
            f,
            "{}",
            serde_json::json!({"text": text, "language": language})
        )?;
    }
    Ok(())
}

pub fn sonnet_fixture(cfg: &SonnetFixtureConfig) -> Result<Fixture> {
    let mut rng = SeedRng::seed_from_u64(cfg.seed);
    let train: Vec<String> = (0..cfg.n_poems)
        .map(|_| sonnet_poem_text(&mut rng, cfg))
        .collect::<Result<_>>()?;
    let heldout: Vec<String> = (0..cfg.n_heldout)
        .map(|_| sonnet_poem_text(&mut rng, cfg))
        .collect::<Result<_>>()?;
    let lexicon = build_lexicon(Language::Sonnet, cfg.content_words, cfg.r_size);
    texts_to_fixture(train, heldout, Language::Sonnet, lexicon)
}

pub fn songci_fixture(cfg: &SongCiFixtureConfig) -> Result<Fixture> {
    let mut rng = SeedRng::seed_from_u64(cfg.seed);
    let train: Vec<String> = (0..cfg.n_poems)
        .map(|_| songci_poem_text(&mut rng, cfg))
        .collect::<Result<_>>()?;
    let heldout: Vec<String> = (0..cfg.n_heldout)
        .map(|_| songci_poem_text(&mut rng, cfg))
        .collect::<Result<_>>()?;
    let lexicon = build_lexicon(Language::SongCi, cfg.content_words, cfg.r_size);
    texts_to_fixture(train, heldout, Language::SongCi, lexicon)
}

/// Synthesize a generation request in the fixture's distribution: random
/// line lengths and a fresh scheme-conforming class assignment.
pub fn synthesize_sonnet_template(
    cfg: &SonnetFixtureConfig,
    vocab_hash: Option<String>,
    rng: &mut SeedRng,
) -> Result<FormatTemplate> {
    let line_classes = assign_classes(rng, &cfg.scheme, cfg.r_size)?;
    let mut symbols = Vec::new();
    let mut rhyme_positions = Vec::new();
    for line_idx in 0..cfg.lines {
        let len = rng.random_range(cfg.min_words..=cfg.max_words);
        for _ in 0..len {
            symbols.push(Symbol::Mask);
        }
        rhyme_positions.push((
            symbols.len() - 1,
            line_classes[line_idx % line_classes.len()],
        ));
        symbols.push(Symbol::Eos);
    }
    let t = FormatTemplate {
        language: Language::Sonnet,
        symbols,
        rhyme_positions,
        tone_labels: None,
        r_size: cfg.r_size,
        vocab_hash,
    };
    t.validate()?;
    Ok(t)
}

/// Write a fixture to disk: train/heldout corpora, the lexicon TSV, and a
/// handful of synthesized generation templates carrying the train vocab's
/// hash.
pub fn write_sonnet_fixture(dir: &Path, cfg: &SonnetFixtureConfig, n_templates: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let fixture = sonnet_fixture(cfg)?;
    save_corpus(&dir.join("train.jsonl"), &fixture.corpus.poems, &fixture.corpus.vocab)?;
    save_corpus(&dir.join("heldout.jsonl"), &fixture.heldout, &fixture.corpus.vocab)?;
    write_lexicon(&dir.join("lexicon.tsv"), Language::Sonnet, cfg.content_words, cfg.r_size)?;
    let hash = fixture.corpus.vocab.hash();
    let mut rng = SeedRng::seed_from_u64(cfg.seed ^ 0x7e3a_11ce);
    let tdir = dir.join("templates");
    std::fs::create_dir_all(&tdir)?;
    for i in 0..n_templates {
        let t = synthesize_sonnet_template(cfg, Some(hash.clone()), &mut rng)?;
        t.save(&tdir.join(format!("spec_{i:03}.json")))?;
    }
    Ok(())
}

pub fn write_songci_fixture(dir: &Path, cfg: &SongCiFixtureConfig, n_templates: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let fixture = songci_fixture(cfg)?;
    save_corpus(&dir.join("train.jsonl"), &fixture.corpus.poems, &fixture.corpus.vocab)?;
    save_corpus(&dir.join("heldout.jsonl"), &fixture.heldout, &fixture.corpus.vocab)?;
    write_lexicon(&dir.join("lexicon.tsv"), Language::SongCi, cfg.content_words, cfg.r_size)?;
    // songci requests reuse held-out poem layouts (the CiPai role)
    let hash = fixture.corpus.vocab.hash();
    let tdir = dir.join("templates");
    std::fs::create_dir_all(&tdir)?;
    for (i, poem) in fixture.heldout.iter().take(n_templates).enumerate() {
        let mut t =
            crate::corpus::build_format_template(poem, &fixture.lexicon, &fixture.corpus.vocab);
        t.vocab_hash = Some(hash.clone());
        t.save(&tdir.join(format!("spec_{i:03}.json")))?;
    }
    Ok(())
}

fn write_lexicon(path: &Path, language: Language, content_words: usize, r: u32) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for i in 0..content_words {
        let word = word_name(language, i);
        let class = class_of_word(i, r);
        match language {
            Language::Sonnet => writeln!(f, "{word}\t{class}")?,
            Language::SongCi => {
                let tone = match tone_of_word(i) {
                    Tone::Level => "+",
                    Tone::Oblique => "-",
                    Tone::Free => "0",
                };
                writeln!(f, "{word}\t{class}\t{tone}")?;
            }
        }
    }
    Ok(())
}

/// Ground-truth rhyme classes of a fixture (string-keyed, for test oracles).
pub fn fixture_class_of(language: Language, vocab: &Vocab, token: u32, r: u32) -> Option<u32> {
    let name = vocab.token(token);
    let prefix_len = 1;
    name.get(prefix_len..)
        .and_then(|s| s.parse::<usize>().ok())
        .map(|i| class_of_word(i, r))
        .filter(|_| name.starts_with(match language {
            Language::Sonnet => 'w',
            Language::SongCi => 'z',
        }))
}
