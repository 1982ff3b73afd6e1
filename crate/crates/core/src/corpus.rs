//! Corpus ingestion: vocabularies, poems, pronunciation lexicons, format
//! templates and training-batch assembly.
//!
//! Corpus files are UTF-8 JSONL with one object per poem:
//! `{"text": "...", "language": "sonnet"|"songci"}`. For sonnets, newlines in
//! `text` mark line ends and become the `⟨eos⟩` token; for songci the
//! punctuation tokens `,` and `.` are the ending signals. Lexicon files are
//! TSV with columns `word`, `rhyme_class_id` and an optional tone symbol in
//! `{+,-,0}`.

use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const COMMA: u32 = 3;
pub const PERIOD: u32 = 4;
pub const MASK: u32 = 5;
pub const RESERVED: u32 = 6;

pub const PAD_TOKEN: &str = "⟨pad⟩";
pub const UNK_TOKEN: &str = "⟨unk⟩";
pub const EOS_TOKEN: &str = "⟨eos⟩";
pub const MASK_TOKEN: &str = "m";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Sonnet,
    #[serde(rename = "songci")]
    SongCi,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Language::Sonnet => write!(f, "sonnet"),
            Language::SongCi => write!(f, "songci"),
        }
    }
}

/// Token ids that end a line/sentence for the given language.
pub fn ending_signals(language: Language) -> &'static [u32] {
    match language {
        Language::Sonnet => &[EOS],
        Language::SongCi => &[COMMA, PERIOD],
    }
}

pub fn is_ending_signal(id: u32, language: Language) -> bool {
    ending_signals(language).contains(&id)
}

/// Bidirectional token ↔ id map with fixed reserved entries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        let reserved = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN, ",", ".", MASK_TOKEN];
        let id_to_token: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        let mut v = Vocab::new();
        let reserved = v.len() as usize;
        if tokens.len() < reserved || tokens[..reserved] != v.id_to_token[..] {
            return Err(Error::Corpus(
                "token list does not start with the reserved entries".into(),
            ));
        }
        for t in &tokens[reserved..] {
            v.intern(t);
        }
        if v.len() as usize != tokens.len() {
            return Err(Error::Corpus("duplicate tokens in vocabulary list".into()));
        }
        Ok(v)
    }

    /// Insert if absent; returns the id either way.
    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn len(&self) -> u32 {
        self.id_to_token.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Hex digest over the ordered token list; stored in checkpoints and
    /// template files so mismatched artifacts are rejected before sampling.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for t in &self.id_to_token {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

/// A poem as a token-id sequence with line structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Poem {
    pub tokens: Vec<u32>,
    /// Half-open `[start, end)` spans tiling the token sequence.
    pub line_spans: Vec<(usize, usize)>,
    pub language: Language,
    pub raw_text: String,
}

impl Poem {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of completed lines: spans whose final token is an ending signal.
    pub fn line_count(&self) -> usize {
        self.line_spans
            .iter()
            .filter(|&&(s, e)| e > s && is_ending_signal(self.tokens[e - 1], self.language))
            .count()
    }

    /// Index of the last non-signal token in a span, if any.
    pub fn line_final_word(&self, span: (usize, usize)) -> Option<usize> {
        (span.0..span.1)
            .rev()
            .find(|&i| !is_ending_signal(self.tokens[i], self.language))
    }

    /// Rebuild a poem from raw tokens, splitting spans after each ending
    /// signal. A trailing unterminated segment forms a final span. Returns
    /// the poem and whether it is degenerate (no ending signal at all).
    pub fn from_tokens(tokens: Vec<u32>, language: Language, vocab: &Vocab) -> (Poem, bool) {
        let mut spans = Vec::new();
        let mut start = 0;
        for (i, &t) in tokens.iter().enumerate() {
            if is_ending_signal(t, language) {
                spans.push((start, i + 1));
                start = i + 1;
            }
        }
        let degenerate = spans.is_empty();
        if start < tokens.len() || spans.is_empty() {
            spans.push((start, tokens.len()));
        }
        let mut poem = Poem {
            tokens,
            line_spans: spans,
            language,
            raw_text: String::new(),
        };
        poem.raw_text = detokenize(&poem, vocab);
        (poem, degenerate)
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.tokens.len() < 2 {
            return Err(Error::Corpus("poem shorter than 2 tokens".into()));
        }
        if self.tokens.iter().any(|&t| t >= vocab.len()) {
            return Err(Error::Corpus("token id out of vocabulary range".into()));
        }
        let mut cursor = 0;
        for &(s, e) in &self.line_spans {
            if s != cursor || e <= s {
                return Err(Error::Corpus("line spans do not tile the poem".into()));
            }
            if !is_ending_signal(self.tokens[e - 1], self.language) {
                return Err(Error::Corpus("line span lacks an ending signal".into()));
            }
            cursor = e;
        }
        if cursor != self.tokens.len() {
            return Err(Error::Corpus("line spans do not cover the poem".into()));
        }
        Ok(())
    }
}

/// Render a poem back to its canonical text form. Sonnet line ends become
/// newlines; all other tokens are space-separated.
pub fn detokenize(poem: &Poem, vocab: &Vocab) -> String {
    let mut out = String::new();
    let mut line_start = true;
    for &t in &poem.tokens {
        if poem.language == Language::Sonnet && t == EOS {
            out.push('\n');
            line_start = true;
            continue;
        }
        if !line_start {
            out.push(' ');
        }
        out.push_str(vocab.token(t));
        line_start = false;
    }
    if out.ends_with('\n') {
        out.pop();
    }
    out
}

#[derive(Deserialize)]
struct CorpusRecord {
    text: String,
    language: Language,
}

#[derive(Serialize)]
struct CorpusRecordOut<'a> {
    text: &'a str,
    language: Language,
}

/// A loaded corpus: poems plus the vocabulary they were interned into.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub language: Language,
    pub vocab: Vocab,
    pub poems: Vec<Poem>,
}

/// Load a JSONL corpus, building a fresh vocabulary.
pub fn load_corpus(path: &Path, language: Language) -> Result<Corpus> {
    let mut vocab = Vocab::new();
    let poems = parse_corpus(path, language, &mut vocab, false)?;
    Ok(Corpus {
        language,
        vocab,
        poems,
    })
}

/// Load a JSONL corpus against a frozen vocabulary; unseen words map to UNK.
pub fn load_corpus_frozen(path: &Path, language: Language, vocab: &Vocab) -> Result<Vec<Poem>> {
    let mut v = vocab.clone();
    parse_corpus(path, language, &mut v, true)
}

/// Load a JSONL corpus, interning new words into an existing vocabulary.
pub fn load_corpus_extend(path: &Path, language: Language, vocab: &mut Vocab) -> Result<Vec<Poem>> {
    parse_corpus(path, language, vocab, false)
}

fn parse_corpus(
    path: &Path,
    language: Language,
    vocab: &mut Vocab,
    frozen: bool,
) -> Result<Vec<Poem>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut poems = Vec::new();
    let mut lines_seen = 0usize;
    for (lineno0, line) in reader.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines_seen += 1;
        let record: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, lineno, format!("malformed record: {e}")))?;
        if record.language != language {
            return Err(Error::parse(
                path,
                lineno,
                format!("record language {} does not match {language}", record.language),
            ));
        }
        let poem = tokenize_poem(&record.text, language, vocab, frozen)
            .map_err(|msg| Error::parse(path, lineno, msg))?;
        poems.push(poem);
    }
    if lines_seen == 0 {
        return Err(Error::Corpus(format!(
            "empty corpus file: {}",
            path.display()
        )));
    }
    Ok(poems)
}

fn tokenize_poem(
    text: &str,
    language: Language,
    vocab: &mut Vocab,
    frozen: bool,
) -> std::result::Result<Poem, String> {
    let mut tokens: Vec<u32> = Vec::new();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut start = 0usize;
    let intern = |vocab: &mut Vocab, word: &str| -> u32 {
        if frozen {
            vocab.id(word).unwrap_or(UNK)
        } else {
            vocab.intern(word)
        }
    };
    match language {
        Language::Sonnet => {
            for raw_line in text.split('\n') {
                let words: Vec<&str> = raw_line.split_whitespace().collect();
                if words.is_empty() {
                    continue;
                }
                for w in &words {
                    if *w == EOS_TOKEN {
                        continue; // the line break is authoritative
                    }
                    tokens.push(intern(vocab, w));
                }
                tokens.push(EOS);
                spans.push((start, tokens.len()));
                start = tokens.len();
            }
            if tokens.is_empty() {
                return Err("empty poem".into());
            }
        }
        Language::SongCi => {
            for w in text.split_whitespace() {
                let id = match w {
                    "," => COMMA,
                    "." => PERIOD,
                    _ => intern(vocab, w),
                };
                tokens.push(id);
                if is_ending_signal(id, language) {
                    spans.push((start, tokens.len()));
                    start = tokens.len();
                }
            }
            if tokens.is_empty() {
                return Err("empty poem".into());
            }
            if start != tokens.len() {
                return Err("unterminated line".into());
            }
        }
    }
    if tokens.len() < 2 {
        return Err("poem shorter than 2 tokens".into());
    }
    let poem = Poem {
        tokens,
        line_spans: spans,
        language,
        raw_text: text.to_string(),
    };
    Ok(poem)
}

/// Write poems as a JSONL corpus in the canonical text form.
pub fn save_corpus(path: &Path, poems: &[Poem], vocab: &Vocab) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for poem in poems {
        let text = detokenize(poem, vocab);
        let rec = CorpusRecordOut {
            text: &text,
            language: poem.language,
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

/// Tone categories: level, oblique, or unconstrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tone {
    #[serde(rename = "+")]
    Level,
    #[serde(rename = "-")]
    Oblique,
    #[serde(rename = "0")]
    Free,
}

impl Tone {
    pub fn from_symbol(s: &str) -> Option<Tone> {
        match s {
            "+" => Some(Tone::Level),
            "-" => Some(Tone::Oblique),
            "0" => Some(Tone::Free),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Tone::Level => 0,
            Tone::Oblique => 1,
            Tone::Free => 2,
        }
    }
}

/// Word → rhyme-class and (optionally) tone-class map.
#[derive(Clone, Debug)]
pub struct RhymeLexicon {
    rhyme_class: HashMap<String, u32>,
    tone_class: HashMap<String, Tone>,
    /// Size of the rhyme category space; valid class ids are `0..r_size`.
    pub r_size: u32,
    pub has_tones: bool,
}

impl RhymeLexicon {
    pub fn new(r_size: u32) -> Self {
        RhymeLexicon {
            rhyme_class: HashMap::new(),
            tone_class: HashMap::new(),
            r_size,
            has_tones: false,
        }
    }

    /// Class id reserved for words absent from the lexicon (one past the
    /// space); such positions are excluded from rhyme losses and scores.
    pub fn unk_class(&self) -> u32 {
        self.r_size
    }

    pub fn class_of(&self, word: &str) -> u32 {
        self.rhyme_class
            .get(word)
            .copied()
            .unwrap_or(self.r_size)
    }

    pub fn known(&self, word: &str) -> bool {
        self.rhyme_class.contains_key(word)
    }

    pub fn tone_of(&self, word: &str) -> Option<Tone> {
        self.tone_class.get(word).copied()
    }

    pub fn insert(&mut self, word: &str, class: u32, tone: Option<Tone>) -> Result<()> {
        if class >= self.r_size {
            return Err(Error::Corpus(format!(
                "rhyme class {class} out of range for R={}",
                self.r_size
            )));
        }
        if let Some(&prev) = self.rhyme_class.get(word) {
            if prev != class {
                return Err(Error::Corpus(format!(
                    "duplicate word {word:?} with conflicting classes {prev} and {class}"
                )));
            }
        }
        self.rhyme_class.insert(word.to_string(), class);
        if let Some(t) = tone {
            self.tone_class.insert(word.to_string(), t);
            self.has_tones = true;
        }
        Ok(())
    }

    pub fn distinct_classes(&self) -> usize {
        let mut seen: Vec<u32> = self.rhyme_class.values().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// Load a TSV lexicon: `word<TAB>class_id[<TAB>tone]`.
pub fn load_rhyme_lexicon(path: &Path, r_size: u32) -> Result<RhymeLexicon> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lex = RhymeLexicon::new(r_size);
    for (lineno0, line) in reader.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 {
            return Err(Error::parse(path, lineno, "expected word<TAB>class_id"));
        }
        let class: u32 = cols[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad class id {:?}", cols[1])))?;
        if class >= r_size {
            return Err(Error::parse(
                path,
                lineno,
                format!("class out of range: {class} >= R={r_size}"),
            ));
        }
        let tone = if cols.len() >= 3 && !cols[2].trim().is_empty() {
            Some(Tone::from_symbol(cols[2].trim()).ok_or_else(|| {
                Error::parse(path, lineno, format!("bad tone symbol {:?}", cols[2]))
            })?)
        } else {
            None
        };
        lex.insert(cols[0].trim(), class, tone)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
    }
    Ok(lex)
}

/// Per-position template symbols: mask or one of the ending signals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Symbol {
    #[serde(rename = "m")]
    Mask,
    #[serde(rename = "⟨eos⟩")]
    Eos,
    #[serde(rename = ",")]
    Comma,
    #[serde(rename = ".")]
    Period,
}

impl Symbol {
    pub fn is_ending(self) -> bool {
        self != Symbol::Mask
    }

    pub fn token_id(self) -> u32 {
        match self {
            Symbol::Mask => MASK,
            Symbol::Eos => EOS,
            Symbol::Comma => COMMA,
            Symbol::Period => PERIOD,
        }
    }

    pub fn from_token_id(id: u32) -> Symbol {
        match id {
            EOS => Symbol::Eos,
            COMMA => Symbol::Comma,
            PERIOD => Symbol::Period,
            _ => Symbol::Mask,
        }
    }

    /// The symbol classes a format head distinguishes for a language.
    pub fn set_for(language: Language) -> &'static [Symbol] {
        match language {
            Language::Sonnet => &[Symbol::Mask, Symbol::Eos],
            Language::SongCi => &[Symbol::Mask, Symbol::Comma, Symbol::Period],
        }
    }

    pub fn class_index(self, language: Language) -> Option<usize> {
        Symbol::set_for(language).iter().position(|&s| s == self)
    }
}

/// The target layout for one generation request: per-position symbols plus
/// rhyme labels at line-final word positions and, for songci, tone labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FormatTemplate {
    pub language: Language,
    pub symbols: Vec<Symbol>,
    /// `(position, rhyme class)` pairs, one per line, at the index of the
    /// line's last non-signal word. A class equal to the lexicon's UNK class
    /// marks an unconstrained position.
    pub rhyme_positions: Vec<(usize, u32)>,
    pub tone_labels: Option<Vec<Tone>>,
    /// Rhyme-space size the labels were drawn from.
    pub r_size: u32,
    /// Digest of the vocabulary this template was prepared against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_hash: Option<String>,
}

impl FormatTemplate {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.symbols.is_empty() {
            return Err(Error::Corpus("empty template".into()));
        }
        for &(pos, class) in &self.rhyme_positions {
            if pos >= self.symbols.len() {
                return Err(Error::Corpus(format!(
                    "rhyme position {pos} beyond template length {}",
                    self.symbols.len()
                )));
            }
            if class > self.r_size {
                return Err(Error::Corpus(format!(
                    "rhyme label {class} beyond R={}",
                    self.r_size
                )));
            }
        }
        if let Some(tones) = &self.tone_labels {
            if tones.len() != self.symbols.len() {
                return Err(Error::Corpus("tone labels length mismatch".into()));
            }
        }
        for mismatch in self.symbols.iter().filter(|s| {
            !Symbol::set_for(self.language).contains(s) && s.is_ending()
        }) {
            return Err(Error::Corpus(format!(
                "symbol {mismatch:?} not valid for {}",
                self.language
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{}", serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FormatTemplate> {
        let data = std::fs::read_to_string(path)?;
        let t: FormatTemplate = serde_json::from_str(&data)
            .map_err(|e| Error::parse(path, 1, format!("bad template: {e}")))?;
        t.validate()?;
        Ok(t)
    }
}

/// Derive the format template of an existing poem: ending signals stay,
/// everything else becomes the mask symbol; rhyme labels come from the
/// lexicon at each line's final word; tone labels are filled for songci.
pub fn build_format_template(
    poem: &Poem,
    lexicon: &RhymeLexicon,
    vocab: &Vocab,
) -> FormatTemplate {
    let symbols: Vec<Symbol> = poem
        .tokens
        .iter()
        .map(|&t| {
            if is_ending_signal(t, poem.language) {
                Symbol::from_token_id(t)
            } else {
                Symbol::Mask
            }
        })
        .collect();
    let mut rhyme_positions = Vec::new();
    for &span in &poem.line_spans {
        if let Some(pos) = poem.line_final_word(span) {
            let word = vocab.token(poem.tokens[pos]);
            rhyme_positions.push((pos, lexicon.class_of(word)));
        }
    }
    let tone_labels = if poem.language == Language::SongCi {
        Some(
            poem.tokens
                .iter()
                .map(|&t| {
                    if is_ending_signal(t, poem.language) {
                        Tone::Free
                    } else {
                        lexicon.tone_of(vocab.token(t)).unwrap_or(Tone::Free)
                    }
                })
                .collect(),
        )
    } else {
        None
    };
    FormatTemplate {
        language: poem.language,
        symbols,
        rhyme_positions,
        tone_labels,
        r_size: lexicon.r_size,
        vocab_hash: Some(vocab.hash()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One poem per row, PAD-filled to `block_len`.
    Pad,
    /// Concatenate the whole token stream and cut consecutive windows,
    /// dropping the final partial window.
    ConcatChunk,
}

/// Assemble training batches of token ids, each `rows × block_len` with
/// `rows ≤ batch_size` (the final batch may be smaller).
pub fn make_batches(
    poems: &[Poem],
    mode: BatchMode,
    block_len: usize,
    batch_size: usize,
) -> Result<Vec<Array2<u32>>> {
    if block_len == 0 || batch_size == 0 {
        return Err(Error::Config("block_len and batch_size must be positive".into()));
    }
    let rows: Vec<Vec<u32>> = match mode {
        BatchMode::Pad => {
            let mut rows = Vec::with_capacity(poems.len());
            for (i, poem) in poems.iter().enumerate() {
                if poem.tokens.len() > block_len {
                    return Err(Error::Corpus(format!(
                        "poem {i} has {} tokens, over block_len {block_len} (pad mode)",
                        poem.tokens.len()
                    )));
                }
                let mut row = poem.tokens.clone();
                row.resize(block_len, PAD);
                rows.push(row);
            }
            rows
        }
        BatchMode::ConcatChunk => {
            let stream: Vec<u32> = poems.iter().flat_map(|p| p.tokens.iter().copied()).collect();
            stream
                .chunks_exact(block_len)
                .map(|c| c.to_vec())
                .collect()
        }
    };
    let mut batches = Vec::new();
    for group in rows.chunks(batch_size) {
        let mut m = Array2::zeros((group.len(), block_len));
        for (i, row) in group.iter().enumerate() {
            for (j, &t) in row.iter().enumerate() {
                m[(i, j)] = t;
            }
        }
        batches.push(m);
    }
    Ok(batches)
}
