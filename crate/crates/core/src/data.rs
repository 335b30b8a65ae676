//! Corpus ingestion, vocabulary, splits, and TBPTT batch windows.
//!
//! Text is split into `B` contiguous lanes; lane `l` covers
//! `[l·⌊N/B⌋, (l+1)·⌊N/B⌋)` and the tail is dropped. Windows advance along
//! each lane so a state carried from one window to the next has seen the
//! text immediately preceding it.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// One token per Unicode scalar of already-preprocessed text.
    PtbChars,
    /// One token per raw byte.
    Enwik8Bytes,
}

impl TokenMode {
    pub fn tokenize(self, bytes: &[u8]) -> Result<Vec<u32>> {
        match self {
            TokenMode::Enwik8Bytes => Ok(bytes.iter().map(|&b| b as u32).collect()),
            TokenMode::PtbChars => std::str::from_utf8(bytes)
                .map(|s| s.chars().map(|c| c as u32).collect())
                .map_err(|e| Error::Data(format!("text is not valid UTF-8: {e}"))),
        }
    }

    pub fn detokenize(self, symbols: &[u32]) -> Vec<u8> {
        match self {
            TokenMode::Enwik8Bytes => symbols.iter().map(|&s| s as u8).collect(),
            TokenMode::PtbChars => symbols
                .iter()
                .map(|&s| char::from_u32(s).unwrap_or(char::REPLACEMENT_CHARACTER))
                .collect::<String>()
                .into_bytes(),
        }
    }
}

/// How a token sequence is cut into train / valid / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitRule {
    /// 5.1M / 400K / 450K
    Ptb,
    /// 90M / 5M / 5M
    Enwik8,
    Sizes {
        train: usize,
        valid: usize,
        test: usize,
    },
    /// Valid and test get `floor(N·fraction)`; train gets the rest.
    Proportional { valid: f64, test: f64 },
}

impl SplitRule {
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        let sizes = match *self {
            SplitRule::Ptb => [5_100_000, 400_000, 450_000],
            SplitRule::Enwik8 => [90_000_000, 5_000_000, 5_000_000],
            SplitRule::Sizes { train, valid, test } => [train, valid, test],
            SplitRule::Proportional { valid, test } => {
                if !(0.0..1.0).contains(&valid) || !(0.0..1.0).contains(&test) || valid + test >= 1.0
                {
                    return Err(Error::Config(format!(
                        "split fractions valid={valid} test={test} must be in [0,1) and sum below 1"
                    )));
                }
                let v = (n as f64 * valid).floor() as usize;
                let t = (n as f64 * test).floor() as usize;
                [n - v - t, v, t]
            }
        };
        let total: usize = sizes.iter().sum();
        if total > n {
            return Err(Error::Data(format!(
                "split sizes {sizes:?} need {total} tokens but the corpus has {n}"
            )));
        }
        Ok(sizes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Symbol ↔ id table. Ids follow ascending symbol value; the unknown id,
/// when reserved, comes last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    pub mode: TokenMode,
    symbols: Vec<u32>,
    unknown: bool,
    index: BTreeMap<u32, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRepr {
    mode: TokenMode,
    symbols: Vec<u32>,
    unknown: bool,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_symbols(r.mode, r.symbols, r.unknown)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            mode: v.mode,
            symbols: v.symbols,
            unknown: v.unknown,
        }
    }
}

impl Vocab {
    pub fn build(mode: TokenMode, symbols: &[u32], unknown: bool) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Empty("vocabulary source"));
        }
        let mut distinct: Vec<u32> = symbols.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        Ok(Self::from_symbols(mode, distinct, unknown))
    }

    pub fn from_symbols(mode: TokenMode, symbols: Vec<u32>, unknown: bool) -> Self {
        let index = symbols.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        Self {
            mode,
            symbols,
            unknown,
            index,
        }
    }

    /// Number of model outputs, including the unknown id if reserved.
    pub fn size(&self) -> usize {
        self.symbols.len() + usize::from(self.unknown)
    }

    pub fn distinct_tokens(&self) -> usize {
        self.symbols.len()
    }

    pub fn unknown_id(&self) -> Option<usize> {
        self.unknown.then_some(self.symbols.len())
    }

    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    pub fn id(&self, symbol: u32) -> Result<usize> {
        match (self.index.get(&symbol), self.unknown_id()) {
            (Some(&i), _) => Ok(i),
            (None, Some(u)) => Ok(u),
            (None, None) => Err(Error::Data(format!(
                "symbol {symbol} is not in the vocabulary and no unknown id is reserved"
            ))),
        }
    }

    pub fn encode(&self, symbols: &[u32]) -> Result<Vec<usize>> {
        symbols.iter().map(|&s| self.id(s)).collect()
    }

    /// Maps the unknown id to U+FFFD (or byte `?` in byte mode).
    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        let unk = match self.mode {
            TokenMode::PtbChars => char::REPLACEMENT_CHARACTER as u32,
            TokenMode::Enwik8Bytes => b'?' as u32,
        };
        let symbols: Vec<u32> = ids
            .iter()
            .map(|&i| self.symbols.get(i).copied().unwrap_or(unk))
            .collect();
        self.mode.detokenize(&symbols)
    }

    /// Id of a single-byte symbol such as the space, if present.
    pub fn byte_id(&self, b: u8) -> Option<usize> {
        self.index.get(&(b as u32)).copied()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    tokens: Vec<usize>,
    splits: [Range<usize>; 3],
}

impl Corpus {
    /// Splits `symbols` by `rule` and builds the vocabulary from the train
    /// split alone.
    pub fn new(mode: TokenMode, symbols: &[u32], rule: SplitRule, unknown: bool) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        let [a, b, c] = rule.sizes(symbols.len())?;
        if a == 0 {
            return Err(Error::Data("train split is empty".into()));
        }
        let vocab = Vocab::build(mode, &symbols[..a], unknown)?;
        Self::with_vocab(vocab, &symbols[..a + b + c], [a, b, c])
    }

    /// Encodes with an existing vocabulary (evaluation of a trained model).
    pub fn with_vocab(vocab: Vocab, symbols: &[u32], sizes: [usize; 3]) -> Result<Self> {
        let tokens = vocab.encode(symbols)?;
        let [a, b, c] = sizes;
        if a + b + c > tokens.len() {
            return Err(Error::Data("split sizes exceed the corpus".into()));
        }
        Ok(Self {
            vocab,
            tokens,
            splits: [0..a, a..a + b, a + b..a + b + c],
        })
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        self.splits[split as usize].clone()
    }

    pub fn tokens(&self, split: Split) -> &[usize] {
        &self.tokens[self.split_range(split)]
    }

    pub fn all_tokens(&self) -> &[usize] {
        &self.tokens
    }
}

pub fn read_symbols(path: &Path, mode: TokenMode) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    mode.tokenize(&bytes)
}

pub fn ingest(path: &Path, mode: TokenMode, rule: SplitRule, unknown: bool) -> Result<Corpus> {
    Corpus::new(mode, &read_symbols(path, mode)?, rule, unknown)
}

/// One TBPTT window, time-major: `inputs[t]` holds the `B` lane tokens at
/// step `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    tokens: &'a [usize],
    batch: usize,
    window: usize,
    lane_len: usize,
}

pub fn batch_windows(tokens: &[usize], batch: usize, window: usize) -> Result<BatchStream<'_>> {
    if batch == 0 || window == 0 {
        return Err(Error::Config("batch size and window length must be positive".into()));
    }
    let need = batch * (window + 1);
    if tokens.len() < need {
        return Err(Error::Data(format!(
            "split has {} tokens; batch {batch} with window {window} needs at least {need}",
            tokens.len()
        )));
    }
    Ok(BatchStream {
        tokens,
        batch,
        window,
        lane_len: tokens.len() / batch,
    })
}

impl<'a> BatchStream<'a> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn len(&self) -> usize {
        (self.lane_len - 1) / self.window
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lane(&self, l: usize) -> &'a [usize] {
        &self.tokens[l * self.lane_len..(l + 1) * self.lane_len]
    }

    pub fn window(&self, w: usize) -> Window {
        let start = w * self.window;
        let step = |off: usize| -> Vec<Vec<usize>> {
            (0..self.window)
                .map(|t| {
                    (0..self.batch)
                        .map(|l| self.tokens[l * self.lane_len + start + t + off])
                        .collect()
                })
                .collect()
        };
        Window {
            inputs: step(0),
            targets: step(1),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.len()).map(|w| self.window(w))
    }
}

/// Seeded word-like text with lower-case words, spaces, commas, periods and
/// paragraph breaks. Paragraphs pick a topic that biases their content
/// words, and sentence subjects agree with their verbs through a suffix,
/// so there is structure at word, sentence and paragraph scale.
pub fn synthetic_text(seed: u64, len: usize) -> String {
    const ONSETS: [&str; 19] = [
        "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st",
        "tr",
    ];
    const NUCLEI: [&str; 7] = ["a", "e", "i", "o", "u", "ai", "ou"];
    const CODAS: [&str; 7] = ["", "", "n", "r", "s", "l", "nd"];
    const FUNCTION: [&str; 12] = [
        "the", "a", "of", "to", "in", "and", "with", "for", "on", "by", "at", "from",
    ];
    const TOPICS: usize = 8;
    const PER_TOPIC: usize = 60;
    const SHARED: usize = 120;

    let mut rng = Rng::new(seed, Purpose::Data);
    let word = |rng: &mut Rng| {
        let syllables = 1 + rng.below(3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.below(ONSETS.len())]);
            w.push_str(NUCLEI[rng.below(NUCLEI.len())]);
            w.push_str(CODAS[rng.below(CODAS.len())]);
        }
        w
    };
    let lexicon = |n: usize, rng: &mut Rng| (0..n).map(|_| word(rng)).collect::<Vec<_>>();
    let nouns: Vec<Vec<String>> = (0..TOPICS).map(|_| lexicon(PER_TOPIC, &mut rng)).collect();
    let verbs: Vec<Vec<String>> = (0..TOPICS).map(|_| lexicon(PER_TOPIC / 2, &mut rng)).collect();
    let shared = lexicon(SHARED, &mut rng);

    // Zipf-like pick from a list: index ⌊n·u³⌋ favours the head.
    let zipf = |rng: &mut Rng, n: usize| ((n as f64) * rng.uniform().powi(3)) as usize;

    let mut out = String::with_capacity(len + 64);
    while out.len() < len {
        let topic = rng.below(TOPICS);
        let sentences = 3 + rng.below(4);
        for s in 0..sentences {
            let plural = rng.bernoulli(0.5);
            let mut parts: Vec<String> = Vec::new();
            let noun = |rng: &mut Rng| {
                if rng.bernoulli(0.8) {
                    nouns[topic][zipf(rng, PER_TOPIC)].clone()
                } else {
                    shared[zipf(rng, SHARED)].clone()
                }
            };
            parts.push(FUNCTION[rng.below(2)].to_string());
            let mut subject = noun(&mut rng);
            if plural {
                subject.push('s');
            }
            parts.push(subject);
            if rng.bernoulli(0.4) {
                parts.push(FUNCTION[2 + rng.below(FUNCTION.len() - 2)].to_string());
                parts.push(noun(&mut rng));
            }
            let mut verb = verbs[topic][zipf(&mut rng, PER_TOPIC / 2)].clone();
            verb.push_str(if plural { "en" } else { "et" });
            parts.push(verb);
            for _ in 0..1 + rng.below(3) {
                if rng.bernoulli(0.2) {
                    parts.push(",".to_string());
                }
                parts.push(FUNCTION[rng.below(FUNCTION.len())].to_string());
                parts.push(noun(&mut rng));
            }
            let mut sentence = parts.join(" ").replace(" ,", ",");
            sentence.push('.');
            if s > 0 {
                out.push(' ');
            }
            out.push_str(&sentence);
        }
        out.push('\n');
    }
    out.truncate(len);
    out
}
