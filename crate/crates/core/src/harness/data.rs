//! Byte-level corpora, train/validation split and the seeded batch order.

use crate::error::{Error, Result};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Vocabulary size of the identity byte mapping.
pub const BYTE_VOCAB: usize = 256;

/// Fraction of the corpus held out (from the end) for validation.
pub const VALID_FRACTION: f64 = 0.05;

/// Maps every byte to its value.
///
/// ```
/// use outlierlab::harness::tokenize_bytes;
/// assert_eq!(tokenize_bytes(b"ab").unwrap(), vec![97, 98]);
/// assert!(tokenize_bytes(b"").is_err());
/// ```
pub fn tokenize_bytes(corpus: &[u8]) -> Result<Vec<usize>> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    Ok(corpus.iter().map(|&b| b as usize).collect())
}

/// Tokenised corpus split into a training prefix and a validation suffix.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

impl Corpus {
    /// Splits off the last 5% for validation. Both parts must hold at least
    /// one window of `seq_len + 1` tokens.
    pub fn from_bytes(bytes: &[u8], seq_len: usize) -> Result<Self> {
        let tokens = tokenize_bytes(bytes)?;
        let need = seq_len + 1;
        if tokens.len() < need {
            return Err(Error::Data(format!(
                "corpus of {} bytes is shorter than seq_len + 1 = {need}",
                tokens.len()
            )));
        }
        let n_valid = ((tokens.len() as f64 * VALID_FRACTION).ceil() as usize).max(need);
        if tokens.len() < n_valid + need {
            return Err(Error::Data(format!(
                "corpus of {} bytes cannot hold a training and a validation window of {need}",
                tokens.len()
            )));
        }
        let split = tokens.len() - n_valid;
        Ok(Self {
            valid: tokens[split..].to_vec(),
            train: tokens[..split].to_vec(),
        })
    }

    pub fn load(path: impl AsRef<Path>, seq_len: usize) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, seq_len)
    }
}

/// Non-overlapping windows of `seq_len` inputs (plus one target token).
pub fn window_count(len: usize, seq_len: usize) -> usize {
    if len == 0 {
        0
    } else {
        (len - 1) / seq_len
    }
}

/// Inputs and next-token targets of window `w`.
pub fn window(tokens: &[usize], seq_len: usize, w: usize) -> (&[usize], &[usize]) {
    let s = w * seq_len;
    (&tokens[s..s + seq_len], &tokens[s + 1..s + seq_len + 1])
}

/// A packed batch: `batch` rows of `seq_len` tokens each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
}

/// Deterministic batch order: windows are visited in a seeded permutation
/// that is redrawn every epoch. The batch of a step depends only on
/// `(seed, step)`, so an interrupted run resumes on the same data.
#[derive(Clone, Debug)]
pub struct Batcher {
    seq_len: usize,
    batch: usize,
    seed: u64,
    windows: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl Batcher {
    pub fn new(train_len: usize, seq_len: usize, batch: usize, seed: u64) -> Result<Self> {
        let windows = window_count(train_len, seq_len);
        if windows == 0 || batch == 0 {
            return Err(Error::Data(format!(
                "training split of {train_len} tokens has no window of {}",
                seq_len + 1
            )));
        }
        Ok(Self {
            seq_len,
            batch,
            seed,
            windows,
            cached: None,
        })
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.windows).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            perm.shuffle(&mut rng);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("filled above").1
    }

    /// The batch for 1-based step `step`.
    pub fn batch(&mut self, tokens: &[usize], step: u64) -> Batch {
        let (seq_len, n, windows) = (self.seq_len, self.batch, self.windows as u64);
        let mut inputs = Vec::with_capacity(n * seq_len);
        let mut targets = Vec::with_capacity(n * seq_len);
        for j in 0..n as u64 {
            let sample = (step - 1) * n as u64 + j;
            let w = self.order(sample / windows)[(sample % windows) as usize];
            let (x, y) = window(tokens, seq_len, w);
            inputs.extend_from_slice(x);
            targets.extend_from_slice(y);
        }
        Batch {
            inputs,
            targets,
            batch: n,
        }
    }
}

const SYLLABLES: &[&str] = &[
    "ba", "ce", "di", "fo", "gu", "ha", "ke", "li", "mo", "nu", "pa", "re", "si", "to", "vu", "wa", "ze", "ar", "en",
    "il", "or", "un", "st", "th", "ch", "sh", "br", "tr", "pl", "gr",
];
const FUNCTION_WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "was", "with", "on", "as", "by", "at", "from",
    "but", "not", "or",
];
const LEXICON: usize = 2000;
const FANOUT: usize = 32;

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map_or_else(String::new, |f| f.to_ascii_uppercase().to_string() + c.as_str())
}

/// Deterministic English-like text.
///
/// Content words are syllable strings drawn from a Zipf unigram or, 70% of
/// the time, from a seeded successor table of the previous content word;
/// 40% of tokens are function words. Each paragraph invents one to three
/// capitalised names that recur throughout it, so predicting them requires
/// looking back across sentences, and some sentences carry a parenthetical.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lexicon = std::collections::BTreeSet::new();
    while lexicon.len() < LEXICON {
        let n = [1, 1, 2, 2, 2, 3, 3, 4][rng.random_range(0..8)];
        lexicon.insert(
            (0..n)
                .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
                .collect::<String>(),
        );
    }
    let mut words: Vec<String> = lexicon.into_iter().collect();
    words.shuffle(&mut rng);
    let unigram = WeightedIndex::new((0..LEXICON).map(|i| 1.0 / (i + 1) as f64)).expect("positive weights");
    let successor = WeightedIndex::new((0..FANOUT).map(|k| ((k + 1) as f64).powf(-0.8))).expect("positive weights");
    let table: Vec<Vec<usize>> = (0..LEXICON)
        .map(|_| (0..FANOUT).map(|_| rng.random_range(0..LEXICON)).collect())
        .collect();

    let mut out = String::with_capacity(n_bytes + 1024);
    while out.len() < n_bytes {
        let names: Vec<String> = (0..rng.random_range(1..=3))
            .map(|_| {
                let name: String = (0..rng.random_range(2..=4))
                    .flat_map(|_| {
                        let c = b"bcdfghklmnprstvz"[rng.random_range(0..16)];
                        let v = b"aeiou"[rng.random_range(0..5)];
                        [c as char, v as char]
                    })
                    .collect();
                capitalise(&name)
            })
            .collect();
        let mut w = unigram.sample(&mut rng);
        let mut sentences = Vec::new();
        for _ in 0..rng.random_range(3..=8) {
            let len = rng.random_range(6..=18);
            let mut tokens: Vec<&str> = Vec::with_capacity(len);
            for _ in 0..len {
                let u: f64 = rng.random();
                if u < 0.12 {
                    tokens.push(&names[rng.random_range(0..names.len())]);
                } else if u < 0.40 {
                    tokens.push(FUNCTION_WORDS[rng.random_range(0..FUNCTION_WORDS.len())]);
                } else {
                    w = if rng.random::<f64>() < 0.7 {
                        table[w][successor.sample(&mut rng)]
                    } else {
                        unigram.sample(&mut rng)
                    };
                    tokens.push(&words[w]);
                }
            }
            let mut s = capitalise(&tokens.join(" "));
            if rng.random::<f64>() < 0.3 {
                if let Some(i) = s[s.len() / 3..].find(' ').map(|i| i + s.len() / 3) {
                    let from = i + 1 + s.len() / 4;
                    if let Some(j) = s.get(from..).and_then(|t| t.find(' ')).map(|j| j + from) {
                        s = format!("{} ({}){}", &s[..i], &s[i + 1..j], &s[j..]);
                    }
                }
            }
            s.push(['.', '.', '.', '!'][rng.random_range(0..4)]);
            sentences.push(s);
        }
        out.push_str(&sentences.join(" "));
        out.push_str("\n\n");
    }
    out.truncate(n_bytes);
    out.into_bytes()
}
