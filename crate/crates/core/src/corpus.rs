//! Corpus ingestion, prefix/continuation splitting and a synthetic text source.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, Vocabulary};
use crate::rng;

/// One erasure request: `tokens[..prefix_len]` is the prefix, the rest is
/// the continuation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForgetSequence {
    pub tokens: Vec<TokenId>,
    pub prefix_len: usize,
}

impl ForgetSequence {
    pub fn new(tokens: Vec<TokenId>, prefix_len: usize) -> Result<Self> {
        if prefix_len < 1 || prefix_len >= tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "prefix length {prefix_len} invalid for {} tokens (need p ≥ 1, q ≥ 1)",
                tokens.len()
            )));
        }
        Ok(Self { tokens, prefix_len })
    }

    /// Splits at `round(len · ratio)`, clamped so both parts are non-empty.
    pub fn split_ratio(tokens: Vec<TokenId>, ratio: f64) -> Result<Self> {
        let n = tokens.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("{n} tokens cannot be split")));
        }
        let p = ((n as f64) * ratio).round() as usize;
        Self::new(tokens, p.clamp(1, n - 1))
    }

    pub fn p(&self) -> usize {
        self.prefix_len
    }

    pub fn q(&self) -> usize {
        self.tokens.len() - self.prefix_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prefix(&self) -> &[TokenId] {
        &self.tokens[..self.prefix_len]
    }

    pub fn continuation(&self) -> &[TokenId] {
        &self.tokens[self.prefix_len..]
    }
}

pub type SequenceBatch = Vec<ForgetSequence>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub forget: usize,
    pub retain: usize,
    pub validation: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            forget: 50,
            retain: 300,
            validation: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    pub sizes: SplitSizes,
    /// Fraction of each line's tokens (BOS included) used as prefix.
    pub prefix_ratio: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            sizes: SplitSizes::default(),
            prefix_ratio: 0.5,
            min_tokens: 8,
            max_tokens: 128,
            seed: 0,
        }
    }
}

/// Disjoint corpus splits. Lines not assigned to a named split land in
/// `holdout` (never trained on).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub forget: Vec<ForgetSequence>,
    pub retain: Vec<ForgetSequence>,
    pub validation: Vec<ForgetSequence>,
    pub holdout: Vec<ForgetSequence>,
}

impl CorpusSplits {
    /// Open-generation prompts: validation prefixes.
    pub fn utility_prompts(&self) -> Vec<Vec<TokenId>> {
        self.validation.iter().map(|s| s.prefix().to_vec()).collect()
    }
}

pub fn ingest_corpus(path: &Path, opts: &IngestOptions) -> Result<CorpusSplits> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ingest_bytes(&bytes, opts)
}

pub fn ingest_bytes(bytes: &[u8], opts: &IngestOptions) -> Result<CorpusSplits> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        Error::Corpus(format!("invalid UTF-8 at byte offset {}", e.valid_up_to()))
    })?;
    let lines: Vec<&str> = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .collect();
    let mut bad = Vec::new();
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let n = line.len() + 1;
        if n < opts.min_tokens || n > opts.max_tokens {
            bad.push(format!("line {} ({} tokens)", i + 1, n));
            continue;
        }
        if seen.insert(*line) {
            kept.push(*line);
        } else {
            log::warn!("dropping duplicate corpus line {}", i + 1);
        }
    }
    if !bad.is_empty() {
        return Err(Error::Corpus(format!(
            "lines outside [{}, {}] tokens: {}",
            opts.min_tokens,
            opts.max_tokens,
            bad.join(", ")
        )));
    }
    if kept.is_empty() {
        return Err(Error::Corpus("corpus is empty".into()));
    }
    let s = &opts.sizes;
    let needed = s.forget + s.retain + s.validation;
    if needed > kept.len() {
        return Err(Error::Corpus(format!(
            "splits need {needed} distinct lines, corpus has {}",
            kept.len()
        )));
    }
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.shuffle(&mut rng::substream(opts.seed, rng::SPLIT));
    let vocab = Vocabulary;
    let seqs = order
        .iter()
        .map(|&i| ForgetSequence::split_ratio(vocab.encode_with_bos(kept[i].as_bytes()), opts.prefix_ratio))
        .collect::<Result<Vec<_>>>()?;
    let mut it = seqs.into_iter();
    let forget = it.by_ref().take(s.forget).collect();
    let retain = it.by_ref().take(s.retain).collect();
    let validation = it.by_ref().take(s.validation).collect();
    let holdout = it.collect();
    Ok(CorpusSplits {
        forget,
        retain,
        validation,
        holdout,
    })
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br",
    "ch", "dr", "fl", "gr", "kl", "pr", "sh", "st", "th", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "y"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "x"];

/// Deterministic pseudo-text: lines of exactly `line_len` bytes built from
/// a seeded lexicon of syllable words. Every word has one preferred
/// successor, taken with probability `follow`; otherwise the next word is
/// uniform. Lines start at a uniform word.
pub fn synthetic_lines(count: usize, line_len: usize, lexicon_size: usize, follow: f64, seed: u64) -> Vec<String> {
    let mut r = rng::substream(seed, "synthetic-corpus");
    let mut lexicon = Vec::with_capacity(lexicon_size);
    let mut seen = HashSet::new();
    while lexicon.len() < lexicon_size {
        let syllables = r.gen_range(1..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[r.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[r.gen_range(0..VOWELS.len())]);
            w.push_str(CODAS[r.gen_range(0..CODAS.len())]);
        }
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    let successor: Vec<usize> = if follow > 0.0 {
        (0..lexicon_size).map(|_| r.gen_range(0..lexicon_size)).collect()
    } else {
        Vec::new()
    };
    let mut lines = Vec::with_capacity(count);
    let mut distinct = HashSet::new();
    while lines.len() < count {
        let mut line = String::new();
        let mut w = r.gen_range(0..lexicon_size);
        loop {
            line.push_str(&lexicon[w]);
            if line.len() >= line_len {
                break;
            }
            line.push(' ');
            w = if follow > 0.0 && r.gen_bool(follow) { successor[w] } else { r.gen_range(0..lexicon_size) };
        }
        line.truncate(line_len);
        if distinct.insert(line.clone()) {
            lines.push(line);
        }
    }
    lines
}
