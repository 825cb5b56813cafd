//! Memorization and utility metrics.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::ForgetSequence;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{LanguageModel, TokenId};
use crate::tensor::kernels;

fn ngram_set(a: &[TokenId], n: usize) -> HashSet<&[TokenId]> {
    if n == 0 || a.len() < n {
        return HashSet::new();
    }
    a.windows(n).collect()
}

/// `|ngrams(a) ∩ ngrams(b)| / |ngrams(a)|` over distinct n-grams; 0 when
/// `a` has none.
pub fn overlap_n(a: &[TokenId], b: &[TokenId], n: usize) -> f64 {
    let na = ngram_set(a, n);
    if na.is_empty() {
        return 0.0;
    }
    let nb = ngram_set(b, n);
    na.iter().filter(|g| nb.contains(*g)).count() as f64 / na.len() as f64
}

/// Extraction likelihood: mean over prefixes `x[..i]`, `i = 1..=p+q-n`, of
/// the n-gram overlap between the greedy continuation (length `p+q-i`) and
/// `x[i-1..]`.
pub fn el_n<M: LanguageModel>(model: &M, seq: &ForgetSequence, n: usize) -> Result<f64> {
    let len = seq.len();
    if n == 0 || len <= n {
        return Err(Error::InvalidArgument(format!("sequence of {len} tokens too short for EL_{n}")));
    }
    let terms = len - n;
    let mut total = 0.0;
    for i in 1..=terms {
        let gen = model.generate_greedy(&seq.tokens[..i], len - i)?;
        total += overlap_n(&gen, &seq.tokens[i - 1..], n);
    }
    Ok(total / terms as f64)
}

/// Teacher-forced argmax accuracy on continuation tokens `p..p+q-1`
/// (the final token is not scored).
pub fn ma<M: LanguageModel>(model: &M, seq: &ForgetSequence) -> Result<f64> {
    let (p, q) = (seq.p(), seq.q());
    if q < 2 {
        return Err(Error::InvalidArgument(format!("MA needs q ≥ 2, got {q}")));
    }
    let logits = model.logits(&seq.tokens)?;
    let hits = (p..p + q - 1)
        .filter(|&t| kernels::argmax(logits.row(t - 1)) as TokenId == seq.tokens[t])
        .count();
    Ok(hits as f64 / (q - 1) as f64)
}

/// Length of the common prefix of `a` and `b`.
pub fn match_length(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Greedy-decode match length against `truth` until the first mismatch.
pub fn exact_match<M: LanguageModel>(model: &M, prefix: &[TokenId], truth: &[TokenId]) -> Result<usize> {
    let gen = model.generate_greedy(prefix, truth.len())?;
    Ok(match_length(&gen, truth))
}

/// Summed next-token NLL over every position after the first, and the
/// number of scored tokens.
pub fn sequence_nll<M: LanguageModel>(model: &M, tokens: &[TokenId]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Ok((0.0, 0));
    }
    let logits = model.logits(tokens)?;
    let mut sum = 0.0;
    for t in 1..tokens.len() {
        let row = logits.row(t - 1);
        let lse = kernels::log_sum_exp(row) as f64;
        sum += lse - row[tokens[t] as usize] as f64;
    }
    Ok((sum, tokens.len() - 1))
}

/// `exp` of the token-pooled mean NLL.
pub fn perplexity<M: LanguageModel>(model: &M, corpus: &[ForgetSequence], exec: Execution) -> Result<f64> {
    let parts = exec.map(corpus, |s| sequence_nll(model, &s.tokens));
    let (mut sum, mut count) = (0.0, 0usize);
    for part in parts {
        let (s, c) = part?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("perplexity of an empty corpus".into()));
    }
    let ppl = (sum / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite("perplexity".into()));
    }
    Ok(ppl)
}

/// `(rep_n, div_n)` with `rep_n` the mean of `1 - unique/total` n-grams over
/// generations holding at least one n-gram, and `div_n = 1 - rep_n`.
pub fn rep_div(generations: &[Vec<TokenId>], n: usize) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be ≥ 1".into()));
    }
    let reps: Vec<f64> = generations
        .iter()
        .filter(|g| g.len() >= n)
        .map(|g| {
            let total = g.len() - n + 1;
            1.0 - ngram_set(g, n).len() as f64 / total as f64
        })
        .collect();
    if reps.is_empty() {
        return Err(Error::InvalidArgument(format!("no generation has {n} tokens")));
    }
    let rep = reps.iter().sum::<f64>() / reps.len() as f64;
    Ok((rep, 1.0 - rep))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    /// Score EL on the first `el_sample` forget sequences only.
    pub el_sample: Option<usize>,
    /// Tokens greedily generated per utility prompt.
    pub gen_len: usize,
    /// Cap on EMatch continuation length; `None` uses the whole continuation.
    pub ematch_len: Option<usize>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            el_sample: None,
            gen_len: 32,
            ematch_len: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub forget: usize,
    pub el: usize,
    pub validation: usize,
    pub generations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub el_3: f64,
    pub ma: f64,
    pub ematch_mean: f64,
    pub ematch_max: usize,
    pub ppl: f64,
    pub rep_2: f64,
    pub div_3: f64,
    pub counts: Counts,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Greedy generations of `len` tokens for every prompt.
pub fn generations<M: LanguageModel>(
    model: &M,
    prompts: &[Vec<TokenId>],
    len: usize,
    exec: Execution,
) -> Result<Vec<Vec<TokenId>>> {
    exec.map(prompts, |p| model.generate_greedy(p, len)).into_iter().collect()
}

/// MA over a set (mean per sequence).
pub fn mean_ma<M: LanguageModel>(model: &M, seqs: &[ForgetSequence], exec: Execution) -> Result<f64> {
    let v: Vec<f64> = exec.map(seqs, |s| ma(model, s)).into_iter().collect::<Result<_>>()?;
    Ok(mean(&v))
}

/// Full report: erasure metrics on `forget`, utility metrics on `validation`
/// and on generations from `prompts`.
pub fn evaluate<M: LanguageModel>(
    model: &M,
    forget: &[ForgetSequence],
    validation: &[ForgetSequence],
    prompts: &[Vec<TokenId>],
    settings: &MetricSettings,
    exec: Execution,
) -> Result<MetricReport> {
    if forget.is_empty() {
        return Err(Error::InvalidArgument("empty forget set".into()));
    }
    let el_set = &forget[..settings.el_sample.unwrap_or(forget.len()).min(forget.len())];
    let el: Vec<f64> = exec.map(el_set, |s| el_n(model, s, 3)).into_iter().collect::<Result<_>>()?;
    let ma = mean_ma(model, forget, exec)?;
    let em: Vec<usize> = exec
        .map(forget, |s| {
            let cont = s.continuation();
            let cont = &cont[..settings.ematch_len.unwrap_or(cont.len()).min(cont.len())];
            exact_match(model, s.prefix(), cont)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let ppl = perplexity(model, validation, exec)?;
    let gens = generations(model, prompts, settings.gen_len, exec)?;
    let (rep_2, _) = rep_div(&gens, 2)?;
    let (_, div_3) = rep_div(&gens, 3)?;
    Ok(MetricReport {
        el_3: mean(&el),
        ma,
        ematch_mean: em.iter().sum::<usize>() as f64 / em.len() as f64,
        ematch_max: em.iter().copied().max().unwrap_or(0),
        ppl,
        rep_2,
        div_3,
        counts: Counts {
            forget: forget.len(),
            el: el_set.len(),
            validation: validation.len(),
            generations: gens.len(),
        },
    })
}
