//! Memorization induction, the selective entropy-maximization eraser,
//! baseline erasers and the ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplits, ForgetSequence};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::{LossConfig, LossKind};
use crate::metrics::{self, MetricSettings};
use crate::model::{Decoder, LanguageModel, ModelParameters, TokenId};
use crate::optim::{Optimizer, OptimizerKind};
use crate::selection::{
    mask_batch_indices, select_blocks, selection_records, SelectionMask, SelectionRecord, SelectionRule,
};
use crate::tensor::{kernels, Tensor};
use crate::train::{batch_gradient, epoch_batches, train_lm, Span, Term, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EraseMethod {
    Emso,
    Ga,
    Di,
    Gd,
    Kl,
    Ta,
    Cd,
    SelectNll,
    RandomEm,
    WithoutDir,
    FullEm,
}

impl EraseMethod {
    pub const ALL: [EraseMethod; 11] = [
        EraseMethod::Emso,
        EraseMethod::Ga,
        EraseMethod::Di,
        EraseMethod::Gd,
        EraseMethod::Kl,
        EraseMethod::Ta,
        EraseMethod::Cd,
        EraseMethod::SelectNll,
        EraseMethod::RandomEm,
        EraseMethod::WithoutDir,
        EraseMethod::FullEm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EraseMethod::Emso => "emso",
            EraseMethod::Ga => "ga",
            EraseMethod::Di => "di",
            EraseMethod::Gd => "gd",
            EraseMethod::Kl => "kl",
            EraseMethod::Ta => "ta",
            EraseMethod::Cd => "cd",
            EraseMethod::SelectNll => "select-nll",
            EraseMethod::RandomEm => "random-em",
            EraseMethod::WithoutDir => "without-dir",
            EraseMethod::FullEm => "full-em",
        }
    }

    /// Block selection rule, or `None` for whole-model updates.
    pub fn selection_rule(self) -> Option<SelectionRule> {
        match self {
            EraseMethod::Emso | EraseMethod::SelectNll => Some(SelectionRule::Contrastive),
            EraseMethod::RandomEm => Some(SelectionRule::Random),
            EraseMethod::WithoutDir => Some(SelectionRule::MagnitudeOnly),
            EraseMethod::FullEm => Some(SelectionRule::Full),
            _ => None,
        }
    }

    pub fn default_gamma(self) -> Option<f64> {
        match self {
            EraseMethod::Di => Some(3.0),
            EraseMethod::Ta => Some(0.05),
            EraseMethod::Cd => Some(0.3),
            _ => None,
        }
    }

    pub fn needs_retain(self) -> bool {
        matches!(self, EraseMethod::Gd | EraseMethod::Kl)
    }

    pub fn needs_memo(self) -> bool {
        matches!(self, EraseMethod::Ta | EraseMethod::Cd)
    }
}

impl fmt::Display for EraseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EraseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', '&', ' '], "-");
        let alias = match norm.as_str() {
            "select-nll" | "selectnll" => "select-nll",
            "random-em" | "randomem" => "random-em",
            "without-dir" | "w/o-dir" | "wo-dir" => "without-dir",
            "full-em" | "fullem" => "full-em",
            other => other,
        };
        EraseMethod::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EraseRunConfig {
    pub method: EraseMethod,
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once validation perplexity / baseline exceeds this. Infinite
    /// disables early stopping.
    pub tau: f64,
    /// Method strength; `None` uses the method default.
    pub gamma: Option<f64>,
    pub seed: u64,
    /// Recompute the mask before every epoch instead of once.
    pub recompute_mask: bool,
    pub optimizer: OptimizerKind,
    /// Weight of the retain term for GD and KL.
    pub retain_weight: f64,
    /// Epochs of forget-set training that produce the memorization model
    /// used by TA and CD.
    pub memo_epochs: usize,
    pub metrics: MetricSettings,
}

impl Default for EraseRunConfig {
    fn default() -> Self {
        Self {
            method: EraseMethod::Emso,
            k: 2,
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 10,
            tau: 1.03,
            gamma: None,
            seed: 0,
            recompute_mask: false,
            optimizer: OptimizerKind::adamw(),
            retain_weight: 1.0,
            memo_epochs: 10,
            metrics: MetricSettings {
                el_sample: Some(5),
                ..MetricSettings::default()
            },
        }
    }
}

impl EraseRunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 1.0) {
            return bad(format!("tau must be > 1, got {}", self.tau));
        }
        if self.k == 0 {
            return bad("k must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and ≥ 0, got {}", self.lr));
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("gamma must be finite and ≥ 0, got {g}"));
            }
        }
        if !(self.retain_weight >= 0.0) {
            return bad("retain_weight must be ≥ 0".into());
        }
        Ok(())
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma.or(self.method.default_gamma())
    }
}

/// Stop iff at least one epoch is done and the perplexity ratio exceeds `tau`.
pub fn early_stop_check(ppl_now: f64, ppl_baseline: f64, tau: f64, epochs_done: usize) -> bool {
    epochs_done >= 1 && ppl_now / ppl_baseline > tau
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Collapse {
    /// Extreme repetition (`Rep_2 > 0.9`).
    Degeneration,
    /// Perplexity ratio above 10 without degeneration.
    Gibberish,
    /// Loss or update became non-finite.
    NonFinite,
}

pub const DEGENERATION_REP2: f64 = 0.9;
pub const GIBBERISH_PPL_RATIO: f64 = 10.0;

pub fn classify_collapse(rep_2: f64, ppl_ratio: f64) -> Option<Collapse> {
    if rep_2 > DEGENERATION_REP2 {
        Some(Collapse::Degeneration)
    } else if ppl_ratio > GIBBERISH_PPL_RATIO {
        Some(Collapse::Gibberish)
    } else {
        None
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub ma: f64,
    pub el_3: Option<f64>,
    pub ppl: f64,
    pub ppl_ratio: f64,
    pub rep_2: f64,
    pub mask: Vec<String>,
    pub collapse: Option<Collapse>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    NonFinite,
    OneShot,
}

/// Model produced by an eraser: edited weights, or the original weights
/// decoded contrastively against a memorization model.
#[derive(Clone, Debug)]
pub enum ErasedModel {
    Params(ModelParameters),
    Contrastive(ContrastiveModel),
}

impl ErasedModel {
    pub fn params(&self) -> &ModelParameters {
        match self {
            ErasedModel::Params(p) => p,
            ErasedModel::Contrastive(c) => &c.base,
        }
    }
}

impl LanguageModel for ErasedModel {
    fn vocab_size(&self) -> usize {
        self.params().vocab_size()
    }

    fn context_len(&self) -> usize {
        self.params().context_len()
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor<f32>> {
        match self {
            ErasedModel::Params(p) => p.logits(tokens),
            ErasedModel::Contrastive(c) => c.logits(tokens),
        }
    }

    fn generate_greedy(&self, prefix: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        match self {
            ErasedModel::Params(p) => p.generate_greedy(prefix, max_new),
            ErasedModel::Contrastive(c) => c.generate_greedy(prefix, max_new),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EraseOutcome {
    pub model: ErasedModel,
    pub log: Vec<RunRecord>,
    pub stop: StopReason,
    pub baseline_ppl: f64,
    /// Union of every mask used (selective methods only).
    pub mask: Option<SelectionMask>,
    pub selection: Vec<SelectionRecord>,
}

impl EraseOutcome {
    pub fn last(&self) -> &RunRecord {
        self.log.last().expect("log holds the initial record")
    }

    /// First collapse flagged in the log.
    pub fn collapse(&self) -> Option<Collapse> {
        self.log.iter().find_map(|r| r.collapse)
    }
}

/// `θ_o - γ θ_memo`, elementwise.
pub fn task_arithmetic(original: &ModelParameters, memo: &ModelParameters, gamma: f64) -> Result<ModelParameters> {
    if !original.same_shape(memo) {
        return Err(Error::Shape("task arithmetic on checkpoints of different configs".into()));
    }
    let g = gamma as f32;
    let mut out = original.clone();
    for (t, m) in out.tensors_mut().iter_mut().zip(memo.tensors()) {
        for (w, &v) in t.data_mut().iter_mut().zip(m.data()) {
            *w -= g * v;
        }
    }
    Ok(out)
}

/// `z - γ·max(0, z_memo - z)`.
pub fn contrastive_decode_logits(z: &Tensor, z_memo: &Tensor, gamma: f64) -> Result<Tensor> {
    if z.shape() != z_memo.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z.shape(), z_memo.shape())));
    }
    let mut out = z.clone();
    contrast_in_place(out.data_mut(), z_memo.data(), gamma as f32);
    Ok(out)
}

fn contrast_in_place(z: &mut [f32], z_memo: &[f32], gamma: f32) {
    for (a, &m) in z.iter_mut().zip(z_memo) {
        *a -= gamma * (m - *a).max(0.0);
    }
}

/// Original model decoded contrastively against the memorization model.
#[derive(Clone, Debug)]
pub struct ContrastiveModel {
    pub base: ModelParameters,
    pub memo: ModelParameters,
    pub gamma: f64,
}

impl LanguageModel for ContrastiveModel {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    fn context_len(&self) -> usize {
        self.base.context_len()
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor<f32>> {
        contrastive_decode_logits(&self.base.logits(tokens)?, &self.memo.logits(tokens)?, self.gamma)
    }

    fn generate_greedy(&self, prefix: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty prefix".into()));
        }
        let budget = max_new.min(self.context_len().saturating_sub(prefix.len()));
        let mut out = Vec::with_capacity(budget);
        let (mut a, mut b) = (Decoder::new(&self.base), Decoder::new(&self.memo));
        let (mut za, mut zb) = (Vec::new(), Vec::new());
        for &t in prefix {
            za = a.step(t)?;
            zb = b.step(t)?;
        }
        while out.len() < budget {
            contrast_in_place(&mut za, &zb, self.gamma as f32);
            let next = kernels::argmax(&za) as TokenId;
            out.push(next);
            if out.len() < budget {
                za = a.step(next)?;
                zb = b.step(next)?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorizeConfig {
    pub target_ma: f64,
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Replay sequences mixed into each epoch, taken as a rolling window so
    /// general text is rarely repeated while the forget set repeats every
    /// epoch.
    pub replay_per_epoch: usize,
}

impl Default for MemorizeConfig {
    fn default() -> Self {
        Self {
            target_ma: 0.95,
            max_epochs: 200,
            lr: 3e-3,
            batch_size: 8,
            optimizer: OptimizerKind::adamw(),
            seed: 0,
            replay_per_epoch: 0,
        }
    }
}

/// Trains on `forget` plus a rolling window of `replay` until the forget
/// set MA reaches the target. Returns the per-epoch forget MA.
pub fn induce_memorization(
    params: &mut ModelParameters,
    forget: &[ForgetSequence],
    replay: &[ForgetSequence],
    cfg: &MemorizeConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&cfg.target_ma) {
        return Err(Error::InvalidArgument(format!("target MA {} outside [0, 1]", cfg.target_ma)));
    }
    if cfg.target_ma == 0.0 {
        return Ok(Vec::new());
    }
    if forget.is_empty() {
        return Err(Error::InvalidArgument("empty forget set".into()));
    }
    let window = if replay.is_empty() { 0 } else { cfg.replay_per_epoch.min(replay.len()) };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let active = vec![true; params.tensors().len()];
    let term = Term::loss(LossKind::Nll);
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let start = epoch * window;
        let data: Vec<&ForgetSequence> = forget
            .iter()
            .chain((start..start + window).map(|i| &replay[i % replay.len()]))
            .collect();
        for b in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
            let batch: Vec<&ForgetSequence> = b.iter().map(|&i| data[i]).collect();
            let (_, grads) = batch_gradient(params, &batch, Span::Full, &term, None, exec)?;
            opt.step(params, &grads, &active)?;
        }
        let ma = metrics::mean_ma(params, forget, exec)?;
        log::info!("memorize epoch {}: MA {ma:.4}", epoch + 1);
        history.push(ma);
        if ma >= cfg.target_ma {
            return Ok(history);
        }
    }
    Err(Error::MemorizationNotReached {
        target: cfg.target_ma,
        epochs: cfg.max_epochs,
        final_ma: history.last().copied().unwrap_or(0.0),
    })
}

/// Memorization model for TA and CD: the original further trained on the
/// forget set.
pub fn memorization_model(
    original: &ModelParameters,
    forget: &[ForgetSequence],
    cfg: &EraseRunConfig,
    exec: Execution,
) -> Result<ModelParameters> {
    let mut memo = original.clone();
    let train = TrainConfig {
        epochs: cfg.memo_epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer,
        seed: cfg.seed,
    };
    train_lm(&mut memo, forget, &train, exec)?;
    Ok(memo)
}

struct Evaluator<'a> {
    splits: &'a CorpusSplits,
    prompts: Vec<Vec<TokenId>>,
    settings: &'a MetricSettings,
    exec: Execution,
    baseline_ppl: f64,
}

impl<'a> Evaluator<'a> {
    fn new<M: LanguageModel>(
        original: &M,
        splits: &'a CorpusSplits,
        settings: &'a MetricSettings,
        exec: Execution,
    ) -> Result<Self> {
        let baseline_ppl = metrics::perplexity(original, &splits.validation, exec)?;
        Ok(Self {
            splits,
            prompts: splits.utility_prompts(),
            settings,
            exec,
            baseline_ppl,
        })
    }

    fn record<M: LanguageModel>(
        &self,
        model: &M,
        epoch: usize,
        loss: Option<f64>,
        mask: Option<&SelectionMask>,
    ) -> Result<RunRecord> {
        let forget = &self.splits.forget;
        let ma = if forget.is_empty() {
            0.0
        } else {
            metrics::mean_ma(model, forget, self.exec)?
        };
        let el_3 = match self.settings.el_sample {
            Some(0) => None,
            _ if forget.is_empty() => None,
            n => {
                let set = &forget[..n.unwrap_or(forget.len()).min(forget.len())];
                let v: Vec<f64> = self
                    .exec
                    .map(set, |s| metrics::el_n(model, s, 3))
                    .into_iter()
                    .collect::<Result<_>>()?;
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let ppl = metrics::perplexity(model, &self.splits.validation, self.exec)?;
        let gens = metrics::generations(model, &self.prompts, self.settings.gen_len, self.exec)?;
        let rep_2 = metrics::rep_div(&gens, 2).map(|r| r.0).unwrap_or(0.0);
        let ppl_ratio = ppl / self.baseline_ppl;
        Ok(RunRecord {
            epoch,
            loss,
            ma,
            el_3,
            ppl,
            ppl_ratio,
            rep_2,
            mask: mask.map(SelectionMask::labels).unwrap_or_default(),
            collapse: classify_collapse(rep_2, ppl_ratio),
        })
    }
}

fn forget_term(cfg: &EraseRunConfig) -> Result<Term> {
    Ok(match cfg.method {
        EraseMethod::Emso | EraseMethod::RandomEm | EraseMethod::WithoutDir | EraseMethod::FullEm => {
            Term::loss(LossKind::Em)
        }
        EraseMethod::Ga | EraseMethod::SelectNll | EraseMethod::Gd | EraseMethod::Kl => Term::loss(LossKind::Ga),
        EraseMethod::Di => Term::Loss(LossConfig::new(LossKind::Di, cfg.gamma())?),
        EraseMethod::Ta | EraseMethod::Cd => {
            return Err(Error::InvalidArgument(format!("{} is not gradient-based", cfg.method)))
        }
    })
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

/// Runs any eraser. `memo` is reused by TA and CD when given, otherwise
/// trained from `original`.
pub fn erase(
    original: &ModelParameters,
    splits: &CorpusSplits,
    memo: Option<&ModelParameters>,
    cfg: &EraseRunConfig,
    exec: Execution,
) -> Result<EraseOutcome> {
    cfg.validate()?;
    match cfg.method {
        EraseMethod::Ta | EraseMethod::Cd => erase_one_shot(original, splits, memo, cfg, exec),
        m if m.selection_rule().is_some() => erase_selective(original, splits, cfg, exec),
        _ => erase_baseline(original, splits, cfg, exec),
    }
}

/// Entropy maximization (or another objective) on a selected set of blocks.
pub fn erase_emso(
    original: &ModelParameters,
    splits: &CorpusSplits,
    cfg: &EraseRunConfig,
    exec: Execution,
) -> Result<EraseOutcome> {
    if cfg.method.selection_rule().is_none() {
        return Err(Error::InvalidArgument(format!("{} does not select blocks", cfg.method)));
    }
    erase(original, splits, None, cfg, exec)
}

fn erase_selective(
    original: &ModelParameters,
    splits: &CorpusSplits,
    cfg: &EraseRunConfig,
    exec: Execution,
) -> Result<EraseOutcome> {
    let rule = cfg.method.selection_rule().expect("selective method");
    if splits.forget.is_empty() {
        return Err(Error::InvalidArgument("empty forget set".into()));
    }
    let eval = Evaluator::new(original, splits, &cfg.metrics, exec)?;
    let term = forget_term(cfg)?;
    let forget = &splits.forget;
    let mut params = original.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut log = vec![eval.record(&params, 0, None, None)?];
    let mut selection = Vec::new();
    let mut mask: Option<SelectionMask> = None;
    let mut union: Option<SelectionMask> = None;
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        if mask.is_none() || cfg.recompute_mask {
            let round = selection.last().map_or(0, |r: &SelectionRecord| r.round + 1);
            let seed = cfg.seed.wrapping_add(round as u64);
            let idx = mask_batch_indices(forget.len(), cfg.batch_size, seed);
            let batch: Vec<&ForgetSequence> = idx.iter().map(|&i| &forget[i]).collect();
            let (m, scores) = select_blocks(&params, &batch, rule, cfg.k, seed, exec)?;
            selection.extend(selection_records(round, &scores, &m));
            if mask.as_ref() != Some(&m) {
                opt.reset();
            }
            log::info!("{} round {round}: {}", cfg.method, m.labels().join(","));
            union = Some(match union {
                None => m.clone(),
                Some(mut u) => {
                    u.selected.extend(m.selected.iter().copied());
                    u
                }
            });
            mask = Some(m);
        }
        let m = mask.as_ref().expect("mask");
        let active = m.active_tensors(params.layout());
        let checkpoint = params.clone();
        match run_epoch(&mut params, forget, &term, None, &active, &mut opt, cfg, epoch, exec) {
            Ok(loss) => {
                let rec = eval.record(&params, epoch + 1, Some(loss), Some(m))?;
                let halt = early_stop_check(rec.ppl, eval.baseline_ppl, cfg.tau, epoch + 1);
                log.push(rec);
                if halt {
                    stop = StopReason::EarlyStop;
                    break;
                }
            }
            Err(e) if is_non_finite(&e) => {
                log::warn!("{}: {e}; returning the last finite checkpoint", cfg.method);
                params = checkpoint;
                let mut rec = eval.record(&params, epoch + 1, None, Some(m))?;
                rec.collapse = Some(Collapse::NonFinite);
                log.push(rec);
                stop = StopReason::NonFinite;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EraseOutcome {
        model: ErasedModel::Params(params),
        log,
        stop,
        baseline_ppl: eval.baseline_ppl,
        mask: union,
        selection,
    })
}

/// One pass over the forget set; retain batches are cycled alongside when
/// `retain` is given. Returns the mean forget-term loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    params: &mut ModelParameters,
    forget: &[ForgetSequence],
    term: &Term,
    retain: Option<(&[ForgetSequence], &Term, &ModelParameters)>,
    active: &[bool],
    opt: &mut Optimizer,
    cfg: &EraseRunConfig,
    epoch: usize,
    exec: Execution,
) -> Result<f64> {
    let teacher = retain.map(|r| r.2);
    let batches = epoch_batches(forget.len(), cfg.batch_size, cfg.seed, epoch);
    let retain_batches = retain
        .map(|(r, _, _)| epoch_batches(r.len(), cfg.batch_size, cfg.seed ^ 0x5eed_7e7a, epoch))
        .unwrap_or_default();
    let mut total = 0.0;
    for (j, b) in batches.iter().enumerate() {
        let batch: Vec<&ForgetSequence> = b.iter().map(|&i| &forget[i]).collect();
        let (loss, mut grads) = batch_gradient(params, &batch, Span::Continuation, term, teacher, exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        if let Some((retain, rterm, t)) = retain {
            if !retain_batches.is_empty() {
                let rb = &retain_batches[j % retain_batches.len()];
                let rbatch: Vec<&ForgetSequence> = rb.iter().map(|&i| &retain[i]).collect();
                let (_, mut rg) = batch_gradient(params, &rbatch, Span::Full, rterm, Some(t), exec)?;
                for (g, r) in grads.iter_mut().zip(&mut rg) {
                    r.scale_assign(cfg.retain_weight as f32);
                    g.add_assign(r);
                }
            }
        }
        opt.step(params, &grads, active)?;
        total += loss as f64;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// GA, DI, GD and KL: whole-model updates with the early-stop protocol.
pub fn erase_baseline(
    original: &ModelParameters,
    splits: &CorpusSplits,
    cfg: &EraseRunConfig,
    exec: Execution,
) -> Result<EraseOutcome> {
    cfg.validate()?;
    if !matches!(cfg.method, EraseMethod::Ga | EraseMethod::Di | EraseMethod::Gd | EraseMethod::Kl) {
        return Err(Error::InvalidArgument(format!("{} is not a whole-model baseline", cfg.method)));
    }
    if cfg.method.needs_retain() && splits.retain.is_empty() {
        return Err(Error::InvalidArgument(format!("{} needs a retain split", cfg.method)));
    }
    let eval = Evaluator::new(original, splits, &cfg.metrics, exec)?;
    let term = forget_term(cfg)?;
    let retain_term = match cfg.method {
        EraseMethod::Gd => Some(Term::loss(LossKind::Nll)),
        EraseMethod::Kl => Some(Term::KlToTeacher),
        _ => None,
    };
    let teacher = original.clone();
    let mut params = original.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let active = vec![true; params.tensors().len()];
    let mut log = vec![eval.record(&params, 0, None, None)?];
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        let checkpoint = params.clone();
        let retain = retain_term.as_ref().map(|t| (splits.retain.as_slice(), t, &teacher));
        // DI distils from the frozen original even without a retain term
        let result = if cfg.method == EraseMethod::Di {
            run_epoch_with_teacher(&mut params, &splits.forget, &term, &teacher, &active, &mut opt, cfg, epoch, exec)
        } else {
            run_epoch(&mut params, &splits.forget, &term, retain, &active, &mut opt, cfg, epoch, exec)
        };
        match result {
            Ok(loss) => {
                let rec = eval.record(&params, epoch + 1, Some(loss), None)?;
                let halt = early_stop_check(rec.ppl, eval.baseline_ppl, cfg.tau, epoch + 1);
                log.push(rec);
                if halt {
                    stop = StopReason::EarlyStop;
                    break;
                }
            }
            Err(e) if is_non_finite(&e) => {
                log::warn!("{}: {e}; returning the last finite checkpoint", cfg.method);
                params = checkpoint;
                let mut rec = eval.record(&params, epoch + 1, None, None)?;
                rec.collapse = Some(Collapse::NonFinite);
                log.push(rec);
                stop = StopReason::NonFinite;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EraseOutcome {
        model: ErasedModel::Params(params),
        log,
        stop,
        baseline_ppl: eval.baseline_ppl,
        mask: None,
        selection: Vec::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_epoch_with_teacher(
    params: &mut ModelParameters,
    forget: &[ForgetSequence],
    term: &Term,
    teacher: &ModelParameters,
    active: &[bool],
    opt: &mut Optimizer,
    cfg: &EraseRunConfig,
    epoch: usize,
    exec: Execution,
) -> Result<f64> {
    let batches = epoch_batches(forget.len(), cfg.batch_size, cfg.seed, epoch);
    let mut total = 0.0;
    for b in &batches {
        let batch: Vec<&ForgetSequence> = b.iter().map(|&i| &forget[i]).collect();
        let (loss, grads) = batch_gradient(params, &batch, Span::Continuation, term, Some(teacher), exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        opt.step(params, &grads, active)?;
        total += loss as f64;
    }
    Ok(total / batches.len().max(1) as f64)
}

fn erase_one_shot(
    original: &ModelParameters,
    splits: &CorpusSplits,
    memo: Option<&ModelParameters>,
    cfg: &EraseRunConfig,
    exec: Execution,
) -> Result<EraseOutcome> {
    let gamma = cfg.gamma().expect("TA and CD have a default strength");
    let trained;
    let memo = match memo {
        Some(m) => m,
        None => {
            trained = memorization_model(original, &splits.forget, cfg, exec)?;
            &trained
        }
    };
    let eval = Evaluator::new(original, splits, &cfg.metrics, exec)?;
    let initial = eval.record(original, 0, None, None)?;
    let model = if cfg.method == EraseMethod::Ta {
        ErasedModel::Params(task_arithmetic(original, memo, gamma)?)
    } else {
        if !original.same_shape(memo) {
            return Err(Error::Shape("contrastive decoding across configs".into()));
        }
        ErasedModel::Contrastive(ContrastiveModel {
            base: original.clone(),
            memo: memo.clone(),
            gamma,
        })
    };
    let rec = eval.record(&model, 1, None, None)?;
    Ok(EraseOutcome {
        model,
        log: vec![initial, rec],
        stop: StopReason::OneShot,
        baseline_ppl: eval.baseline_ppl,
        mask: None,
        selection: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 12,
            context_len: 16,
            seed: 3,
        }
    }

    fn seqs(n: usize, offset: u32) -> Vec<ForgetSequence> {
        (0..n)
            .map(|i| {
                let toks = (0..8).map(|t| ((i as u32 * 5 + t * 3 + offset) % 12) as TokenId).collect();
                ForgetSequence::new(toks, 4).unwrap()
            })
            .collect()
    }

    fn splits() -> CorpusSplits {
        CorpusSplits {
            forget: seqs(4, 0),
            retain: seqs(6, 1),
            validation: seqs(3, 2),
            holdout: Vec::new(),
        }
    }

    fn run_cfg(method: EraseMethod) -> EraseRunConfig {
        EraseRunConfig {
            method,
            max_epochs: 2,
            batch_size: 2,
            lr: 1e-2,
            tau: f64::INFINITY,
            memo_epochs: 2,
            metrics: MetricSettings {
                el_sample: Some(1),
                gen_len: 4,
                ematch_len: None,
            },
            ..Default::default()
        }
    }

    #[test]
    fn early_stop_examples() {
        assert!(early_stop_check(1.031, 1.0, 1.03, 1));
        assert!(!early_stop_check(2.0, 1.0, 1.03, 0));
        assert!(!early_stop_check(1.0, 1.0, 1.03, 5));
    }

    #[test]
    fn collapse_classes() {
        assert_eq!(classify_collapse(0.95, 1.0), Some(Collapse::Degeneration));
        assert_eq!(classify_collapse(0.95, 50.0), Some(Collapse::Degeneration));
        assert_eq!(classify_collapse(0.2, 11.0), Some(Collapse::Gibberish));
        assert_eq!(classify_collapse(0.2, 2.0), None);
    }

    #[test]
    fn task_arithmetic_examples() {
        let o = ModelParameters::init(&cfg()).unwrap();
        let mut a = o.clone();
        let mut m = o.clone();
        a.tensors_mut()[0].data_mut()[0] = 1.0;
        m.tensors_mut()[0].data_mut()[0] = 0.5;
        let t = task_arithmetic(&a, &m, 0.05).unwrap();
        assert!((t.tensor(0).data()[0] - 0.975).abs() < 1e-7);
        assert_eq!(task_arithmetic(&a, &m, 0.0).unwrap(), a);
        let two = task_arithmetic(&task_arithmetic(&a, &m, 0.1).unwrap(), &m, 0.2).unwrap();
        let once = task_arithmetic(&a, &m, 0.3).unwrap();
        for (x, y) in two.flatten().iter().zip(once.flatten()) {
            assert!((x - y).abs() < 1e-6);
        }
        let other = ModelParameters::init(&ModelConfig { d_model: 4, ..cfg() }).unwrap();
        assert!(task_arithmetic(&a, &other, 0.1).is_err());
    }

    #[test]
    fn contrastive_logit_examples() {
        let z = Tensor::vector(vec![1.0, 0.0]);
        let zm = Tensor::vector(vec![3.0, 0.0]);
        let out = contrastive_decode_logits(&z, &zm, 0.3).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-6 && out.data()[1] == 0.0);
        assert_eq!(contrastive_decode_logits(&z, &z, 0.3).unwrap(), z);
        let low = Tensor::vector(vec![-5.0, -1.0]);
        assert_eq!(contrastive_decode_logits(&z, &low, 9.0).unwrap(), z);
        assert!(contrastive_decode_logits(&z, &Tensor::vector(vec![1.0]), 0.3).is_err());
    }

    #[test]
    fn contrastive_generation_matches_full_logits() {
        let base = ModelParameters::init(&cfg()).unwrap();
        let memo = ModelParameters::init(&ModelConfig { seed: 9, ..cfg() }).unwrap();
        let c = ContrastiveModel { base, memo, gamma: 2.0 };
        let fast = c.generate_greedy(&[1, 2], 6).unwrap();
        let mut seq = vec![1, 2];
        for _ in 0..6 {
            let l = c.logits(&seq).unwrap();
            seq.push(kernels::argmax(l.row(seq.len() - 1)) as TokenId);
        }
        assert_eq!(fast, seq[2..]);
    }

    #[test]
    fn method_names_round_trip() {
        for m in EraseMethod::ALL {
            assert_eq!(m.name().parse::<EraseMethod>().unwrap(), m);
        }
        assert_eq!("Select&NLL".parse::<EraseMethod>().unwrap(), EraseMethod::SelectNll);
        assert_eq!("w/o-Dir".parse::<EraseMethod>().unwrap(), EraseMethod::WithoutDir);
        assert!("npo".parse::<EraseMethod>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EraseRunConfig { tau: 1.0, ..Default::default() }.validate().is_err());
        assert!(EraseRunConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(EraseRunConfig::default().validate().is_ok());
        assert_eq!(run_cfg(EraseMethod::Di).gamma(), Some(3.0));
    }

    #[test]
    fn memorization_target_zero_is_identity() {
        let mut p = ModelParameters::init(&cfg()).unwrap();
        let before = p.clone();
        let mc = MemorizeConfig { target_ma: 0.0, ..Default::default() };
        assert!(induce_memorization(&mut p, &seqs(2, 0), &[], &mc, Execution::Sequential).unwrap().is_empty());
        assert_eq!(p, before);
        let mc = MemorizeConfig { target_ma: 1.0, max_epochs: 1, lr: 1e-6, ..Default::default() };
        let err = induce_memorization(&mut p, &seqs(2, 0), &[], &mc, Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::MemorizationNotReached { .. }));
    }

    #[test]
    fn memorization_reaches_target_deterministically() {
        let run = || {
            let mut p = ModelParameters::init(&cfg()).unwrap();
            let mc = MemorizeConfig { target_ma: 1.0, lr: 2e-2, batch_size: 2, ..Default::default() };
            induce_memorization(&mut p, &seqs(3, 0), &[], &mc, Execution::default()).unwrap();
            p
        };
        let a = run();
        assert!(metrics::mean_ma(&a, &seqs(3, 0), Execution::Sequential).unwrap() >= 1.0);
        assert_eq!(a, run());
    }

    #[test]
    fn zero_epochs_is_identity_and_emso_is_local() {
        let o = ModelParameters::init(&cfg()).unwrap();
        let s = splits();
        let zero = EraseRunConfig { max_epochs: 0, ..run_cfg(EraseMethod::Emso) };
        let out = erase(&o, &s, None, &zero, Execution::Sequential).unwrap();
        assert_eq!(out.model.params(), &o);
        assert_eq!(out.log.len(), 1);

        let out = erase(&o, &s, None, &run_cfg(EraseMethod::Emso), Execution::default()).unwrap();
        let mask = out.mask.clone().unwrap();
        assert_eq!(mask.len(), 2);
        let active = mask.active_tensors(o.layout());
        let mut changed = false;
        for (i, (a, b)) in o.tensors().iter().zip(out.model.params().tensors()).enumerate() {
            if active[i] {
                changed |= a != b;
            } else {
                assert_eq!(a, b, "{}", o.layout().name(i));
            }
        }
        assert!(changed);
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.selection.len(), o.layout().blocks().len());
    }

    #[test]
    fn erasers_are_deterministic() {
        let o = ModelParameters::init(&cfg()).unwrap();
        let s = splits();
        for m in [EraseMethod::Emso, EraseMethod::Ga, EraseMethod::Kl, EraseMethod::RandomEm] {
            let a = erase(&o, &s, None, &run_cfg(m), Execution::Sequential).unwrap();
            let b = erase(&o, &s, None, &run_cfg(m), Execution::Parallel).unwrap();
            assert_eq!(a.model.params(), b.model.params(), "{m}");
            assert_eq!(a.log, b.log);
        }
    }

    #[test]
    fn full_em_equals_emso_with_every_block() {
        let o = ModelParameters::init(&cfg()).unwrap();
        let s = splits();
        let n = o.layout().blocks().len();
        let a = erase(&o, &s, None, &run_cfg(EraseMethod::FullEm), Execution::Sequential).unwrap();
        let b = erase(&o, &s, None, &EraseRunConfig { k: n, ..run_cfg(EraseMethod::Emso) }, Execution::Sequential)
            .unwrap();
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn baseline_requirements_and_identities() {
        let o = ModelParameters::init(&cfg()).unwrap();
        let mut s = splits();
        s.retain.clear();
        for m in [EraseMethod::Gd, EraseMethod::Kl] {
            assert!(erase(&o, &s, None, &run_cfg(m), Execution::Sequential).is_err());
        }
        // KL with nothing to forget stays at the teacher: zero gradients, zero steps
        let mut s = splits();
        s.forget.clear();
        let out = erase_baseline(&o, &s, &run_cfg(EraseMethod::Kl), Execution::Sequential).unwrap();
        assert_eq!(out.model.params(), &o);
        // DI with γ = 0 distils the original into itself
        let s = splits();
        let di = EraseRunConfig { gamma: Some(0.0), lr: 1e-3, ..run_cfg(EraseMethod::Di) };
        let out = erase(&o, &s, None, &di, Execution::Sequential).unwrap();
        assert!((out.last().ma - out.log[0].ma).abs() < 1e-9);
    }

    #[test]
    fn one_shot_methods() {
        let o = ModelParameters::init(&cfg()).unwrap();
        let s = splits();
        let ta = erase(&o, &s, None, &run_cfg(EraseMethod::Ta), Execution::Sequential).unwrap();
        assert_eq!(ta.stop, StopReason::OneShot);
        assert_eq!(ta.log.len(), 2);
        let cd = erase(&o, &s, Some(&o), &run_cfg(EraseMethod::Cd), Execution::Sequential).unwrap();
        // contrasting against itself changes nothing
        assert_eq!(cd.log[0].ma, cd.log[1].ma);
        assert!(matches!(cd.model, ErasedModel::Contrastive(_)));
    }

    #[test]
    fn early_stop_halts_after_first_epoch() {
        let o = ModelParameters::init(&cfg()).unwrap();
        let s = splits();
        let c = EraseRunConfig { tau: 1.0 + 1e-12, lr: 0.5, max_epochs: 5, ..run_cfg(EraseMethod::Ga) };
        let out = erase(&o, &s, None, &c, Execution::Sequential).unwrap();
        assert_eq!(out.stop, StopReason::EarlyStop);
        assert_eq!(out.log.len(), 2);
    }
}
