//! Per-sequence and per-batch parameter gradients, and plain LM training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::ForgetSequence;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::{kl_and_grad, loss_and_grad, LossConfig, LossKind};
use crate::model::{forward_logits, forward_tape, ModelParameters};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor};

/// Which logit rows a loss is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Span {
    /// Rows predicting the continuation tokens.
    Continuation,
    /// Rows predicting every token after the first.
    Full,
}

impl Span {
    fn rows(self, seq: &ForgetSequence) -> (usize, usize) {
        match self {
            Span::Continuation => (seq.p() - 1, seq.len() - 1),
            Span::Full => (0, seq.len() - 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Term {
    Loss(LossConfig),
    /// `KL(teacher ‖ model)`.
    KlToTeacher,
}

impl Term {
    pub fn loss(kind: LossKind) -> Self {
        Term::Loss(LossConfig::plain(kind))
    }

    fn needs_teacher(&self) -> bool {
        matches!(self, Term::KlToTeacher | Term::Loss(LossConfig { kind: LossKind::Di, .. }))
    }
}

fn row_block<F: Real>(logits: &Tensor<F>, start: usize, end: usize) -> Result<Tensor<F>> {
    let (_, cols) = logits.dims2();
    Tensor::matrix(end - start, cols, logits.data()[start * cols..end * cols].to_vec())
}

/// Loss of one sequence without gradients.
pub fn sequence_loss<F: Real>(
    params: &ModelParameters<F>,
    seq: &ForgetSequence,
    span: Span,
    term: &Term,
    teacher: Option<&ModelParameters<F>>,
) -> Result<F> {
    let logits = forward_logits(params, &seq.tokens)?;
    let (start, end) = span.rows(seq);
    let rows = row_block(&logits, start, end)?;
    let targets = &seq.tokens[start + 1..end + 1];
    let teacher_rows = teacher_rows(teacher, term, seq, start, end)?;
    Ok(match term {
        Term::Loss(cfg) => loss_and_grad(cfg, &rows, targets, teacher_rows.as_ref())?.0,
        Term::KlToTeacher => kl_and_grad(&rows, teacher_rows.as_ref().expect("teacher"))?.0,
    })
}

fn teacher_rows<F: Real>(
    teacher: Option<&ModelParameters<F>>,
    term: &Term,
    seq: &ForgetSequence,
    start: usize,
    end: usize,
) -> Result<Option<Tensor<F>>> {
    if !term.needs_teacher() {
        return Ok(None);
    }
    let teacher = teacher.ok_or_else(|| Error::InvalidArgument("loss needs a teacher model".into()))?;
    let logits = forward_logits(teacher, &seq.tokens)?;
    Ok(Some(row_block(&logits, start, end)?))
}

/// Loss of one sequence and its gradient for every parameter tensor.
pub fn sequence_gradient<F: Real>(
    params: &ModelParameters<F>,
    seq: &ForgetSequence,
    span: Span,
    term: &Term,
    teacher: Option<&ModelParameters<F>>,
) -> Result<(F, Vec<Tensor<F>>)> {
    let mut tape = Tape::new();
    let fwd = forward_tape(&mut tape, params, &seq.tokens, false)?;
    let logits = tape.value(fwd.logits);
    let (start, end) = span.rows(seq);
    let rows = row_block(logits, start, end)?;
    let targets = &seq.tokens[start + 1..end + 1];
    let teacher_rows = teacher_rows(teacher, term, seq, start, end)?;
    let (loss, g_rows) = match term {
        Term::Loss(cfg) => loss_and_grad(cfg, &rows, targets, teacher_rows.as_ref())?,
        Term::KlToTeacher => kl_and_grad(&rows, teacher_rows.as_ref().expect("teacher"))?,
    };
    let mut seed = Tensor::zeros(logits.shape());
    let cols = logits.dims2().1;
    seed.data_mut()[start * cols..end * cols].copy_from_slice(g_rows.data());
    let mut grads = tape.backward_with(fwd.logits, seed)?;
    let out = fwd
        .params
        .iter()
        .enumerate()
        .map(|(i, &v)| grads.take_or_zero(v, params.layout().shape(i)))
        .collect();
    Ok((loss, out))
}

/// Unweighted mean over sequences of loss and gradients.
pub fn batch_gradient<F: Real>(
    params: &ModelParameters<F>,
    batch: &[&ForgetSequence],
    span: Span,
    term: &Term,
    teacher: Option<&ModelParameters<F>>,
    exec: Execution,
) -> Result<(F, Vec<Tensor<F>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts = exec.map(batch, |seq| sequence_gradient(params, seq, span, term, teacher));
    let mut loss = F::zero();
    let mut total: Option<Vec<Tensor<F>>> = None;
    for part in parts {
        let (l, g) = part?;
        loss = loss + l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b);
                }
            }
        }
    }
    let inv = F::one() / F::from_usize(batch.len()).unwrap();
    let mut grads = total.expect("non-empty batch");
    for g in &mut grads {
        g.scale_assign(inv);
    }
    Ok((loss * inv, grads))
}

/// Shuffled mini-batches of indices for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::substream(seed, &format!("{}-{epoch}", rng::BATCH_ORDER));
    idx.shuffle(&mut r);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch_size: 16,
            optimizer: OptimizerKind::adamw(),
            seed: 0,
        }
    }
}

/// Language-model training (full-sequence NLL); returns per-epoch mean loss.
pub fn train_lm(
    params: &mut ModelParameters,
    data: &[ForgetSequence],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let active = vec![true; params.tensors().len()];
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        for b in &batches {
            let batch: Vec<&ForgetSequence> = b.iter().map(|&i| &data[i]).collect();
            let (loss, grads) =
                batch_gradient(params, &batch, Span::Full, &Term::loss(LossKind::Nll), None, exec)?;
            opt.step(params, &grads, &active)?;
            total += loss as f64;
        }
        history.push(total / batches.len().max(1) as f64);
    }
    Ok(history)
}
