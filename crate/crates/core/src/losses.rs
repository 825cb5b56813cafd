//! Erasure objectives and their closed-form gradients with respect to logits.
//!
//! Every loss here averages over the rows it is given (one row per scored
//! position). Callers pass only continuation rows; prefix positions never
//! contribute. The closed forms are cross-checked against the tape in tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::tensor::{kernels, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Negative entropy: minimizing it maximizes predictive entropy.
    Em,
    Nll,
    /// Label smoothing toward every vocabulary entry.
    Ls,
    /// Gradient ascent: negated NLL.
    Ga,
    /// Distillation toward a teacher boosted on non-target tokens.
    Di,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: Option<f64>,
}

impl LossConfig {
    pub fn new(kind: LossKind, gamma: Option<f64>) -> Result<Self> {
        let needs = matches!(kind, LossKind::Ls | LossKind::Di);
        match gamma {
            Some(g) if needs && g >= 0.0 && g.is_finite() => {
                if kind == LossKind::Ls && g == 0.0 {
                    return Err(Error::InvalidArgument("label smoothing needs γ > 0".into()));
                }
                Ok(Self { kind, gamma })
            }
            None if !needs => Ok(Self { kind, gamma }),
            _ => Err(Error::InvalidArgument(format!(
                "γ must be given (and ≥ 0) exactly for LS and DI, got {kind:?} with {gamma:?}"
            ))),
        }
    }

    pub fn plain(kind: LossKind) -> Self {
        Self::new(kind, None).expect("loss without strength")
    }
}

fn ensure_distribution<F: Real>(p: &[F]) -> Result<()> {
    let total: f64 = p.iter().map(|v| v.as_f64()).sum();
    if p.is_empty() || (total - 1.0).abs() > 1e-6 || p.iter().any(|v| v.as_f64() < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "not a probability vector (sum {total})"
        )));
    }
    Ok(())
}

fn rows_log_probs<F: Real>(logits: &Tensor<F>) -> Result<(usize, usize, Vec<F>)> {
    logits.ensure_finite("logits")?;
    let (rows, cols) = logits.dims2();
    let mut lp = vec![F::zero(); rows * cols];
    for r in 0..rows {
        kernels::log_softmax_row(logits.row(r), &mut lp[r * cols..(r + 1) * cols]);
    }
    Ok((rows, cols, lp))
}

/// `(1/q) Σ_i Σ_y p log p`, in `[-log|V|, 0]`.
pub fn em_loss<F: Real>(logits: &Tensor<F>) -> Result<F> {
    let (rows, _, lp) = rows_log_probs(logits)?;
    let total: F = lp.iter().map(|&l| l.exp() * l).sum();
    Ok(total / F::from_usize(rows).unwrap())
}

/// Mean negative log-likelihood of `targets`, one per row.
pub fn nll_loss<F: Real>(logits: &Tensor<F>, targets: &[TokenId]) -> Result<F> {
    let (rows, cols, lp) = rows_log_probs(logits)?;
    check_targets(rows, cols, targets)?;
    let total: F = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| -lp[r * cols + t as usize])
        .sum();
    Ok(total / F::from_usize(rows).unwrap())
}

fn check_targets(rows: usize, cols: usize, targets: &[TokenId]) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::Shape(format!("{} targets for {rows} rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= cols) {
        return Err(Error::InvalidArgument(format!(
            "target id {t} outside vocabulary of {cols}"
        )));
    }
    Ok(())
}

/// `-γ Σ_j log p_j` per row, averaged over rows.
pub fn ls_loss<F: Real>(logits: &Tensor<F>, gamma: F) -> Result<F> {
    if !(gamma > F::zero()) {
        return Err(Error::InvalidArgument("label smoothing needs γ > 0".into()));
    }
    let (rows, _, lp) = rows_log_probs(logits)?;
    let total: F = lp.iter().copied().sum();
    Ok(-gamma * total / F::from_usize(rows).unwrap())
}

/// `∂L_ls/∂h_k = -γ (1 - |V| p_k)`.
pub fn grad_ls_logits<F: Real>(p: &[F], gamma: F) -> Result<Vec<F>> {
    ensure_distribution(p)?;
    let v = F::from_usize(p.len()).unwrap();
    Ok(p.iter().map(|&pk| -gamma * (F::one() - v * pk)).collect())
}

/// `∂(Σ p log p)/∂h_k = p_k (log p_k + H(p))`.
pub fn grad_em_logits<F: Real>(p: &[F]) -> Result<Vec<F>> {
    ensure_distribution(p)?;
    let plogp = |q: F| if q > F::zero() { q * q.ln() } else { F::zero() };
    let entropy: F = -p.iter().map(|&q| plogp(q)).sum::<F>();
    Ok(p
        .iter()
        .map(|&pk| if pk > F::zero() { pk * (pk.ln() + entropy) } else { F::zero() })
        .collect())
}

/// `∂(-log p_t)/∂h = p - onehot(t)`.
pub fn grad_nll_logits<F: Real>(p: &[F], target: TokenId) -> Result<Vec<F>> {
    ensure_distribution(p)?;
    let t = target as usize;
    if t >= p.len() {
        return Err(Error::InvalidArgument(format!("target {t} outside {}", p.len())));
    }
    let mut g = p.to_vec();
    g[t] = g[t] - F::one();
    Ok(g)
}

/// Teacher logits with `+γ` on every non-target coordinate, softmaxed.
pub fn di_teacher_distribution<F: Real>(teacher: &[F], target: TokenId, gamma: F) -> Result<Vec<F>> {
    let t = target as usize;
    if t >= teacher.len() {
        return Err(Error::InvalidArgument(format!("target {t} outside {}", teacher.len())));
    }
    let boosted: Vec<F> = teacher
        .iter()
        .enumerate()
        .map(|(j, &z)| if j == t { z } else { z + gamma })
        .collect();
    let mut out = vec![F::zero(); boosted.len()];
    kernels::softmax_row(&boosted, &mut out);
    Ok(out)
}

/// Cross-entropy of the student against the boosted teacher distribution,
/// averaged over rows.
pub fn di_loss<F: Real>(
    student: &Tensor<F>,
    teacher: &Tensor<F>,
    targets: &[TokenId],
    gamma: F,
) -> Result<F> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if gamma < F::zero() {
        return Err(Error::InvalidArgument("DI strength must be ≥ 0".into()));
    }
    teacher.ensure_finite("teacher logits")?;
    let (rows, cols, lp) = rows_log_probs(student)?;
    check_targets(rows, cols, targets)?;
    let mut total = F::zero();
    for (r, &t) in targets.iter().enumerate() {
        let q = di_teacher_distribution(teacher.row(r), t, gamma)?;
        total = total - q.iter().zip(&lp[r * cols..(r + 1) * cols]).map(|(&a, &b)| a * b).sum::<F>();
    }
    Ok(total / F::from_usize(rows).unwrap())
}

/// Mean `KL(teacher ‖ student)` over rows.
pub fn kl_loss<F: Real>(student: &Tensor<F>, teacher: &Tensor<F>) -> Result<F> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape("student/teacher shape mismatch".into()));
    }
    let (rows, _, ls) = rows_log_probs(student)?;
    let (_, _, lt) = rows_log_probs(teacher)?;
    let total: F = lt.iter().zip(&ls).map(|(&a, &b)| a.exp() * (a - b)).sum();
    Ok(total / F::from_usize(rows).unwrap())
}

/// Loss and `∂loss/∂logits` for one block of rows under `cfg`.
///
/// `teacher` is required for DI and ignored otherwise.
pub fn loss_and_grad<F: Real>(
    cfg: &LossConfig,
    logits: &Tensor<F>,
    targets: &[TokenId],
    teacher: Option<&Tensor<F>>,
) -> Result<(F, Tensor<F>)> {
    let (rows, cols, lp) = rows_log_probs(logits)?;
    check_targets(rows, cols, targets)?;
    let inv = F::one() / F::from_usize(rows).unwrap();
    let gamma = F::lit(cfg.gamma.unwrap_or(0.0));
    let mut grad = vec![F::zero(); rows * cols];
    let mut loss = F::zero();
    for r in 0..rows {
        let lrow = &lp[r * cols..(r + 1) * cols];
        let p: Vec<F> = lrow.iter().map(|l| l.exp()).collect();
        let t = targets[r] as usize;
        let g = match cfg.kind {
            LossKind::Em => {
                loss = loss + p.iter().zip(lrow).map(|(&a, &b)| a * b).sum::<F>();
                let entropy = -p.iter().zip(lrow).map(|(&a, &b)| a * b).sum::<F>();
                p.iter().zip(lrow).map(|(&pk, &lk)| pk * (lk + entropy)).collect()
            }
            LossKind::Nll | LossKind::Ga => {
                let mut g = p.clone();
                g[t] = g[t] - F::one();
                if cfg.kind == LossKind::Ga {
                    loss = loss + lrow[t];
                    g.iter().map(|&v| -v).collect()
                } else {
                    loss = loss - lrow[t];
                    g
                }
            }
            LossKind::Ls => {
                loss = loss - gamma * lrow.iter().copied().sum::<F>();
                let v = F::from_usize(cols).unwrap();
                p.iter().map(|&pk| -gamma * (F::one() - v * pk)).collect()
            }
            LossKind::Di => {
                let teacher = teacher
                    .ok_or_else(|| Error::InvalidArgument("DI needs teacher logits".into()))?;
                if teacher.shape() != logits.shape() {
                    return Err(Error::Shape("student/teacher shape mismatch".into()));
                }
                let q = di_teacher_distribution(teacher.row(r), targets[r], gamma)?;
                loss = loss - q.iter().zip(lrow).map(|(&a, &b)| a * b).sum::<F>();
                p.iter().zip(&q).map(|(&a, &b)| a - b).collect::<Vec<F>>()
            }
        };
        for (o, v) in grad[r * cols..(r + 1) * cols].iter_mut().zip(g) {
            *o = v * inv;
        }
    }
    let grad = Tensor::new(logits.shape().to_vec(), grad)?;
    grad.ensure_finite("loss gradient")?;
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grad))
}

/// `KL(teacher ‖ student)` and its gradient `(p_s - p_t)/rows`.
pub fn kl_and_grad<F: Real>(student: &Tensor<F>, teacher: &Tensor<F>) -> Result<(F, Tensor<F>)> {
    let loss = kl_loss(student, teacher)?;
    let (rows, cols, ls) = rows_log_probs(student)?;
    let (_, _, lt) = rows_log_probs(teacher)?;
    let inv = F::one() / F::from_usize(rows).unwrap();
    let g = ls.iter().zip(&lt).map(|(&a, &b)| (a.exp() - b.exp()) * inv).collect();
    Ok((loss, Tensor::new(vec![rows, cols], g)?))
}

/// Tape version of [`em_loss`], kept independent of the closed form.
pub fn em_loss_tape<F: Real>(tape: &mut Tape<F>, logits: Var) -> Result<Var> {
    let rows = tape.value(logits).dims2().0;
    let lp = tape.log_softmax(logits)?;
    let p = tape.softmax(logits)?;
    let plogp = tape.mul(p, lp)?;
    let s = tape.sum(plogp);
    Ok(tape.scale(s, F::one() / F::from_usize(rows).unwrap()))
}

/// Tape version of [`nll_loss`].
pub fn nll_loss_tape<F: Real>(tape: &mut Tape<F>, logits: Var, targets: &[TokenId]) -> Result<Var> {
    let (rows, cols) = tape.value(logits).dims2();
    check_targets(rows, cols, targets)?;
    let lp = tape.log_softmax(logits)?;
    let flat: Vec<usize> = targets.iter().enumerate().map(|(r, &t)| r * cols + t as usize).collect();
    let picked = tape.pick(lp, &flat)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -F::one() / F::from_usize(rows).unwrap()))
}

/// Tape version of [`ls_loss`].
pub fn ls_loss_tape<F: Real>(tape: &mut Tape<F>, logits: Var, gamma: F) -> Result<Var> {
    let rows = tape.value(logits).dims2().0;
    let lp = tape.log_softmax(logits)?;
    let s = tape.sum(lp);
    Ok(tape.scale(s, -gamma / F::from_usize(rows).unwrap()))
}

/// One point of the gradient-scale comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub p: f64,
    /// `|log p + 1|`, the probability-dependent factor of the EM gradient.
    pub em_factor: f64,
    /// `|1/p|`, the factor of the LS and GA gradients.
    pub ls_ga_factor: f64,
    pub ratio: f64,
}

pub fn gradient_scale_profile(grid: &[f64]) -> Result<Vec<ScaleRow>> {
    grid.iter()
        .map(|&p| {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidArgument(format!("grid value {p} outside (0, 1)")));
            }
            let em_factor = (p.ln() + 1.0).abs();
            let ls_ga_factor = 1.0 / p;
            Ok(ScaleRow {
                p,
                em_factor,
                ls_ga_factor,
                ratio: ls_ga_factor / em_factor,
            })
        })
        .collect()
}
