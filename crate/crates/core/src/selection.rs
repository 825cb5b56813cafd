//! Contrastive block scoring, top-k masks and masked updates.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::ForgetSequence;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::LossKind;
use crate::model::{BlockId, Layout, ModelParameters};
use crate::optim::Optimizer;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{batch_gradient, Span, Term};

/// Per-block flattened gradient of one loss over one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSnapshot {
    pub blocks: BTreeMap<BlockId, Vec<f32>>,
    pub kind: LossKind,
    pub batch_seed: u64,
}

impl GradientSnapshot {
    /// Groups full-model gradients by registry block.
    pub fn from_gradients(layout: &Layout, grads: &[Tensor], kind: LossKind, batch_seed: u64) -> Self {
        let blocks = layout
            .blocks()
            .iter()
            .map(|b| {
                let v = b.tensors.iter().flat_map(|&i| grads[i].data().iter().copied()).collect();
                (b.id, v)
            })
            .collect();
        Self {
            blocks,
            kind,
            batch_seed,
        }
    }

    pub fn norm(&self, id: BlockId) -> Option<f64> {
        self.blocks
            .get(&id)
            .map(|v| v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt())
    }
}

/// Indices of the single batch used to estimate the mask.
pub fn mask_batch_indices(n: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, rng::MASK_BATCH));
    idx.truncate(batch_size.max(1).min(n));
    idx
}

/// Gradient of the EM or NLL loss over the continuation of one batch.
pub fn snapshot_gradients(
    params: &ModelParameters,
    batch: &[&ForgetSequence],
    kind: LossKind,
    batch_seed: u64,
    exec: Execution,
) -> Result<GradientSnapshot> {
    if !matches!(kind, LossKind::Em | LossKind::Nll) {
        return Err(Error::InvalidArgument(format!("snapshot of {kind:?} loss")));
    }
    let (_, grads) = batch_gradient(params, batch, Span::Continuation, &Term::loss(kind), None, exec)?;
    Ok(GradientSnapshot::from_gradients(params.layout(), &grads, kind, batch_seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    pub id: BlockId,
    pub cosine: f64,
    /// `|∇EM|₁ / √D`
    pub scaled_l1: f64,
    pub m: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// `M = cos(∇NLL, ∇EM) · |∇EM|₁ / √D` per block, in canonical order.
pub fn score_blocks(em: &GradientSnapshot, nll: &GradientSnapshot) -> Result<Vec<BlockScore>> {
    if em.blocks.len() != nll.blocks.len() || em.blocks.keys().ne(nll.blocks.keys()) {
        return Err(Error::InvalidArgument("snapshots cover different blocks".into()));
    }
    em.blocks
        .iter()
        .map(|(&id, g_em)| {
            let g_nll = &nll.blocks[&id];
            if g_em.len() != g_nll.len() || g_em.is_empty() {
                return Err(Error::Shape(format!("block {id}: {} vs {} values", g_em.len(), g_nll.len())));
            }
            let c = cosine(g_nll, g_em);
            let l1: f64 = g_em.iter().map(|&x| (x as f64).abs()).sum();
            let scaled_l1 = l1 / (g_em.len() as f64).sqrt();
            Ok(BlockScore {
                id,
                cosine: c,
                scaled_l1,
                m: c * scaled_l1,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub selected: BTreeSet<BlockId>,
    pub k: usize,
}

impl SelectionMask {
    pub fn contains(&self, id: BlockId) -> bool {
        self.selected.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Every registry block.
    pub fn full(layout: &Layout) -> Self {
        let selected: BTreeSet<BlockId> = layout.blocks().iter().map(|b| b.id).collect();
        Self {
            k: selected.len(),
            selected,
        }
    }

    /// Per-tensor flags: tensors owned by a selected block.
    pub fn active_tensors(&self, layout: &Layout) -> Vec<bool> {
        (0..layout.tensor_count())
            .map(|i| layout.block_of(i).is_some_and(|b| self.selected.contains(&b)))
            .collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.selected.iter().map(ToString::to_string).collect()
    }
}

fn check_k(k: usize, n: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be ≥ 1".into()));
    }
    if k > n {
        log::warn!("k = {k} exceeds the {n} candidate blocks; selecting all");
    }
    Ok(k.min(n))
}

/// The `k` blocks with the smallest `M`; ties go to the canonically first block.
pub fn build_mask(scores: &[BlockScore], k: usize) -> Result<SelectionMask> {
    let take = check_k(k, scores.len())?;
    let mut order: Vec<&BlockScore> = scores.iter().collect();
    order.sort_by(|a, b| a.m.total_cmp(&b.m).then(a.id.cmp(&b.id)));
    Ok(SelectionMask {
        selected: order.iter().take(take).map(|s| s.id).collect(),
        k,
    })
}

/// Uniformly random `k` blocks.
pub fn random_mask(layout: &Layout, k: usize, seed: u64) -> Result<SelectionMask> {
    let ids: Vec<BlockId> = layout.blocks().iter().map(|b| b.id).collect();
    let take = check_k(k, ids.len())?;
    let mut r = rng::substream(seed, rng::RANDOM_BLOCKS);
    Ok(SelectionMask {
        selected: ids.choose_multiple(&mut r, take).copied().collect(),
        k,
    })
}

/// How blocks are ranked before the top-k cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    /// Direction and magnitude: smallest `M`.
    Contrastive,
    /// Largest `|∇EM|₁/√D`, direction ignored.
    MagnitudeOnly,
    Random,
    Full,
}

/// Mask for `rule`, plus the scores it was derived from (empty for
/// `Random` and `Full`).
pub fn select_blocks(
    params: &ModelParameters,
    batch: &[&ForgetSequence],
    rule: SelectionRule,
    k: usize,
    seed: u64,
    exec: Execution,
) -> Result<(SelectionMask, Vec<BlockScore>)> {
    match rule {
        SelectionRule::Full => Ok((SelectionMask::full(params.layout()), Vec::new())),
        SelectionRule::Random => Ok((random_mask(params.layout(), k, seed)?, Vec::new())),
        SelectionRule::Contrastive | SelectionRule::MagnitudeOnly => {
            let em = snapshot_gradients(params, batch, LossKind::Em, seed, exec)?;
            let nll = snapshot_gradients(params, batch, LossKind::Nll, seed, exec)?;
            let scores = score_blocks(&em, &nll)?;
            let mask = if rule == SelectionRule::Contrastive {
                build_mask(&scores, k)?
            } else {
                let by_magnitude: Vec<BlockScore> =
                    scores.iter().map(|s| BlockScore { m: -s.scaled_l1, ..*s }).collect();
                build_mask(&by_magnitude, k)?
            };
            Ok((mask, scores))
        }
    }
}

/// One optimizer step on the selected blocks only. Everything outside the
/// mask, embeddings and norms included, is left bit-identical.
pub fn masked_update(
    params: &mut ModelParameters,
    mask: &SelectionMask,
    grads: &[Tensor],
    optimizer: &mut Optimizer,
) -> Result<()> {
    let active = mask.active_tensors(params.layout());
    if !active.iter().any(|&a| a) {
        return Ok(());
    }
    optimizer.step(params, grads, &active)
}

/// One line of the selection report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub round: usize,
    pub block: BlockId,
    pub cosine: f64,
    pub scaled_l1: f64,
    pub m: f64,
    pub selected: bool,
}

pub fn selection_records(round: usize, scores: &[BlockScore], mask: &SelectionMask) -> Vec<SelectionRecord> {
    scores
        .iter()
        .map(|s| SelectionRecord {
            round,
            block: s.id,
            cosine: s.cosine,
            scaled_l1: s.scaled_l1,
            m: s.m,
            selected: mask.contains(s.id),
        })
        .collect()
}

pub fn write_jsonl<T: Serialize, W: Write>(out: &mut W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<report>", e))?;
    }
    Ok(())
}
