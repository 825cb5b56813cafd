//! Pre-norm decoder-only forward pass recorded on a [`Tape`].

use super::params::ModelParameters;
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Tape handles produced by one forward pass.
pub struct Forward {
    /// One leaf per parameter tensor, in layout order.
    pub params: Vec<Var>,
    /// `[seq_len × vocab]`; row `t` scores the token at position `t + 1`.
    pub logits: Var,
    /// Attention probabilities per layer and head, when requested.
    pub attention: Vec<Vec<Var>>,
}

pub(crate) fn check_tokens<F: Real>(params: &ModelParameters<F>, tokens: &[TokenId]) -> Result<()> {
    let cfg = params.config();
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > cfg.context_len {
        return Err(Error::InvalidArgument(format!(
            "sequence of {} tokens exceeds context length {}",
            tokens.len(),
            cfg.context_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub fn forward_tape<F: Real>(
    tape: &mut Tape<F>,
    params: &ModelParameters<F>,
    tokens: &[TokenId],
    keep_attention: bool,
) -> Result<Forward> {
    check_tokens(params, tokens)?;
    let cfg = params.config();
    let layout = params.layout();
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();

    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.gather(vars[layout.tok_emb], &ids)?;
    let pos = tape.gather(vars[layout.pos_emb], &positions)?;
    let mut x = tape.add(tok, pos)?;

    let scale = F::one() / F::from_usize(cfg.d_head()).unwrap().sqrt();
    let mut attention = Vec::new();
    for slots in &layout.layers {
        let h = tape.layer_norm(x, vars[slots.ln1_g], vars[slots.ln1_b])?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut attn_out: Option<Var> = None;
        for head in 0..cfg.n_heads {
            let q = tape.matmul(h, vars[slots.wq[head]], false)?;
            let k = tape.matmul(h, vars[slots.wk[head]], false)?;
            let v = tape.matmul(h, vars[slots.wv[head]], false)?;
            let scores = tape.matmul(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.causal_softmax(scores)?;
            if keep_attention {
                heads.push(probs);
            }
            let ctx = tape.matmul(probs, v, false)?;
            let out = tape.matmul(ctx, vars[slots.wo[head]], false)?;
            attn_out = Some(match attn_out {
                Some(acc) => tape.add(acc, out)?,
                None => out,
            });
        }
        attention.push(heads);
        x = tape.add(x, attn_out.expect("n_heads >= 1"))?;

        let h = tape.layer_norm(x, vars[slots.ln2_g], vars[slots.ln2_b])?;
        let m = tape.matmul(h, vars[slots.fc_w], false)?;
        let m = tape.add_row(m, vars[slots.fc_b])?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, vars[slots.proj_w], false)?;
        let m = tape.add_row(m, vars[slots.proj_b])?;
        x = tape.add(x, m)?;
    }
    let h = tape.layer_norm(x, vars[layout.lnf_g], vars[layout.lnf_b])?;
    let logits = tape.matmul(h, vars[layout.tok_emb], true)?;
    Ok(Forward {
        params: vars,
        logits,
        attention,
    })
}

/// Teacher-forced logits `[seq_len × vocab]`.
pub fn forward_logits<F: Real>(params: &ModelParameters<F>, tokens: &[TokenId]) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let fwd = forward_tape(&mut tape, params, tokens, false)?;
    let logits = tape.value(fwd.logits).clone();
    logits.ensure_finite("logits")?;
    Ok(logits)
}

/// Causal, row-stochastic attention matrix of one head: softmax of the
/// scaled key–query inner products.
pub fn attention_pattern<F: Real>(
    params: &ModelParameters<F>,
    tokens: &[TokenId],
    layer: usize,
    head: usize,
) -> Result<Tensor<F>> {
    let cfg = params.config();
    if layer >= cfg.n_layers || head >= cfg.n_heads {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} / head {head} outside {} layers x {} heads",
            cfg.n_layers, cfg.n_heads
        )));
    }
    let mut tape = Tape::new();
    let fwd = forward_tape(&mut tape, params, tokens, true)?;
    Ok(tape.value(fwd.attention[layer][head]).clone())
}
