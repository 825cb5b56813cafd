//! Incremental greedy decoding with per-head key/value caches.

use super::forward::check_tokens;
use super::params::ModelParameters;
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Real;

pub struct Decoder<'a, F: Real> {
    params: &'a ModelParameters<F>,
    /// `[layer][head]` flattened `[t × d_head]` caches.
    keys: Vec<Vec<Vec<F>>>,
    values: Vec<Vec<Vec<F>>>,
    len: usize,
}

impl<'a, F: Real> Decoder<'a, F> {
    pub fn new(params: &'a ModelParameters<F>) -> Self {
        let cfg = params.config();
        let empty = || vec![vec![Vec::new(); cfg.n_heads]; cfg.n_layers];
        Self {
            params,
            keys: empty(),
            values: empty(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<F>> {
        let p = self.params;
        let cfg = p.config();
        let layout = p.layout();
        if self.len >= cfg.context_len {
            return Err(Error::InvalidArgument("context length exhausted".into()));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::InvalidArgument(format!("token id {token} outside vocabulary")));
        }
        let (d, dh, ff) = (cfg.d_model, cfg.d_head(), cfg.d_ff);
        let t = token as usize;
        let mut x: Vec<F> = p.tensor(layout.tok_emb).row(t).to_vec();
        for (xi, &pe) in x.iter_mut().zip(p.tensor(layout.pos_emb).row(self.len)) {
            *xi = *xi + pe;
        }
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut h = vec![F::zero(); d];
        for (l, slots) in layout.layers.iter().enumerate() {
            kernels::layer_norm_row(
                &x,
                p.tensor(slots.ln1_g).data(),
                p.tensor(slots.ln1_b).data(),
                &mut h,
            );
            let mut attn = vec![F::zero(); d];
            for head in 0..cfg.n_heads {
                let mut q = vec![F::zero(); dh];
                let mut k = vec![F::zero(); dh];
                let mut v = vec![F::zero(); dh];
                kernels::matmul_nn(&h, p.tensor(slots.wq[head]).data(), &mut q, 1, d, dh);
                kernels::matmul_nn(&h, p.tensor(slots.wk[head]).data(), &mut k, 1, d, dh);
                kernels::matmul_nn(&h, p.tensor(slots.wv[head]).data(), &mut v, 1, d, dh);
                self.keys[l][head].extend_from_slice(&k);
                self.values[l][head].extend_from_slice(&v);
                let n = self.len + 1;
                let mut scores = vec![F::zero(); n];
                kernels::matmul_nt(&q, &self.keys[l][head], &mut scores, 1, dh, n);
                for s in &mut scores {
                    *s = *s * scale;
                }
                let mut probs = vec![F::zero(); n];
                kernels::softmax_row(&scores, &mut probs);
                let mut ctx = vec![F::zero(); dh];
                kernels::matmul_nn(&probs, &self.values[l][head], &mut ctx, 1, n, dh);
                let mut out = vec![F::zero(); d];
                kernels::matmul_nn(&ctx, p.tensor(slots.wo[head]).data(), &mut out, 1, dh, d);
                for (a, o) in attn.iter_mut().zip(out) {
                    *a = *a + o;
                }
            }
            for (xi, a) in x.iter_mut().zip(attn) {
                *xi = *xi + a;
            }
            kernels::layer_norm_row(
                &x,
                p.tensor(slots.ln2_g).data(),
                p.tensor(slots.ln2_b).data(),
                &mut h,
            );
            let mut m = p.tensor(slots.fc_b).data().to_vec();
            let mut pre = vec![F::zero(); ff];
            kernels::matmul_nn(&h, p.tensor(slots.fc_w).data(), &mut pre, 1, d, ff);
            for (mi, pi) in m.iter_mut().zip(pre) {
                *mi = kernels::gelu(pi + *mi);
            }
            let mut out = vec![F::zero(); d];
            kernels::matmul_nn(&m, p.tensor(slots.proj_w).data(), &mut out, 1, ff, d);
            for ((xi, o), &b) in x.iter_mut().zip(out).zip(p.tensor(slots.proj_b).data()) {
                *xi = *xi + (o + b);
            }
        }
        kernels::layer_norm_row(
            &x,
            p.tensor(layout.lnf_g).data(),
            p.tensor(layout.lnf_b).data(),
            &mut h,
        );
        let mut logits = vec![F::zero(); cfg.vocab_size];
        kernels::matmul_nt(&h, p.tensor(layout.tok_emb).data(), &mut logits, 1, d, cfg.vocab_size);
        self.len += 1;
        Ok(logits)
    }
}

/// Greedy continuation of `prefix`; stops early only at the context limit.
pub fn generate_greedy<F: Real>(
    params: &ModelParameters<F>,
    prefix: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>> {
    check_tokens(params, prefix)?;
    let budget = max_new.min(params.config().context_len - prefix.len());
    let mut out = Vec::with_capacity(budget);
    if budget == 0 {
        return Ok(out);
    }
    let mut dec = Decoder::new(params);
    let mut logits = Vec::new();
    for &t in prefix {
        logits = dec.step(t)?;
    }
    loop {
        let next = kernels::argmax(&logits) as TokenId;
        out.push(next);
        if out.len() == budget {
            break;
        }
        logits = dec.step(next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, ModelConfig};

    #[test]
    fn incremental_matches_full_forward() {
        let p = ModelParameters::init(&ModelConfig::default()).unwrap();
        let tokens: Vec<TokenId> = b"incremental decoding check".iter().map(|&b| b as TokenId).collect();
        let full = forward_logits(&p, &tokens).unwrap();
        let mut dec = Decoder::new(&p);
        for (i, &t) in tokens.iter().enumerate() {
            let step = dec.step(t).unwrap();
            for (a, b) in step.iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-5, "pos {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn greedy_is_argmax_of_forward() {
        let p = ModelParameters::init(&ModelConfig { seed: 5, ..Default::default() }).unwrap();
        let prefix: Vec<TokenId> = vec![256, 104, 105];
        let gen = generate_greedy(&p, &prefix, 6).unwrap();
        assert_eq!(gen.len(), 6);
        let mut seq = prefix.clone();
        for &g in &gen {
            let logits = forward_logits(&p, &seq).unwrap();
            assert_eq!(kernels::argmax(logits.row(seq.len() - 1)) as TokenId, g);
            seq.push(g);
        }
        assert_eq!(generate_greedy(&p, &prefix, 6).unwrap(), gen);
    }

    #[test]
    fn edge_cases() {
        let cfg = ModelConfig { context_len: 8, ..Default::default() };
        let p = ModelParameters::init(&cfg).unwrap();
        assert!(generate_greedy(&p, &[1, 2], 0).unwrap().is_empty());
        assert!(generate_greedy(&p, &[], 3).is_err());
        assert_eq!(generate_greedy(&p, &[1, 2, 3], 100).unwrap().len(), 5);
    }
}
