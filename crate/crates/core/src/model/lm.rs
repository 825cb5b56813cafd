use super::decode::generate_greedy;
use super::forward::forward_logits;
use super::params::ModelParameters;
use super::vocab::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Tensor};

/// Anything that scores next tokens autoregressively.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    fn context_len(&self) -> usize;

    /// Teacher-forced logits; row `t` scores the token at position `t + 1`.
    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor<f32>>;

    /// Greedy decode of `max_new` tokens, truncated at the context limit.
    fn generate_greedy(&self, prefix: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty prefix".into()));
        }
        let budget = max_new.min(self.context_len().saturating_sub(prefix.len()));
        let mut seq = prefix.to_vec();
        for _ in 0..budget {
            let logits = self.logits(&seq)?;
            let next = kernels::argmax(logits.row(seq.len() - 1)) as TokenId;
            seq.push(next);
        }
        Ok(seq.split_off(prefix.len()))
    }
}

impl<F: Real> LanguageModel for ModelParameters<F> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn context_len(&self) -> usize {
        self.config().context_len
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor<f32>> {
        Ok(forward_logits(self, tokens)?.cast())
    }

    fn generate_greedy(&self, prefix: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        generate_greedy(self, prefix, max_new)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn context_len(&self) -> usize {
        (**self).context_len()
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor<f32>> {
        (**self).logits(tokens)
    }

    fn generate_greedy(&self, prefix: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        (**self).generate_greedy(prefix, max_new)
    }
}
