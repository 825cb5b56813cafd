use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: Vocabulary::SIZE,
            context_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad(format!("all model dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.context_len < 2 {
            return bad(format!("context_len {} < 2", self.context_len));
        }
        Ok(())
    }

    /// Number of learnable scalars implied by the config.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v, c) = (self.d_model, self.d_ff, self.vocab_size, self.context_len);
        let per_layer = 4 * d * d + (d * f + f) + (f * d + d) + 4 * d;
        v * d + c * d + self.n_layers * per_layer + 2 * d
    }
}
