//! Toy decoder-only transformer with a selectable-block registry.

mod block;
mod config;
mod decode;
mod forward;
mod lm;
mod params;
mod vocab;

pub use block::{BlockId, BlockKind};
pub use config::ModelConfig;
pub use decode::{generate_greedy, Decoder};
pub use forward::{attention_pattern, forward_logits, forward_tape, Forward};
pub use lm::LanguageModel;
pub use params::{BlockInfo, Layout, ModelParameters, INIT_STD};
pub use vocab::{TokenId, Vocabulary};
