//! Byte-level vocabulary: ids 0..=255 are raw bytes, then BOS and PAD.

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary;

impl Vocabulary {
    pub const BOS: TokenId = 256;
    pub const PAD: TokenId = 257;
    pub const SIZE: usize = 258;

    pub fn encode(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| TokenId::from(b)).collect()
    }

    pub fn encode_with_bos(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(bytes.len() + 1);
        ids.push(Self::BOS);
        ids.extend(bytes.iter().map(|&b| TokenId::from(b)));
        ids
    }

    /// Drops special tokens.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
    }

    pub fn decode_lossy(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode(ids)).into_owned()
    }
}
