use std::fmt;

use serde::{Deserialize, Serialize};

/// Kind of a selectable block; declaration order is the canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Wk,
    Wq,
    Wv,
    Wo,
    Cfc,
    Cproj,
}

impl BlockKind {
    pub const ATTENTION: [BlockKind; 4] = [BlockKind::Wk, BlockKind::Wq, BlockKind::Wv, BlockKind::Wo];
    pub const MLP: [BlockKind; 2] = [BlockKind::Cfc, BlockKind::Cproj];

    pub fn is_attention(self) -> bool {
        matches!(self, BlockKind::Wk | BlockKind::Wq | BlockKind::Wv | BlockKind::Wo)
    }

    fn tag(self) -> &'static str {
        match self {
            BlockKind::Wk => "Wk",
            BlockKind::Wq => "Wq",
            BlockKind::Wv => "Wv",
            BlockKind::Wo => "Wo",
            BlockKind::Cfc => "Cfc",
            BlockKind::Cproj => "Cproj",
        }
    }
}

/// A selectable parameter block: one attention matrix of one head, or one
/// MLP projection (weight and bias) of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    pub layer: usize,
    pub kind: BlockKind,
    pub head: Option<usize>,
}

impl BlockId {
    pub fn head(layer: usize, kind: BlockKind, head: usize) -> Self {
        debug_assert!(kind.is_attention());
        Self {
            layer,
            kind,
            head: Some(head),
        }
    }

    pub fn mlp(layer: usize, kind: BlockKind) -> Self {
        debug_assert!(!kind.is_attention());
        Self {
            layer,
            kind,
            head: None,
        }
    }

    /// Parses the canonical rendering, e.g. `L1WoH2` or `L0Cfc`.
    pub fn parse(s: &str) -> Option<Self> {
        let rest = s.strip_prefix('L')?;
        let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
        let layer = rest[..digits].parse().ok()?;
        let rest = &rest[digits..];
        for kind in BlockKind::MLP {
            if rest == kind.tag() {
                return Some(Self::mlp(layer, kind));
            }
        }
        for kind in BlockKind::ATTENTION {
            if let Some(h) = rest.strip_prefix(kind.tag()).and_then(|r| r.strip_prefix('H')) {
                return Some(Self::head(layer, kind, h.parse().ok()?));
            }
        }
        None
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.head {
            Some(h) => write!(f, "L{}{}H{}", self.layer, self.kind.tag(), h),
            None => write!(f, "L{}{}", self.layer, self.kind.tag()),
        }
    }
}

impl Serialize for BlockId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BlockId::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad block id {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_rendering_round_trips() {
        let a = BlockId::head(3, BlockKind::Wo, 2);
        assert_eq!(a.to_string(), "L3WoH2");
        assert_eq!(BlockId::parse("L3WoH2"), Some(a));
        let m = BlockId::mlp(0, BlockKind::Cproj);
        assert_eq!(m.to_string(), "L0Cproj");
        assert_eq!(BlockId::parse("L0Cproj"), Some(m));
        assert_eq!(BlockId::parse("L0Cfc"), Some(BlockId::mlp(0, BlockKind::Cfc)));
        assert_eq!(BlockId::parse("L12WkH11"), Some(BlockId::head(12, BlockKind::Wk, 11)));
        assert_eq!(BlockId::parse("L0Wo"), None);
        assert_eq!(BlockId::parse("X0Cfc"), None);
    }

    #[test]
    fn ordering_is_layer_kind_head() {
        let mut v = [
            BlockId::mlp(0, BlockKind::Cfc),
            BlockId::head(1, BlockKind::Wk, 0),
            BlockId::head(0, BlockKind::Wq, 0),
            BlockId::head(0, BlockKind::Wk, 3),
            BlockId::head(0, BlockKind::Wk, 1),
        ];
        v.sort();
        let names: Vec<String> = v.iter().map(|b| b.to_string()).collect();
        assert_eq!(names, ["L0WkH1", "L0WkH3", "L0WqH0", "L0Cfc", "L1WkH0"]);
    }
}
