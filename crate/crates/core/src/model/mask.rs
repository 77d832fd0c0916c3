//! Attention patterns for the encoder, decoder and compression-token runs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskKind {
    /// Every position sees itself and everything before it.
    Causal,
    /// Every position sees every position.
    Full,
    /// Causal over the context followed by causally appended compression tokens.
    CompTokCausal,
    /// Causal context; compression tokens see the whole context and each other.
    CompTokBidirectional,
}

/// Boolean `n x n` matrix where `allowed[i][j]` means query `i` may attend
/// to key `j`. Indices are zero-based here.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    context_len: usize,
    comp_len: usize,
    allowed: Arc<[bool]>,
}

impl AttentionMask {
    pub fn build(kind: MaskKind, context_len: usize, comp_len: usize) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::InvalidArgument("mask needs at least one context position".into()));
        }
        if comp_len > 0 && matches!(kind, MaskKind::Causal | MaskKind::Full) {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} mask cannot carry {comp_len} compression positions"
            )));
        }
        let l = context_len;
        let n = l + comp_len;
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[i * n + j] = match kind {
                    MaskKind::Full => true,
                    MaskKind::Causal | MaskKind::CompTokCausal => j <= i,
                    MaskKind::CompTokBidirectional => {
                        if i < l {
                            j <= i
                        } else {
                            true
                        }
                    }
                };
            }
        }
        Ok(AttentionMask { kind, context_len, comp_len, allowed: allowed.into() })
    }

    pub fn causal(len: usize) -> Result<Self> {
        Self::build(MaskKind::Causal, len, 0)
    }

    pub fn full(len: usize) -> Result<Self> {
        Self::build(MaskKind::Full, len, 0)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn comp_len(&self) -> usize {
        self.comp_len
    }

    /// Side length of the square matrix.
    pub fn len(&self) -> usize {
        self.context_len + self.comp_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len() + key]
    }

    pub fn allowed(&self) -> &Arc<[bool]> {
        &self.allowed
    }

    /// Keys visible from `query`, zero-based.
    pub fn visible(&self, query: usize) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.allows(query, k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(m: &AttentionMask) -> Vec<String> {
        (0..m.len())
            .map(|i| (0..m.len()).map(|j| if m.allows(i, j) { '1' } else { '0' }).collect())
            .collect()
    }

    #[test]
    fn causal_rows() {
        let m = AttentionMask::build(MaskKind::Causal, 3, 0).unwrap();
        assert_eq!(rows(&m), vec!["100", "110", "111"]);
    }

    #[test]
    fn full_everywhere() {
        let m = AttentionMask::full(4).unwrap();
        assert!(rows(&m).iter().all(|r| r == "1111"));
    }

    #[test]
    fn bidirectional_compression_tokens() {
        let m = AttentionMask::build(MaskKind::CompTokBidirectional, 3, 2).unwrap();
        // 1-based positions 4 and 5 see everything; position 2 sees {1, 2}.
        assert_eq!(m.visible(3), vec![0, 1, 2, 3, 4]);
        assert_eq!(m.visible(4), vec![0, 1, 2, 3, 4]);
        assert_eq!(m.visible(1), vec![0, 1]);
        for i in 0..3 {
            assert!((3..5).all(|j| !m.allows(i, j)));
        }
    }

    #[test]
    fn causal_compression_tokens() {
        let m = AttentionMask::build(MaskKind::CompTokCausal, 3, 2).unwrap();
        assert_eq!(m.visible(3), vec![0, 1, 2, 3]);
        assert_eq!(m.visible(4), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn invalid_arguments() {
        assert!(AttentionMask::build(MaskKind::Causal, 3, 1).is_err());
        assert!(AttentionMask::build(MaskKind::Full, 3, 2).is_err());
        assert!(AttentionMask::build(MaskKind::CompTokCausal, 0, 2).is_err());
    }
}
