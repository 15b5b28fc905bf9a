//! Token partition and the hard information-flow mask.
//!
//! The joint attention sequence is `[video tokens (frame-major) ∥ reference
//! tokens]`. Video tokens are tagged as interaction-region (HOI) or
//! background. The hard mask is a rule over those three groups, evaluated
//! as a predicate per (query, key) pair — it is never materialized as a
//! dense matrix, so its memory stays linear in the token count.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenGroup {
    /// Video token inside the hand-object interaction region.
    Hoi,
    /// Video token outside the interaction region.
    Background,
    /// Token from the encoded reference image.
    Reference,
}

/// Partition of the token sequence. Ordering is fixed: video tokens first
/// (frame-major), reference tokens after.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLayout {
    n_video: usize,
    n_ref: usize,
    hoi_flags: Vec<bool>,
}

impl TokenLayout {
    pub fn new(n_video: usize, n_ref: usize, hoi_flags: Vec<bool>) -> Result<Self> {
        if hoi_flags.len() != n_video {
            return Err(Error::invalid(
                "token_layout",
                format!("{} hoi flags for {} video tokens", hoi_flags.len(), n_video),
            ));
        }
        Ok(TokenLayout {
            n_video,
            n_ref,
            hoi_flags,
        })
    }

    /// All-video layout with no interaction tokens and no reference tokens.
    pub fn video_only(n_video: usize) -> Self {
        TokenLayout {
            n_video,
            n_ref: 0,
            hoi_flags: vec![false; n_video],
        }
    }

    pub fn n_video(&self) -> usize {
        self.n_video
    }

    pub fn n_ref(&self) -> usize {
        self.n_ref
    }

    pub fn total(&self) -> usize {
        self.n_video + self.n_ref
    }

    pub fn hoi_flags(&self) -> &[bool] {
        &self.hoi_flags
    }

    pub fn group(&self, token: usize) -> TokenGroup {
        if token >= self.n_video {
            TokenGroup::Reference
        } else if self.hoi_flags[token] {
            TokenGroup::Hoi
        } else {
            TokenGroup::Background
        }
    }

    /// The same video tokens with the reference block removed.
    pub fn without_ref(&self) -> TokenLayout {
        TokenLayout {
            n_video: self.n_video,
            n_ref: 0,
            hoi_flags: self.hoi_flags.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MaskRule {
    AllowAll,
    HoiGate,
}

/// Predicate form of the hard mask. Cheap to clone (shared group tags).
#[derive(Debug, Clone)]
pub struct FlowMask {
    groups: Arc<Vec<TokenGroup>>,
    rule: MaskRule,
}

impl FlowMask {
    /// Unrestricted mask over `n` tokens (every entry allowed).
    pub fn all(n: usize) -> Self {
        FlowMask {
            groups: Arc::new(vec![TokenGroup::Background; n]),
            rule: MaskRule::AllowAll,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// True when query token `q` may attend to key token `k`.
    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        match self.rule {
            MaskRule::AllowAll => true,
            MaskRule::HoiGate => {
                let gq = self.groups[q];
                let gk = self.groups[k];
                !((gq == TokenGroup::Background && gk == TokenGroup::Reference)
                    || (gq == TokenGroup::Reference && gk != TokenGroup::Reference))
            }
        }
    }

    pub fn restricts(&self) -> bool {
        self.rule == MaskRule::HoiGate
    }
}

/// Hard mask rules: background queries never see reference keys, and
/// reference queries see only reference keys (self-regularized). HOI
/// queries are unrestricted.
pub fn build_flow_mask(layout: &TokenLayout) -> FlowMask {
    let groups: Vec<TokenGroup> = (0..layout.total()).map(|i| layout.group(i)).collect();
    FlowMask {
        groups: Arc::new(groups),
        rule: MaskRule::HoiGate,
    }
}
