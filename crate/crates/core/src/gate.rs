//! Presence-normalized, channel-wise gating across the two sources of a
//! family.
//!
//! Logits from a small network are offset by `log(π + ε)` and normalized with
//! a softmax over the source axis independently per channel, so an absent
//! source (`π = 0`) receives a weight of order `ε` on every channel.

use candle_core::Tensor;

use crate::conventions::EPS;
use crate::nn::{softmax_last, Mlp, Scope};
use crate::Result;

/// Per-channel gates `(g_a, g_b)`, each `(B, C)`, from logits `(B, C)` and a
/// presence mask `(B, 2)` of 0/1 values.
pub fn presence_gates(logits_a: &Tensor, logits_b: &Tensor, presence: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    let offset = (presence + eps)?.log()?; // (B, 2)
    let a = logits_a.broadcast_add(&offset.narrow(1, 0, 1)?)?;
    let b = logits_b.broadcast_add(&offset.narrow(1, 1, 1)?)?;
    let g = softmax_last(&Tensor::stack(&[a, b], 2)?)?; // (B, C, 2)
    Ok((g.narrow(2, 0, 1)?.squeeze(2)?, g.narrow(2, 1, 1)?.squeeze(2)?))
}

/// Lightweight gate network: `2C → 2C → 2C`, evidence pooled from the two
/// source streams.
#[derive(Clone, Debug)]
pub struct GateNetwork {
    pub mlp: Mlp,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct GateOutput {
    /// Fused tokens `(B, HW, C)`.
    pub fused: Tensor,
    /// Gates `(B, C)` for the first and second source.
    pub gate_a: Tensor,
    pub gate_b: Tensor,
}

impl GateNetwork {
    pub fn new(s: &Scope, width: usize) -> Result<Self> {
        Self::with_evidence(s, 2 * width, width)
    }

    /// Gate network reading `evidence_width` pooled features.
    pub fn with_evidence(s: &Scope, evidence_width: usize, width: usize) -> Result<Self> {
        Ok(GateNetwork {
            mlp: Mlp::new(s, evidence_width, 2 * width, 2 * width)?,
            width,
        })
    }

    /// Logits `(L_a, L_b)` from pooled evidence `(B, 2C)`.
    pub fn logits(&self, evidence: &Tensor) -> Result<(Tensor, Tensor)> {
        let l = self.mlp.forward(evidence)?;
        Ok((l.narrow(1, 0, self.width)?, l.narrow(1, self.width, self.width)?))
    }

    /// Mixes `ya`, `yb` (`(B, HW, C)`) with gates computed from `evidence`.
    pub fn fuse(&self, evidence: &Tensor, ya: &Tensor, yb: &Tensor, presence: &Tensor) -> Result<GateOutput> {
        let (la, lb) = self.logits(evidence)?;
        let (ga, gb) = presence_gates(&la, &lb, presence, EPS)?;
        let fused = (ya.broadcast_mul(&ga.unsqueeze(1)?)? + yb.broadcast_mul(&gb.unsqueeze(1)?)?)?;
        Ok(GateOutput {
            fused,
            gate_a: ga,
            gate_b: gb,
        })
    }
}
