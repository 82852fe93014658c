use rand::Rng;

use super::params::{Linear, ParamBuilder};
use crate::diffengine::{Graph, Var, PROB_CLAMP};
use crate::error::{Error, Result};

/// Train/inference switch plus the base seed for dropout masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub seed: u64,
}

impl Mode {
    pub const EVAL: Mode = Mode {
        training: false,
        seed: 0,
    };

    pub fn train(seed: u64) -> Self {
        Self { training: true, seed }
    }

    /// Derives an independent dropout seed for one call site.
    pub(crate) fn site(&self, tag: u64) -> u64 {
        splitmix(self.seed ^ splitmix(tag))
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Residual self-attention sublayer followed by a residual two-layer
/// feed-forward sublayer. No positional encoding and no normalization.
#[derive(Debug, Clone)]
pub(crate) struct TransformerBlock {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub out: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub d: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, d: usize, hidden: usize, heads: usize, dropout: f64) -> Self {
        Self {
            wq: b.glorot(format!("{name}.wq"), &[d, d], d, d),
            wk: b.glorot(format!("{name}.wk"), &[d, d], d, d),
            wv: b.glorot(format!("{name}.wv"), &[d, d], d, d),
            out: b.linear(&format!("{name}.wo"), d, d),
            ff1: b.linear(&format!("{name}.ff1"), d, hidden),
            ff2: b.linear(&format!("{name}.ff2"), hidden, d),
            d,
            heads,
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], h: Var, mode: Mode, tag: u64) -> Result<Var> {
        let width = g.shape(h).get(1).copied().unwrap_or(0);
        if g.shape(h).len() != 2 || width != self.d {
            return Err(Error::dim(format!(
                "transformer block of width {} given {:?}",
                self.d,
                g.shape(h)
            )));
        }
        let q = g.matmul(h, p[self.wq])?;
        let k = g.matmul(h, p[self.wk])?;
        let v = g.matmul(h, p[self.wv])?;
        let a = g.attention(q, k, v, self.heads)?;
        let a = self.out.apply(g, p, a)?;
        let a = g.dropout(a, self.dropout, mode.site(tag * 2), mode.training)?;
        let h = g.add(h, a)?;
        let f = self.ff1.apply(g, p, h)?;
        let f = g.relu(f)?;
        let f = self.ff2.apply(g, p, f)?;
        let f = g.dropout(f, self.dropout, mode.site(tag * 2 + 1), mode.training)?;
        g.add(h, f)
    }
}

/// Per-class attention pooling over time: `Σ_t softmax_t(W_a·h_t)_c · σ(W_p·h_t)_c`.
#[derive(Debug, Clone)]
pub(crate) struct AttentionPool {
    pub prob: Linear,
    pub att: Linear,
}

impl AttentionPool {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, d: usize, classes: usize) -> Self {
        Self {
            prob: b.linear(&format!("{name}.p"), d, classes),
            att: b.linear(&format!("{name}.a"), d, classes),
        }
    }

    /// `[T × d]` sequence to `[C]` clip probabilities.
    pub fn forward(&self, g: &mut Graph, p: &[Var], h: Var) -> Result<Var> {
        let z = self.prob.apply(g, p, h)?;
        let frame_probs = g.sigmoid(z)?;
        let a = self.att.apply(g, p, h)?;
        let a = g.transpose(a)?;
        let a = g.softmax_last(a)?;
        let a = g.transpose(a)?;
        let weighted = g.mul(frame_probs, a)?;
        let out = g.sum_axis(weighted, 0)?;
        // Saturated sigmoids round to exactly 0 or 1 in f64.
        g.clamp(out, PROB_CLAMP, 1.0 - PROB_CLAMP)
    }
}
