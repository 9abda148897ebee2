//! Dual-view cosine scoring and weighted top-k fusion.
//!
//! `s_fused = α·s_global + (1−α)·topk_mean(s_local)`; the loss consumes
//! `logit_scale · s_fused`, while ranking metrics use `s_fused` directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Norm floor for cosine similarity; smaller norms are clamped and counted.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub alpha: f64,
    pub k: usize,
    pub logit_scale: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            k: 8,
            logit_scale: 10.0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.k == 0 || self.k > num_patches {
            return Err(Error::config(format!("k = {} outside 1..={num_patches}", self.k)));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::config("logit_scale must be positive"));
        }
        Ok(())
    }
}

/// Scores of one batch on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ScoreMatrix<'t, T: Scalar> {
    /// `[B, c]`
    pub s_global: Var<'t, T>,
    /// `[B, c, N]`
    pub s_local: Var<'t, T>,
    /// `[B, c]`, before logit scaling.
    pub s_fused: Var<'t, T>,
    /// `[B, c]`, `logit_scale · s_fused`.
    pub logits: Var<'t, T>,
}

/// Cosine similarities of text rows `[c, D_e]` with global `[B, D_e]` and
/// local `[B, N, D_e]` image embeddings. Returns `([B, c], [B, c, N])`.
pub fn cosine_scores<'t, T: Scalar>(
    text: Var<'t, T>,
    img_global: Var<'t, T>,
    img_local: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((
        cosine_global(text, img_global)?,
        cosine_local(text, img_local)?,
    ))
}

fn cosine_global<'t, T: Scalar>(text: Var<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
    let eps = T::lit(COSINE_EPS);
    let t = text.normalize_last(eps).transpose_last2()?;
    Ok(img.normalize_last(eps).matmul(t)?)
}

fn cosine_local<'t, T: Scalar>(text: Var<'t, T>, img: Var<'t, T>) -> Result<Var<'t, T>> {
    let eps = T::lit(COSINE_EPS);
    let t = text.normalize_last(eps).transpose_last2()?;
    // [B, N, D_e] · [D_e, c] -> [B, N, c] -> [B, c, N]
    Ok(img.normalize_last(eps).matmul(t)?.permute(&[0, 2, 1])?)
}

/// Mean of the `k` largest entries along the last axis (ties: lower index first).
pub fn topk_mean<'t, T: Scalar>(values: Var<'t, T>, k: usize) -> Result<Var<'t, T>> {
    Ok(values.topk_mean_last(k)?)
}

/// Weighted fusion of global scores and top-k pooled local scores.
pub fn fuse<'t, T: Scalar>(s_global: Var<'t, T>, s_local: Var<'t, T>, alpha: f64, k: usize) -> Result<Var<'t, T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    // The degenerate weights skip the other view entirely so the result is exact.
    if alpha == 1.0 {
        return Ok(s_global);
    }
    let pooled = topk_mean(s_local, k)?;
    if alpha == 0.0 {
        return Ok(pooled);
    }
    Ok(s_global.scale(T::lit(alpha)).add(pooled.scale(T::lit(1.0 - alpha)))?)
}

/// Full scoring path: global view against `text_global`, local view against `text_local`.
pub fn dual_view_scores<'t, T: Scalar>(
    text_global: Var<'t, T>,
    text_local: Var<'t, T>,
    img_global: Var<'t, T>,
    img_local: Var<'t, T>,
    cfg: &AlignmentConfig,
) -> Result<ScoreMatrix<'t, T>> {
    let s_global = cosine_global(text_global, img_global)?;
    let s_local = cosine_local(text_local, img_local)?;
    let s_fused = fuse(s_global, s_local, cfg.alpha, cfg.k)?;
    let logits = s_fused.scale(T::lit(cfg.logit_scale));
    Ok(ScoreMatrix {
        s_global,
        s_local,
        s_fused,
        logits,
    })
}

/// Pre-scale fused scores `[B, c]` from plain tensors.
pub fn fused_scores<T: Scalar>(
    text_global: &Tensor<T>,
    text_local: &Tensor<T>,
    img_global: &Tensor<T>,
    img_local: &Tensor<T>,
    cfg: &AlignmentConfig,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let s = dual_view_scores(
        tape.constant(text_global),
        tape.constant(text_local),
        tape.constant(img_global),
        tape.constant(img_local),
        cfg,
    )?;
    Ok(s.s_fused.value())
}
