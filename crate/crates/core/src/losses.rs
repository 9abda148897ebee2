//! Training objectives: L1 distillation, semantic consistency, the
//! distribution-balanced loss with optional positive class weighting, a
//! plain BCE baseline, and the two stage sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Shape parameters of the distribution-balanced loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DbLossParams {
    /// Overall lift of the rebalancing weight.
    pub tau: f64,
    pub beta: f64,
    pub mu: f64,
    /// Scale of the class bias.
    pub kappa: f64,
    /// Scale of the negative term.
    pub lambda: f64,
}

impl Default for DbLossParams {
    fn default() -> Self {
        Self {
            tau: 0.1,
            beta: 10.0,
            mu: 0.3,
            kappa: 0.05,
            lambda: 5.0,
        }
    }
}

impl DbLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::config("db loss lambda must be > 0"));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::config("db loss kappa must be >= 0"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("db loss beta must be > 0"));
        }
        if !self.tau.is_finite() || !self.mu.is_finite() {
            return Err(Error::config("db loss tau and mu must be finite"));
        }
        Ok(())
    }
}

/// Frequency group of a class by its training count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

impl Group {
    /// Head above 100 samples, tail below 20, medium in between (inclusive).
    pub fn from_count(n: usize) -> Self {
        if n > 100 {
            Group::Head
        } else if n >= 20 {
            Group::Medium
        } else {
            Group::Tail
        }
    }

    pub const ALL: [Group; 3] = [Group::Head, Group::Medium, Group::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Group::Head => "head",
            Group::Medium => "medium",
            Group::Tail => "tail",
        }
    }
}

/// What to do when a class count makes the class bias undefined (`n_i ∈ {0, n}`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountPolicy {
    /// Clamp to `[1, n−1]` and record a warning.
    Clamp,
    Strict,
}

/// Per-class statistics and every quantity the classification loss derives from them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats<T: Scalar> {
    pub counts: Vec<usize>,
    /// Number of training images.
    pub n: usize,
    /// Rebalancing weights `r_i`.
    pub r: Vec<T>,
    /// Class biases `υ_i`.
    pub upsilon: Vec<T>,
    /// Positive-sample class weights `n_i / max_j n_j`.
    pub pos_weight: Vec<T>,
    pub groups: Vec<Group>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> ClassStats<T> {
    pub fn from_counts(counts: &[usize], n: usize, p: &DbLossParams, policy: CountPolicy) -> Result<Self> {
        p.validate()?;
        if counts.is_empty() {
            return Err(Error::config("class statistics need at least one class"));
        }
        if n < 2 {
            return Err(Error::config(format!("class statistics need at least 2 samples, got {n}")));
        }
        let mut warnings = Vec::new();
        let mut eff = Vec::with_capacity(counts.len());
        for (i, &ni) in counts.iter().enumerate() {
            if ni > n {
                return Err(Error::config(format!("class {i} count {ni} exceeds sample count {n}")));
            }
            if ni == 0 || ni == n {
                match policy {
                    CountPolicy::Strict => {
                        return Err(Error::contract(format!(
                            "class {i} has count {ni} of {n}: its bias is undefined; use the clamping count policy"
                        )))
                    }
                    CountPolicy::Clamp => {
                        let c = ni.clamp(1, n - 1);
                        warnings.push(format!("class {i}: count {ni} clamped to {c}"));
                        log::warn!("class {i}: count {ni} clamped to {c} for the class bias");
                        eff.push(c as f64);
                    }
                }
            } else {
                eff.push(ni as f64);
            }
        }
        let inv_sum: f64 = eff.iter().map(|x| 1.0 / x).sum();
        let nf = n as f64;
        let max_count = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let r = eff
            .iter()
            .map(|&ni| {
                let z = p.beta * ((1.0 / ni) / inv_sum - p.mu);
                T::lit(p.tau + 1.0 / (1.0 + (-z).exp()))
            })
            .collect();
        let upsilon = eff.iter().map(|&ni| T::lit(p.kappa * (nf / ni - 1.0).ln())).collect();
        // Raw counts: clamping only exists to keep the bias finite.
        let pos_weight = counts.iter().map(|&ni| T::lit(ni as f64 / max_count)).collect();
        Ok(Self {
            counts: counts.to_vec(),
            n,
            r,
            upsilon,
            pos_weight,
            groups: counts.iter().map(|&c| Group::from_count(c)).collect(),
            warnings,
        })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn group_sizes(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for g in &self.groups {
            s[Group::ALL.iter().position(|x| x == g).unwrap()] += 1;
        }
        s
    }
}

/// Classification loss variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClsLossKind {
    /// Distribution-balanced loss.
    Db,
    /// Binary cross-entropy with logits (ablation baseline).
    Bce,
}

fn mean_abs_diff<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>, what: &str) -> Result<Var<'t, T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::contract(format!("{what}: shape mismatch {sa:?} vs {sb:?}")));
    }
    Ok(a.sub(b.detach())?.abs().mean_all())
}

/// L1 distillation: batch mean of the per-sample mean absolute difference.
/// The teacher side is detached.
pub fn loss_kd<'t, T: Scalar>(f_cls: Var<'t, T>, f_teacher: Var<'t, T>) -> Result<Var<'t, T>> {
    mean_abs_diff(f_cls, f_teacher, "loss_kd")
}

/// Semantic consistency: mean absolute difference between the learned global
/// text embeddings and the fixed ones (detached).
pub fn loss_sc<'t, T: Scalar>(p_h: Var<'t, T>, p_g: Var<'t, T>) -> Result<Var<'t, T>> {
    mean_abs_diff(p_g, p_h, "loss_sc")
}

fn check_labels<T: Scalar>(scores: &Var<'_, T>, labels: &[bool], classes: usize) -> Result<(usize, usize)> {
    let s = scores.shape();
    if s.len() != 2 || s[1] != classes {
        return Err(Error::contract(format!(
            "scores {s:?} do not match [B, {classes}] class statistics"
        )));
    }
    if labels.len() != s[0] * s[1] {
        return Err(Error::contract(format!(
            "label matrix has {} entries, scores have {}",
            labels.len(),
            s[0] * s[1]
        )));
    }
    Ok((s[0], s[1]))
}

/// Distribution-balanced loss over post-scale scores `[B, c]`.
///
/// Per sample `(1/c)·Σ_i r_i·[y·softplus(−ŵ_i(s−υ_i)) + (1/λ)(1−y)·softplus(λ(s−υ_i))]`
/// with `ŵ_i` the positive class weight when `pos_weighting`, else 1; averaged over the batch.
pub fn db_loss<'t, T: Scalar>(
    scores: Var<'t, T>,
    labels: &[bool],
    stats: &ClassStats<T>,
    p: &DbLossParams,
    pos_weighting: bool,
) -> Result<Var<'t, T>> {
    let (b, c) = check_labels(&scores, labels, stats.classes())?;
    let tape = scores.tape();
    let row = |v: &[T]| tape.constant_from([1, c], v.to_vec());
    let ones = vec![T::one(); c];
    let y: Vec<T> = labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect();
    let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    let z = scores.sub(row(&stats.upsilon)?)?;
    let w = row(if pos_weighting { &stats.pos_weight } else { &ones })?;
    let pos = z.mul(w)?.neg().softplus();
    let lambda = T::lit(p.lambda);
    let neg = z.scale(lambda).softplus().scale(T::one() / lambda);
    let per = pos
        .mul(tape.constant_from([b, c], y)?)?
        .add(neg.mul(tape.constant_from([b, c], not_y)?)?)?
        .mul(row(&stats.r)?)?;
    Ok(per.mean_all())
}

/// Mean binary cross-entropy with logits over `[B, c]`.
pub fn bce_loss<'t, T: Scalar>(scores: Var<'t, T>, labels: &[bool]) -> Result<Var<'t, T>> {
    let c = *scores.shape().last().unwrap_or(&0);
    let (b, c) = check_labels(&scores, labels, c)?;
    let tape = scores.tape();
    let y: Vec<T> = labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect();
    let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    let pos = scores.neg().softplus().mul(tape.constant_from([b, c], y)?)?;
    let neg = scores.softplus().mul(tape.constant_from([b, c], not_y)?)?;
    Ok(pos.add(neg)?.mean_all())
}

/// Classification loss selected by `kind`.
pub fn cls_loss<'t, T: Scalar>(
    kind: ClsLossKind,
    scores: Var<'t, T>,
    labels: &[bool],
    stats: &ClassStats<T>,
    p: &DbLossParams,
    pos_weighting: bool,
) -> Result<Var<'t, T>> {
    match kind {
        ClsLossKind::Db => db_loss(scores, labels, stats, p, pos_weighting),
        ClsLossKind::Bce => bce_loss(scores, labels),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Terms available to a stage objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageParts<'t, T: Scalar> {
    pub cls: Option<Var<'t, T>>,
    pub kd: Option<Var<'t, T>>,
    pub sc: Option<Var<'t, T>>,
}

/// Optional multipliers on the stage terms; all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub kd: f64,
    pub sc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            kd: 1.0,
            sc: 1.0,
        }
    }
}

fn weighted<'t, T: Scalar>(v: Var<'t, T>, w: f64) -> Var<'t, T> {
    if w == 1.0 {
        v
    } else {
        v.scale(T::lit(w))
    }
}

/// `L1 = L_cls + L_kd` (stage one) or `L2 = L_cls + L_sc` (stage two).
pub fn stage_loss<'t, T: Scalar>(stage: Stage, parts: StageParts<'t, T>, weights: &LossWeights) -> Result<Var<'t, T>> {
    let cls = parts.cls.ok_or_else(|| Error::contract("stage loss is missing L_cls"))?;
    let other = match stage {
        Stage::One => weighted(parts.kd.ok_or_else(|| Error::contract("stage-1 loss is missing L_kd"))?, weights.kd),
        Stage::Two => weighted(parts.sc.ok_or_else(|| Error::contract("stage-2 loss is missing L_sc"))?, weights.sc),
    };
    Ok(weighted(cls, weights.cls).add(other)?)
}

/// Sum of whichever terms are present (joint training and SC-free ablations).
pub fn sum_parts<'t, T: Scalar>(tape: &'t Tape<T>, parts: StageParts<'t, T>, weights: &LossWeights) -> Result<Var<'t, T>> {
    let mut terms = Vec::new();
    if let Some(v) = parts.cls {
        terms.push(weighted(v, weights.cls));
    }
    if let Some(v) = parts.kd {
        terms.push(weighted(v, weights.kd));
    }
    if let Some(v) = parts.sc {
        terms.push(weighted(v, weights.sc));
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(tape.scalar(T::zero())),
    };
    for &t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn stats(counts: &[usize], n: usize) -> ClassStats<f64> {
        ClassStats::from_counts(counts, n, &DbLossParams::default(), CountPolicy::Clamp).unwrap()
    }

    #[test]
    fn pos_weight_pinning() {
        let s = stats(&[10, 5, 1], 10);
        assert_eq!(s.pos_weight, vec![1.0, 0.5, 0.1]);
        assert_eq!(s.pos_weight.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn bias_fixed_point_at_half() {
        let s = stats(&[50, 10], 100);
        assert_eq!(s.upsilon[0], 0.0);
        // κ·log(n/n_i − 1) with n/n_i − 1 = 9.
        assert!((s.upsilon[1] - 0.05 * 9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn grouping_thresholds() {
        let s = stats(&[200, 50, 5], 400);
        assert_eq!(s.groups, vec![Group::Head, Group::Medium, Group::Tail]);
        assert_eq!(Group::from_count(100), Group::Medium);
        assert_eq!(Group::from_count(101), Group::Head);
        assert_eq!(Group::from_count(20), Group::Medium);
        assert_eq!(Group::from_count(19), Group::Tail);
    }

    #[test]
    fn uniform_counts_give_uniform_weights() {
        let s = stats(&[30, 30, 30, 30], 100);
        assert!(s.r.windows(2).all(|w| w[0] == w[1]));
        assert!(s.pos_weight.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn rebalance_weight_formula() {
        let p = DbLossParams::default();
        let s = stats(&[10, 5, 1], 20);
        let inv_sum = 1.0 / 10.0 + 1.0 / 5.0 + 1.0;
        let want = p.tau + 1.0 / (1.0 + (-p.beta * ((1.0 / 5.0) / inv_sum - p.mu)).exp());
        assert!((s.r[1] - want).abs() < 1e-15);
    }

    #[test]
    fn degenerate_counts() {
        let p = DbLossParams::default();
        assert!(ClassStats::<f64>::from_counts(&[0, 3], 10, &p, CountPolicy::Strict).is_err());
        assert!(ClassStats::<f64>::from_counts(&[10, 3], 10, &p, CountPolicy::Strict).is_err());
        let s = ClassStats::<f64>::from_counts(&[0, 10], 10, &p, CountPolicy::Clamp).unwrap();
        assert_eq!(s.warnings.len(), 2);
        assert!(s.upsilon.iter().all(|u| u.is_finite()));
        assert!(ClassStats::<f64>::from_counts(&[11], 10, &p, CountPolicy::Clamp).is_err());
    }

    #[test]
    fn kd_examples() {
        let tape = Tape::<f64>::new();
        let a = tape.param(&Tensor::from_f64([1, 2], &[1.0, 3.0]).unwrap());
        let b = tape.constant(&Tensor::from_f64([1, 2], &[0.0, 1.0]).unwrap());
        let l = loss_kd(a, b).unwrap();
        assert_eq!(l.item(), 1.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.5, 0.5]);
        let tape = Tape::new();
        let a = tape.constant(&Tensor::from_f64([2, 2], &[1.0, -3.0, 0.5, 2.0]).unwrap());
        assert_eq!(loss_kd(a, a).unwrap().item(), 0.0);
        let c = tape.constant(&Tensor::<f64>::zeros([2, 3]));
        assert!(loss_kd(a, c).is_err());
    }

    #[test]
    fn stage_sums() {
        let tape = Tape::<f64>::new();
        let w = LossWeights::default();
        let parts = StageParts {
            cls: Some(tape.scalar(0.7)),
            kd: Some(tape.scalar(0.3)),
            sc: None,
        };
        assert!((stage_loss(Stage::One, parts, &w).unwrap().item() - 1.0).abs() < 1e-15);
        assert!(stage_loss(Stage::Two, parts, &w).is_err());
        let parts2 = StageParts {
            cls: Some(tape.scalar(0.7)),
            kd: None,
            sc: Some(tape.scalar(0.0)),
        };
        assert_eq!(stage_loss(Stage::Two, parts2, &w).unwrap().item(), 0.7);
        assert!(stage_loss(Stage::One, StageParts { cls: None, ..parts }, &w).is_err());
    }

    #[test]
    fn db_rejects_class_mismatch() {
        let s = stats(&[10, 5, 1], 20);
        let tape = Tape::new();
        let scores = tape.constant(&Tensor::<f64>::zeros([2, 4]));
        assert!(db_loss(scores, &[false; 8], &s, &DbLossParams::default(), true).is_err());
    }
}
