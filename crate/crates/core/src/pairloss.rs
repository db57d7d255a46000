//! Dynamic sample-pair weighted loss over a batch of fused embeddings.
//!
//! Embeddings pass through a similarity head (linear layer plus activation)
//! and are L2-normalized; their Gram matrix `S` holds pairwise cosine
//! similarities. Positive pairs (same identity) are weighted by
//! `exp(-α(S - θ))`, negative pairs by `exp(β(S - θ))`, and an orthogonality
//! term `(2 - mean⁺) + 0.3·|mean⁻|` keeps positives together and negatives
//! apart:
//!
//! ```text
//! L = log(1 + L⁺)/α + log(1 + L⁻)/β + O
//! ```

use diffcore::{CustomOp, DiffArray, Tape, Var};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Result};

/// Largest exponent fed to `exp`; beyond it the summand is constant.
pub const EXPONENT_CLAMP: f64 = 60.0;

/// Fallback positive-pair mean when a batch has no positive pair.
pub const FALLBACK_POS_MEAN: f64 = 1.0;
/// Fallback negative-pair mean when a batch has no negative pair.
pub const FALLBACK_NEG_MEAN: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    #[default]
    Sigmoid,
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Positive-pair scale.
    pub alpha: f64,
    /// Negative-pair scale.
    pub beta: f64,
    /// Similarity threshold centring both exponentials.
    pub theta: f64,
    /// When false the loss reduces to the orthogonality term alone.
    pub weighting: bool,
    pub activation: HeadActivation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            theta: 0.6,
            weighting: true,
            activation: HeadActivation::Sigmoid,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(config_err(format!("loss.alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(config_err(format!("loss.beta must be positive, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(config_err(format!("loss.theta must lie in [0, 1], got {}", self.theta)));
        }
        Ok(())
    }
}

/// Ordered-pair membership over a batch; the diagonal belongs to neither.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairMasks {
    size: usize,
    positive: Vec<bool>,
    negative: Vec<bool>,
}

impl PairMasks {
    /// Masks holding exactly the listed ordered pairs.
    pub fn from_pairs(size: usize, positives: &[(usize, usize)], negatives: &[(usize, usize)]) -> Result<Self> {
        let mut positive = vec![false; size * size];
        let mut negative = vec![false; size * size];
        for (list, mask) in [(positives, &mut positive), (negatives, &mut negative)] {
            for &(i, j) in list {
                if i >= size || j >= size || i == j {
                    return Err(invalid(format!("pair ({i}, {j}) is not an off-diagonal pair of a batch of {size}")));
                }
                mask[i * size + j] = true;
            }
        }
        if positive.iter().zip(&negative).any(|(&p, &n)| p && n) {
            return Err(invalid("a pair cannot be both positive and negative"));
        }
        Ok(Self {
            size,
            positive,
            negative,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positive[i * self.size + j]
    }

    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        self.negative[i * self.size + j]
    }

    /// Flat row-major indices of positive pairs.
    pub fn positive_indices(&self) -> Vec<usize> {
        flat_indices(&self.positive)
    }

    pub fn negative_indices(&self) -> Vec<usize> {
        flat_indices(&self.negative)
    }

    pub fn positive_count(&self) -> usize {
        self.positive.iter().filter(|&&b| b).count()
    }

    pub fn negative_count(&self) -> usize {
        self.negative.iter().filter(|&&b| b).count()
    }
}

fn flat_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

pub fn pair_masks<T: PartialEq>(identities: &[T]) -> Result<PairMasks> {
    let b = identities.len();
    if b < 2 {
        return Err(invalid(format!("pair masks need a batch of at least 2, got {b}")));
    }
    let mut positive = vec![false; b * b];
    let mut negative = vec![false; b * b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if identities[i] == identities[j] {
                positive[i * b + j] = true;
            } else {
                negative[i * b + j] = true;
            }
        }
    }
    Ok(PairMasks {
        size: b,
        positive,
        negative,
    })
}

/// Linear projection and activation of the similarity head.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityHead {
    pub weight: DiffArray,
    pub bias: DiffArray,
}

fn activate(tape: &Tape, x: Var, activation: HeadActivation) -> Result<Var> {
    Ok(match activation {
        HeadActivation::Sigmoid => tape.sigmoid(x)?,
        HeadActivation::Relu => tape.relu(x)?,
        HeadActivation::Identity => x,
    })
}

/// `Z = normalize(act(X·Wᵀ + b))`, `S = Z·Zᵀ`.
pub fn similarity_matrix(
    tape: &Tape,
    embeddings: Var,
    weight: Var,
    bias: Var,
    activation: HeadActivation,
) -> Result<Var> {
    let rows = tape.shape(embeddings)[0];
    if rows < 2 {
        return Err(invalid(format!("similarity matrix needs at least 2 rows, got {rows}")));
    }
    let projected = tape.linear(embeddings, weight, bias)?;
    let activated = activate(tape, projected, activation)?;
    let z = tape.l2_normalize(activated)?;
    Ok(tape.matmul_nt(z, z)?)
}

fn clamped_exp(x: f64) -> (f64, bool) {
    if x > EXPONENT_CLAMP {
        (EXPONENT_CLAMP.exp(), true)
    } else {
        (x.exp(), false)
    }
}

/// Exponentially weighted positive and negative sums over a flattened B×B
/// similarity matrix.
pub fn weighted_pair_losses(s: &[f64], masks: &PairMasks, config: &LossConfig) -> Result<(f64, f64)> {
    check_similarity(s, masks)?;
    let pos = masks.positive_indices();
    let neg = masks.negative_indices();
    if pos.is_empty() && neg.is_empty() {
        return Err(invalid("batch has neither positive nor negative pairs"));
    }
    let l_plus = pos
        .iter()
        .map(|&i| clamped_exp(-config.alpha * (s[i] - config.theta)).0)
        .sum();
    let l_minus = neg
        .iter()
        .map(|&i| clamped_exp(config.beta * (s[i] - config.theta)).0)
        .sum();
    Ok((l_plus, l_minus))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalTerm {
    pub value: f64,
    pub mean_pos: f64,
    pub mean_neg: f64,
}

/// `(2 - mean⁺) + 0.3·|mean⁻|`; a missing pair class falls back to
/// mean⁺ = 1 or mean⁻ = 0 with a warning.
pub fn orthogonal_term(s: &[f64], masks: &PairMasks) -> Result<OrthogonalTerm> {
    check_similarity(s, masks)?;
    let mean = |idx: &[usize]| idx.iter().map(|&i| s[i]).sum::<f64>() / idx.len() as f64;
    let pos = masks.positive_indices();
    let neg = masks.negative_indices();
    let mean_pos = if pos.is_empty() {
        warn!("batch has no positive pairs; using mean positive similarity {FALLBACK_POS_MEAN}");
        FALLBACK_POS_MEAN
    } else {
        mean(&pos)
    };
    let mean_neg = if neg.is_empty() {
        warn!("batch has no negative pairs; using mean negative similarity {FALLBACK_NEG_MEAN}");
        FALLBACK_NEG_MEAN
    } else {
        mean(&neg)
    };
    Ok(OrthogonalTerm {
        value: (2.0 - mean_pos) + 0.3 * mean_neg.abs(),
        mean_pos,
        mean_neg,
    })
}

fn check_similarity(s: &[f64], masks: &PairMasks) -> Result<()> {
    let b = masks.size();
    if s.len() != b * b {
        return Err(invalid(format!(
            "similarity matrix has {} entries, masks expect {b}×{b}",
            s.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub total: f64,
    pub l_plus: f64,
    pub l_minus: f64,
    pub ortho: f64,
    pub mean_pos: f64,
    pub mean_neg: f64,
}

/// Combines the pair sums and orthogonality term into the scalar loss.
pub fn combine_terms(l_plus: f64, l_minus: f64, ortho: f64, config: &LossConfig) -> f64 {
    if config.weighting {
        l_plus.ln_1p() / config.alpha + l_minus.ln_1p() / config.beta + ortho
    } else {
        ortho
    }
}

struct LossTail {
    pos: Vec<usize>,
    neg: Vec<usize>,
    config: LossConfig,
    l_plus: f64,
    l_minus: f64,
    mean_neg: f64,
}

impl CustomOp for LossTail {
    fn name(&self) -> &'static str {
        "pair_weighted_loss"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0];
        let cfg = &self.config;
        let mut ds = vec![0.0; s.len()];
        if cfg.weighting {
            for &i in &self.pos {
                let (e, clamped) = clamped_exp(-cfg.alpha * (s[i] - cfg.theta));
                if !clamped {
                    ds[i] -= e / (1.0 + self.l_plus);
                }
            }
            for &i in &self.neg {
                let (e, clamped) = clamped_exp(cfg.beta * (s[i] - cfg.theta));
                if !clamped {
                    ds[i] += e / (1.0 + self.l_minus);
                }
            }
        }
        if !self.pos.is_empty() {
            let w = 1.0 / self.pos.len() as f64;
            for &i in &self.pos {
                ds[i] -= w;
            }
        }
        if !self.neg.is_empty() {
            let sign = if self.mean_neg >= 0.0 { 1.0 } else { -1.0 };
            let w = 0.3 * sign / self.neg.len() as f64;
            for &i in &self.neg {
                ds[i] += w;
            }
        }
        ds.iter_mut().for_each(|d| *d *= g[0]);
        vec![Some(ds)]
    }
}

/// Scalar loss on the tape from a recorded B×B similarity matrix.
pub fn loss_from_similarity(
    tape: &Tape,
    s: Var,
    masks: &PairMasks,
    config: &LossConfig,
) -> Result<(Var, LossDiagnostics)> {
    let values = tape.value(s);
    let (l_plus, l_minus) = weighted_pair_losses(&values, masks, config)?;
    let ortho = orthogonal_term(&values, masks)?;
    let total = combine_terms(l_plus, l_minus, ortho.value, config);
    let tail = LossTail {
        pos: masks.positive_indices(),
        neg: masks.negative_indices(),
        config: config.clone(),
        l_plus,
        l_minus,
        mean_neg: ortho.mean_neg,
    };
    let loss = tape.custom(&[s], vec![1], vec![total], Box::new(tail))?;
    Ok((
        loss,
        LossDiagnostics {
            total,
            l_plus,
            l_minus,
            ortho: ortho.value,
            mean_pos: ortho.mean_pos,
            mean_neg: ortho.mean_neg,
        },
    ))
}

/// Full pair-weighted loss of a batch of embeddings with identity labels.
pub fn total_loss<T: PartialEq>(
    tape: &Tape,
    embeddings: Var,
    identities: &[T],
    config: &LossConfig,
    head_weight: Var,
    head_bias: Var,
) -> Result<(Var, LossDiagnostics)> {
    let rows = tape.shape(embeddings)[0];
    if rows != identities.len() {
        return Err(invalid(format!(
            "{rows} embeddings but {} identity labels",
            identities.len()
        )));
    }
    let masks = pair_masks(identities)?;
    let s = similarity_matrix(tape, embeddings, head_weight, head_bias, config.activation)?;
    loss_from_similarity(tape, s, &masks, config)
}

/// Scalar double-loop evaluation of the same loss, for verification only.
#[allow(clippy::needless_range_loop)]
pub mod oracle {
    use super::{HeadActivation, LossConfig};

    /// Largest batch the oracle accepts.
    pub const MAX_BATCH: usize = 64;

    fn act(x: f64, a: HeadActivation) -> f64 {
        match a {
            HeadActivation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            HeadActivation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            HeadActivation::Identity => x,
        }
    }

    /// Similarity matrix entry by entry. `weight` is row-major out×in.
    pub fn similarity(embeddings: &[Vec<f64>], weight: &[f64], bias: &[f64], activation: HeadActivation) -> Vec<Vec<f64>> {
        let d_out = bias.len();
        let mut z = Vec::new();
        for e in embeddings {
            let d_in = e.len();
            let mut row = vec![0.0; d_out];
            for o in 0..d_out {
                let mut acc = bias[o];
                for i in 0..d_in {
                    acc += weight[o * d_in + i] * e[i];
                }
                row[o] = act(acc, activation);
            }
            let mut norm = 0.0;
            for v in &row {
                norm += v * v;
            }
            let norm = norm.sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
            z.push(row);
        }
        let b = z.len();
        let mut s = vec![vec![0.0; b]; b];
        for i in 0..b {
            for j in 0..b {
                let mut dot = 0.0;
                for k in 0..d_out {
                    dot += z[i][k] * z[j][k];
                }
                s[i][j] = dot;
            }
        }
        s
    }

    /// Loss by explicit loops over ordered pairs.
    pub fn loss_oracle<T: PartialEq>(
        embeddings: &[Vec<f64>],
        identities: &[T],
        config: &LossConfig,
        weight: &[f64],
        bias: &[f64],
    ) -> f64 {
        assert!(embeddings.len() <= MAX_BATCH, "oracle limited to {MAX_BATCH} rows");
        let s = similarity(embeddings, weight, bias, config.activation);
        let b = embeddings.len();
        let (mut lp, mut lm) = (0.0, 0.0);
        let (mut sum_pos, mut n_pos, mut sum_neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                if identities[i] == identities[j] {
                    lp += (-config.alpha * (s[i][j] - config.theta)).min(60.0).exp();
                    sum_pos += s[i][j];
                    n_pos += 1;
                } else {
                    lm += (config.beta * (s[i][j] - config.theta)).min(60.0).exp();
                    sum_neg += s[i][j];
                    n_neg += 1;
                }
            }
        }
        let mean_pos = if n_pos == 0 { 1.0 } else { sum_pos / n_pos as f64 };
        let mean_neg = if n_neg == 0 { 0.0 } else { sum_neg / n_neg as f64 };
        let o = (2.0 - mean_pos) + 0.3 * mean_neg.abs();
        if config.weighting {
            (1.0 + lp).ln() / config.alpha + (1.0 + lm).ln() / config.beta + o
        } else {
            o
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masks_of(ids: &[&str]) -> PairMasks {
        pair_masks(ids).unwrap()
    }

    #[test]
    fn masks_for_same_pair() {
        let m = masks_of(&["a", "a"]);
        assert_eq!(m.positive_indices(), vec![1, 2]);
        assert_eq!(m.negative_count(), 0);
    }

    #[test]
    fn masks_for_distinct_pair() {
        let m = masks_of(&["a", "b"]);
        assert_eq!(m.positive_count(), 0);
        assert_eq!(m.negative_indices(), vec![1, 2]);
    }

    #[test]
    fn masks_for_three() {
        let m = masks_of(&["a", "a", "b"]);
        let pos: Vec<(usize, usize)> = m.positive_indices().iter().map(|i| (i / 3, i % 3)).collect();
        assert_eq!(pos, vec![(0, 1), (1, 0)]);
        assert_eq!(m.negative_count(), 4);
        for i in 0..3 {
            assert!(!m.is_positive(i, i) && !m.is_negative(i, i));
        }
    }

    #[test]
    fn single_row_rejected() {
        assert!(pair_masks(&["a"]).is_err());
    }

    #[test]
    fn pair_sums_at_threshold() {
        let cfg = LossConfig::default();
        let m = masks_of(&["a", "a"]);
        let s = [1.0, cfg.theta, cfg.theta, 1.0];
        let (lp, lm) = weighted_pair_losses(&s, &m, &cfg).unwrap();
        assert_eq!((lp, lm), (2.0, 0.0));

        let m = masks_of(&["a", "b"]);
        let (lp, lm) = weighted_pair_losses(&s, &m, &cfg).unwrap();
        assert_eq!((lp, lm), (0.0, 2.0));
    }

    #[test]
    fn single_pair_at_threshold_weighs_one() {
        let cfg = LossConfig::default();
        let s = [1.0, cfg.theta, cfg.theta, 1.0];
        let m = PairMasks::from_pairs(2, &[(0, 1)], &[]).unwrap();
        assert_eq!(weighted_pair_losses(&s, &m, &cfg).unwrap(), (1.0, 0.0));
        let m = PairMasks::from_pairs(2, &[], &[(1, 0)]).unwrap();
        assert_eq!(weighted_pair_losses(&s, &m, &cfg).unwrap(), (0.0, 1.0));
    }

    #[test]
    fn explicit_pairs_validated() {
        assert!(PairMasks::from_pairs(2, &[(0, 0)], &[]).is_err());
        assert!(PairMasks::from_pairs(2, &[(0, 2)], &[]).is_err());
        assert!(PairMasks::from_pairs(2, &[(0, 1)], &[(0, 1)]).is_err());
    }

    #[test]
    fn orthogonal_term_substitutions() {
        let m = masks_of(&["a", "a", "b", "b"]);
        let mut s = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                s[i * 4 + j] = if m.is_positive(i, j) { 1.0 } else { 0.0 };
            }
        }
        assert_eq!(orthogonal_term(&s, &m).unwrap().value, 1.0);
        let half = vec![0.5; 16];
        let o = orthogonal_term(&half, &m).unwrap().value;
        assert!((o - 1.65).abs() < 1e-15, "{o}");
    }

    #[test]
    fn orthogonal_fallbacks() {
        let m = masks_of(&["a", "a"]);
        let o = orthogonal_term(&[1.0, 0.8, 0.8, 1.0], &m).unwrap();
        assert_eq!(o.mean_neg, FALLBACK_NEG_MEAN);
        let m = masks_of(&["a", "b"]);
        let o = orthogonal_term(&[1.0, 0.8, 0.8, 1.0], &m).unwrap();
        assert_eq!(o.mean_pos, FALLBACK_POS_MEAN);
        assert!((o.value - (1.0 + 0.24)).abs() < 1e-15);
    }

    #[test]
    fn total_from_unit_sums() {
        let cfg = LossConfig::default();
        let l = combine_terms(1.0, 1.0, 1.0, &cfg);
        let expected = 0.5 * 2f64.ln() + 0.02 * 2f64.ln() + 1.0;
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 1.360436).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            theta: 1.5,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn extreme_similarity_is_clamped() {
        let cfg = LossConfig {
            beta: 1e6,
            ..LossConfig::default()
        };
        let m = masks_of(&["a", "b"]);
        let (_, lm) = weighted_pair_losses(&[1.0, 1.0, 1.0, 1.0], &m, &cfg).unwrap();
        assert_eq!(lm, 2.0 * 60f64.exp());
    }
}
