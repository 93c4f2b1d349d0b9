//! Deterministic vector math shared by every layer of the engine: a
//! max-subtracted softmax, Shannon entropy in nats, and the contrastive
//! transform applied to an original/perturbed logit pair.
//!
//! All arithmetic is `f64`. Providers that produce lower-precision scores
//! are widened when a [`LogitVector`] is built.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `sum(p) == 1` accepted by [`ProbVector::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Probabilities below this are treated as exactly zero by [`entropy`].
pub const ZERO_PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("vector is empty")]
    EmptyVector,
    #[error("non-finite value {value} at index {index}")]
    NonFiniteInput { index: usize, value: f64 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("alpha must be >= 0, got {0}")]
    NegativeAlpha(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// Raw, unnormalized per-token scores from one model for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(scores: Vec<f64>) -> Result<Self, NumericsError> {
        if scores.is_empty() {
            return Err(NumericsError::EmptyVector);
        }
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(NumericsError::NonFiniteInput { index, value });
        }
        Ok(Self(scores))
    }

    /// Widens single-precision scores.
    pub fn from_f32(scores: &[f32]) -> Result<Self, NumericsError> {
        Self::new(scores.iter().map(|&s| f64::from(s)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A normalized distribution over the shared vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates that every element lies in `[0, 1]` and the total is one
    /// within [`SUM_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self, NumericsError> {
        if probs.is_empty() {
            return Err(NumericsError::EmptyVector);
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(NumericsError::NonFiniteInput { index: i, value: p });
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(NumericsError::InvalidDistribution(format!(
                    "element {i} = {p} outside [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(NumericsError::InvalidDistribution(format!(
                "elements sum to {sum}"
            )));
        }
        Ok(Self(probs))
    }

    /// Uniform distribution over `len` outcomes.
    pub fn uniform(len: usize) -> Result<Self, NumericsError> {
        if len == 0 {
            return Err(NumericsError::EmptyVector);
        }
        Ok(Self(vec![1.0 / len as f64; len]))
    }

    /// Skips validation. Callers must already hold a convex combination of
    /// valid distributions or a softmax output.
    pub(crate) fn from_trusted(probs: Vec<f64>) -> Self {
        debug_assert!(Self::new(probs.clone()).is_ok());
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl<'de> Deserialize<'de> for ProbVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = Vec::<f64>::deserialize(d)?;
        ProbVector::new(raw).map_err(serde::de::Error::custom)
    }
}

/// Original and perturbed-input scores from one provider for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPair {
    original: LogitVector,
    perturbed: LogitVector,
}

impl LogitPair {
    pub fn new(original: LogitVector, perturbed: LogitVector) -> Result<Self, NumericsError> {
        if original.len() != perturbed.len() {
            return Err(NumericsError::LengthMismatch {
                left: original.len(),
                right: perturbed.len(),
            });
        }
        Ok(Self { original, perturbed })
    }

    /// Pair whose perturbed channel is a copy of the original.
    pub fn unperturbed(original: LogitVector) -> Self {
        Self {
            perturbed: original.clone(),
            original,
        }
    }

    pub fn original(&self) -> &LogitVector {
        &self.original
    }

    pub fn perturbed(&self) -> &LogitVector {
        &self.perturbed
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }
}

pub(crate) fn softmax_slice(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &LogitVector) -> ProbVector {
    ProbVector::from_trusted(softmax_slice(logits.as_slice()))
}

/// Softmax over an unchecked slice, for callers that have not built a
/// [`LogitVector`] yet.
pub fn softmax_checked(scores: &[f64]) -> Result<ProbVector, NumericsError> {
    let logits = LogitVector::new(scores.to_vec())?;
    Ok(softmax(&logits))
}

/// Shannon entropy in nats with `0 * ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_of_slice(p.as_slice())
}

/// Entropy of a raw slice after validating it as a distribution.
pub fn entropy_checked(p: &[f64]) -> Result<f64, NumericsError> {
    let p = ProbVector::new(p.to_vec())?;
    Ok(entropy(&p))
}

pub(crate) fn entropy_of_slice(p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in p {
        if x >= ZERO_PROB_FLOOR {
            acc -= x * x.ln();
        }
    }
    // Rounding can leave a -0.0 or a tiny negative on one-hot inputs.
    acc.max(0.0)
}

/// `softmax((1 + alpha) * original - alpha * perturbed)`.
///
/// Evaluated as `original + alpha * (original - perturbed)`, which is the
/// same combination but returns `original` bit-for-bit when `alpha == 0` or
/// when the two channels are identical.
pub fn contrastive_probs(pair: &LogitPair, alpha: f64) -> Result<ProbVector, NumericsError> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(NumericsError::NegativeAlpha(alpha));
    }
    if !alpha.is_finite() {
        return Err(NumericsError::NonFiniteInput {
            index: 0,
            value: alpha,
        });
    }
    let combined: Vec<f64> = pair
        .original
        .as_slice()
        .iter()
        .zip(pair.perturbed.as_slice())
        .map(|(&o, &p)| o + alpha * (o - p))
        .collect();
    if let Some((index, &value)) = combined.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(NumericsError::NonFiniteInput { index, value });
    }
    Ok(ProbVector::from_trusted(softmax_slice(&combined)))
}

/// Index of the first maximal element.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0..50.0f64, 1..max_len)
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in logits(64)) {
            let p = softmax(&LogitVector::new(v).unwrap());
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() <= SUM_TOLERANCE);
            prop_assert!(p.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn softmax_shift_invariant(v in logits(64), c in -1e3..1e3f64) {
            let a = softmax(&LogitVector::new(v.clone()).unwrap());
            let b = softmax(&LogitVector::new(v.iter().map(|x| x + c).collect()).unwrap());
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn softmax_survives_huge_logits(v in prop::collection::vec(-1e300..1e300f64, 1..16)) {
            let p = softmax(&LogitVector::new(v).unwrap());
            prop_assert!(p.as_slice().iter().all(|x| x.is_finite()));
        }

        #[test]
        fn entropy_bounds(v in logits(64)) {
            let n = v.len();
            let h = entropy(&softmax(&LogitVector::new(v).unwrap()));
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (n as f64).ln() + 1e-9);
        }

        #[test]
        fn identical_channels_ignore_alpha(v in logits(48), alpha in 0.0..20.0f64) {
            let lv = LogitVector::new(v).unwrap();
            let pair = LogitPair::new(lv.clone(), lv.clone()).unwrap();
            prop_assert_eq!(contrastive_probs(&pair, alpha).unwrap(), softmax(&lv));
        }

        #[test]
        fn alpha_zero_is_softmax(o in logits(48), seed in any::<u64>()) {
            let perturbed: Vec<f64> = o.iter().enumerate().map(|(i, x)| x - ((seed >> (i % 60)) & 7) as f64).collect();
            let pair = LogitPair::new(LogitVector::new(o.clone()).unwrap(), LogitVector::new(perturbed).unwrap()).unwrap();
            prop_assert_eq!(contrastive_probs(&pair, 0.0).unwrap(), softmax(&LogitVector::new(o).unwrap()));
        }
    }
}
