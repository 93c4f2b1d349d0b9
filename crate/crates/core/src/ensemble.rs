//! Entropy-guided greedy weighting of an ensemble of next-token
//! distributions.
//!
//! Models are visited from most to least confident. The running fused
//! distribution starts as the most confident model's output; every further
//! model is mixed in through a one-dimensional grid search over
//! `lambda * fused + (1 - lambda) * candidate`, keeping the `lambda` whose
//! mixture has the lowest entropy. The resulting per-model weights are kept
//! in a [`WeightLedger`] together with an audit record of every round.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{entropy, entropy_of_slice, softmax_slice, ProbVector, SUM_TOLERANCE};

/// Two candidate entropies closer than this are considered tied.
pub const ENTROPY_TIE_TOLERANCE: f64 = 1e-12;

/// Grid points within this distance of 1 are snapped to exactly 1.
const GRID_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("no distributions supplied")]
    EmptyInput,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("step size must lie in (0, 1], got {0}")]
    InvalidStep(f64),
    #[error("invalid entropy {value} for model {index}")]
    InvalidEntropy { index: usize, value: f64 },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid greedy config: {0}")]
    InvalidConfig(String),
}

/// What happens when a round selects `lambda = 1` (the candidate adds
/// nothing).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipPolicy {
    #[default]
    ContinueNextModel,
    BreakAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LargestLambda,
    SmallestLambda,
}

/// Optional post-processing of each mixture before its entropy is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renormalize {
    #[default]
    None,
    /// Pass the probability mixture through another softmax.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GreedyConfig {
    pub step_s: f64,
    /// Fused-entropy threshold (nats) below which optimization stops.
    pub epsilon: f64,
    pub skip_policy: SkipPolicy,
    pub tie_break: TieBreak,
    pub renormalize: Renormalize,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self {
            step_s: 0.05,
            epsilon: 0.0,
            skip_policy: SkipPolicy::default(),
            tie_break: TieBreak::default(),
            renormalize: Renormalize::default(),
        }
    }
}

impl GreedyConfig {
    pub fn with_step(mut self, step_s: f64) -> Self {
        self.step_s = step_s;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if !(self.step_s > 0.0 && self.step_s <= 1.0) {
            return Err(EnsembleError::InvalidStep(self.step_s));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(EnsembleError::InvalidConfig(format!(
                "epsilon must be a finite value >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Why optimization (or a single round) ended early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    #[default]
    None,
    Epsilon,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Original index of the model mixed in this round.
    pub candidate: usize,
    pub lambda: f64,
    pub fused_entropy: f64,
    pub evaluations: usize,
    pub early_stop: EarlyStop,
}

/// Per-model simplex weights plus the rounds that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLedger {
    /// Indexed by the model's original position.
    pub weights: Vec<f64>,
    /// Visit order, most confident first.
    pub order: Vec<usize>,
    pub rounds: Vec<RoundRecord>,
    pub stop: EarlyStop,
}

impl WeightLedger {
    /// All weight on `leader`.
    pub fn single(num_models: usize, leader: usize) -> Self {
        let mut weights = vec![0.0; num_models];
        weights[leader] = 1.0;
        Self {
            weights,
            order: vec![leader],
            rounds: Vec::new(),
            stop: EarlyStop::None,
        }
    }

    /// Rescales every assigned weight by `lambda` and gives `1 - lambda` to
    /// `newcomer`, mirroring `fused <- lambda * fused + (1 - lambda) * p`.
    pub fn absorb(&mut self, newcomer: usize, lambda: f64) {
        for w in &mut self.weights {
            *w *= lambda;
        }
        self.weights[newcomer] = 1.0 - lambda;
    }

    /// Weights listed in visit order.
    pub fn weights_in_rank_order(&self) -> Vec<f64> {
        self.order.iter().map(|&i| self.weights[i]).collect()
    }

    pub fn evaluations(&self) -> usize {
        self.rounds.iter().map(|r| r.evaluations).sum()
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        validate_weights(&self.weights)
    }
}

pub fn validate_weights(weights: &[f64]) -> Result<(), EnsembleError> {
    if weights.is_empty() {
        return Err(EnsembleError::EmptyInput);
    }
    let mut sum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if !(0.0..=1.0).contains(&w) {
            return Err(EnsembleError::InvalidWeights(format!(
                "weight {i} = {w} outside [0, 1]"
            )));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(EnsembleError::InvalidWeights(format!(
            "weights sum to {sum}"
        )));
    }
    Ok(())
}

/// Model indices sorted by ascending entropy, ties by ascending index.
pub fn rank_by_uncertainty(entropies: &[f64]) -> Result<Vec<usize>, EnsembleError> {
    if entropies.is_empty() {
        return Err(EnsembleError::EmptyInput);
    }
    if let Some((index, &value)) = entropies
        .iter()
        .enumerate()
        .find(|(_, h)| !h.is_finite() || **h < 0.0)
    {
        return Err(EnsembleError::InvalidEntropy { index, value });
    }
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    Ok(order)
}

/// `{0, s, 2s, ...}` followed by 1. Each point is computed as `i * s`
/// rather than by accumulation.
pub fn lambda_candidates(step_s: f64) -> Result<Vec<f64>, EnsembleError> {
    if !(step_s > 0.0 && step_s <= 1.0) {
        return Err(EnsembleError::InvalidStep(step_s));
    }
    let mut out = Vec::new();
    let mut i = 0u32;
    loop {
        let lambda = f64::from(i) * step_s;
        if lambda > 1.0 - GRID_SNAP {
            break;
        }
        out.push(lambda);
        i += 1;
    }
    out.push(1.0);
    Ok(out)
}

/// `lambda * current + (1 - lambda) * candidate`, optionally re-softmaxed.
pub(crate) fn mix(lambda: f64, current: &[f64], candidate: &[f64], renormalize: Renormalize) -> Vec<f64> {
    let blended: Vec<f64> = current
        .iter()
        .zip(candidate)
        .map(|(&c, &d)| lambda * c + (1.0 - lambda) * d)
        .collect();
    match renormalize {
        Renormalize::None => blended,
        Renormalize::Softmax => softmax_slice(&blended),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub lambda: f64,
    pub fused: ProbVector,
    pub fused_entropy: f64,
    pub evaluations: usize,
}

/// One pairwise grid search between the running fusion and a candidate.
pub fn grid_search_round(
    current: &ProbVector,
    candidate: &ProbVector,
    cfg: &GreedyConfig,
) -> Result<RoundOutcome, EnsembleError> {
    if current.len() != candidate.len() {
        return Err(EnsembleError::LengthMismatch {
            expected: current.len(),
            found: candidate.len(),
        });
    }
    let lambdas = lambda_candidates(cfg.step_s)?;
    let scores: Vec<f64> = lambdas
        .iter()
        .map(|&l| {
            entropy_of_slice(&mix(
                l,
                current.as_slice(),
                candidate.as_slice(),
                cfg.renormalize,
            ))
        })
        .collect();

    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let within = |h: &f64| *h <= best + ENTROPY_TIE_TOLERANCE;
    let pick = match cfg.tie_break {
        TieBreak::LargestLambda => scores.iter().rposition(within),
        TieBreak::SmallestLambda => scores.iter().position(within),
    }
    .expect("candidate list is never empty");

    let lambda = lambdas[pick];
    let fused = ProbVector::from_trusted(mix(
        lambda,
        current.as_slice(),
        candidate.as_slice(),
        cfg.renormalize,
    ));
    Ok(RoundOutcome {
        lambda,
        fused,
        fused_entropy: scores[pick],
        evaluations: lambdas.len(),
    })
}

/// Result of [`greedy_optimize`].
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutcome {
    pub ledger: WeightLedger,
    pub fused: ProbVector,
    pub fused_entropy: f64,
    pub per_model_entropy: Vec<f64>,
}

impl GreedyOutcome {
    pub fn evaluations(&self) -> usize {
        self.ledger.evaluations()
    }
}

pub fn greedy_optimize(
    per_model: &[ProbVector],
    cfg: &GreedyConfig,
) -> Result<GreedyOutcome, EnsembleError> {
    cfg.validate()?;
    let first = per_model.first().ok_or(EnsembleError::EmptyInput)?;
    if let Some(bad) = per_model.iter().find(|p| p.len() != first.len()) {
        return Err(EnsembleError::LengthMismatch {
            expected: first.len(),
            found: bad.len(),
        });
    }

    let per_model_entropy: Vec<f64> = per_model.iter().map(entropy).collect();
    let order = rank_by_uncertainty(&per_model_entropy)?;
    let leader = order[0];

    let mut ledger = WeightLedger::single(per_model.len(), leader);
    let mut fused = per_model[leader].clone();
    let mut fused_entropy = per_model_entropy[leader];

    if fused_entropy < cfg.epsilon {
        ledger.stop = EarlyStop::Epsilon;
    } else {
        for &next in &order[1..] {
            ledger.order.push(next);
            let round = grid_search_round(&fused, &per_model[next], cfg)?;
            let mut record = RoundRecord {
                candidate: next,
                lambda: round.lambda,
                fused_entropy: round.fused_entropy,
                evaluations: round.evaluations,
                early_stop: EarlyStop::None,
            };

            if round.lambda == 1.0 {
                record.fused_entropy = fused_entropy;
                record.early_stop = EarlyStop::Skip;
                ledger.rounds.push(record);
                ledger.stop = EarlyStop::Skip;
                if cfg.skip_policy == SkipPolicy::BreakAll {
                    break;
                }
                continue;
            }

            ledger.absorb(next, round.lambda);
            fused = round.fused;
            fused_entropy = round.fused_entropy;
            if fused_entropy < cfg.epsilon {
                record.early_stop = EarlyStop::Epsilon;
                ledger.rounds.push(record);
                ledger.stop = EarlyStop::Epsilon;
                break;
            }
            ledger.rounds.push(record);
        }
    }

    // Models never visited still belong in the order so every index appears.
    for &i in &order {
        if !ledger.order.contains(&i) {
            ledger.order.push(i);
        }
    }

    Ok(GreedyOutcome {
        ledger,
        fused,
        fused_entropy,
        per_model_entropy,
    })
}

/// Convex combination `sum_i w_i * p_i`, optionally re-softmaxed.
pub fn fuse(
    per_model: &[ProbVector],
    weights: &[f64],
    renormalize: Renormalize,
) -> Result<ProbVector, EnsembleError> {
    let first = per_model.first().ok_or(EnsembleError::EmptyInput)?;
    if weights.len() != per_model.len() {
        return Err(EnsembleError::InvalidWeights(format!(
            "{} weights for {} models",
            weights.len(),
            per_model.len()
        )));
    }
    validate_weights(weights)?;
    let mut acc = vec![0.0; first.len()];
    for (p, &w) in per_model.iter().zip(weights) {
        if p.len() != acc.len() {
            return Err(EnsembleError::LengthMismatch {
                expected: acc.len(),
                found: p.len(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(p.as_slice()) {
            *a += w * x;
        }
    }
    let out = match renormalize {
        Renormalize::None => acc,
        Renormalize::Softmax => softmax_slice(&acc),
    };
    Ok(ProbVector::from_trusted(out))
}

/// [`fuse`] driven by a ledger.
pub fn fuse_with_ledger(
    per_model: &[ProbVector],
    ledger: &WeightLedger,
    renormalize: Renormalize,
) -> Result<ProbVector, EnsembleError> {
    fuse(per_model, &ledger.weights, renormalize)
}
