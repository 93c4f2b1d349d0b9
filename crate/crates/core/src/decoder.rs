//! The autoregressive loop. Each step fans out to every provider, applies
//! the contrastive transform per model, runs the greedy weighting, picks a
//! token and records what happened.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{
    greedy_optimize, EarlyStop, EnsembleError, GreedyConfig, Renormalize, WeightLedger,
};
use crate::numerics::{argmax, contrastive_probs, LogitPair, NumericsError, ProbVector};
use crate::providers::{
    validate_session, DecodingContext, LogitProvider, PerturbationSpec, ProviderError, TokenId,
};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid strategy parameter: {0}")]
    InvalidStrategyParam(String),
    #[error("fused distribution has no mass to select from")]
    SelectionError,
    #[error("provider {provider_id} returned {found} scores, vocabulary has {expected}")]
    LengthMismatch {
        provider_id: u32,
        expected: usize,
        found: usize,
    },
}

/// Token selection rule applied to the fused distribution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    GreedyArgmax,
    Multinomial,
    TopK { k: usize },
    TopP { p: f64 },
}

impl Strategy {
    pub fn validate(&self) -> Result<(), DecodeError> {
        match *self {
            Strategy::TopK { k: 0 } => Err(DecodeError::InvalidStrategyParam(
                "top_k requires k >= 1".into(),
            )),
            Strategy::TopP { p } if !(p > 0.0 && p <= 1.0) => Err(
                DecodeError::InvalidStrategyParam(format!("top_p requires p in (0, 1], got {p}")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::GreedyArgmax => f.write_str("greedy"),
            Strategy::Multinomial => f.write_str("multinomial"),
            Strategy::TopK { k } => write!(f, "top_k:{k}"),
            Strategy::TopP { p } => write!(f, "top_p:{p}"),
        }
    }
}

/// Parses `greedy`, `multinomial`, `top_k:K` or `top_p:P`.
impl FromStr for Strategy {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DecodeError::InvalidStrategyParam(format!("unrecognized strategy {s:?}"));
        let strategy = match s.split_once(':') {
            None => match s {
                "greedy" | "greedy_argmax" => Strategy::GreedyArgmax,
                "multinomial" => Strategy::Multinomial,
                _ => return Err(bad()),
            },
            Some(("top_k", k)) => Strategy::TopK {
                k: k.parse().map_err(|_| bad())?,
            },
            Some(("top_p", p)) => Strategy::TopP {
                p: p.parse().map_err(|_| bad())?,
            },
            Some(_) => return Err(bad()),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// How a step queries its providers. Both produce identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FanOut {
    #[default]
    Sequential,
    /// One scoped thread per provider.
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// Contrastive strength.
    pub alpha: f64,
    pub greedy: GreedyConfig,
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub stop_token_ids: BTreeSet<TokenId>,
    pub seed: u64,
    pub fan_out: FanOut,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            greedy: GreedyConfig::default(),
            strategy: Strategy::default(),
            max_new_tokens: 64,
            stop_token_ids: BTreeSet::new(),
            seed: 0,
            fan_out: FanOut::default(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(DecodeError::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(DecodeError::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        self.greedy.validate()?;
        self.strategy.validate()
    }
}

/// Everything observed while producing one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Indexed by position after sorting providers by id.
    pub per_model_entropy: Vec<f64>,
    pub ledger: WeightLedger,
    pub fused_entropy: f64,
    pub evaluations: usize,
    pub selected_token: TokenId,
    pub early_stop: EarlyStop,
}

impl StepRecord {
    /// Describes every engine invariant this record violates.
    pub fn violations(&self, renormalize: Renormalize) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.ledger.validate() {
            out.push(format!("step {}: {e}", self.step));
        }
        if self.evaluations != self.ledger.evaluations() {
            out.push(format!(
                "step {}: evaluations {} disagree with ledger rounds {}",
                self.step,
                self.evaluations,
                self.ledger.evaluations()
            ));
        }
        if renormalize == Renormalize::None {
            let best_single = self
                .per_model_entropy
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            if self.fused_entropy > best_single + DOMINANCE_TOLERANCE {
                out.push(format!(
                    "step {}: fused entropy {} exceeds best single model {}",
                    self.step, self.fused_entropy, best_single
                ));
            }
        }
        out
    }
}

/// Slack allowed when comparing fused entropy to the best single model.
pub const DOMINANCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub steps: usize,
    pub entropy_evaluations: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub records: Vec<StepRecord>,
    pub totals: Totals,
}

impl GenerationResult {
    /// One JSON object per step record.
    pub fn write_records_jsonl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Invariant violations across all records plus totals consistency.
    pub fn violations(&self, renormalize: Renormalize) -> Vec<String> {
        let mut out: Vec<String> = self
            .records
            .iter()
            .flat_map(|r| r.violations(renormalize))
            .collect();
        let summed: usize = self.records.iter().map(|r| r.evaluations).sum();
        if summed != self.totals.entropy_evaluations || self.records.len() != self.tokens.len() {
            out.push("totals disagree with records".into());
        }
        out
    }

    pub fn records_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_records_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

/// Initial conditioning for a generation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    pub input_id: String,
    pub perturbation: PerturbationSpec,
}

/// Sampling stream for one step, keyed by `(seed, step)`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn sample_from<R: Rng + ?Sized>(
    candidates: &[usize],
    probs: &[f64],
    rng: &mut R,
) -> Result<TokenId, DecodeError> {
    let weights = candidates.iter().map(|&i| probs[i]);
    let dist = WeightedIndex::new(weights).map_err(|_| DecodeError::SelectionError)?;
    Ok(candidates[dist.sample(rng)] as TokenId)
}

/// Indices by descending probability, ties by ascending index.
fn ranked_indices(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

pub fn select_token<R: Rng + ?Sized>(
    fused: &ProbVector,
    strategy: Strategy,
    rng: &mut R,
) -> Result<TokenId, DecodeError> {
    strategy.validate()?;
    let probs = fused.as_slice();
    match strategy {
        Strategy::GreedyArgmax => argmax(probs)
            .map(|i| i as TokenId)
            .ok_or(DecodeError::SelectionError),
        Strategy::Multinomial => {
            let all: Vec<usize> = (0..probs.len()).collect();
            sample_from(&all, probs, rng)
        }
        Strategy::TopK { k } => {
            let mut idx = ranked_indices(probs);
            idx.truncate(k);
            sample_from(&idx, probs, rng)
        }
        Strategy::TopP { p } => {
            let idx = ranked_indices(probs);
            let mut mass = 0.0;
            let mut keep = 0;
            for &i in &idx {
                mass += probs[i];
                keep += 1;
                if mass >= p {
                    break;
                }
            }
            sample_from(&idx[..keep], probs, rng)
        }
    }
}

fn gather_pairs<P: LogitProvider>(
    providers: &mut [P],
    context: &DecodingContext,
    fan_out: FanOut,
) -> Result<Vec<(u32, LogitPair)>, DecodeError> {
    let mut results: Vec<(u32, Result<LogitPair, ProviderError>)> = match fan_out {
        FanOut::Sequential => providers
            .iter_mut()
            .map(|p| (p.descriptor().provider_id, p.next_logits(context)))
            .collect(),
        FanOut::Concurrent => std::thread::scope(|scope| {
            let handles: Vec<_> = providers
                .iter_mut()
                .map(|p| {
                    scope.spawn(move || (p.descriptor().provider_id, p.next_logits(context)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("provider thread panicked"))
                .collect()
        }),
    };
    results.sort_by_key(|(id, _)| *id);
    results
        .into_iter()
        .map(|(id, r)| r.map(|pair| (id, pair)).map_err(DecodeError::from))
        .collect()
}

/// Produces one token. `vocab_size` must be the validated session
/// vocabulary size.
pub fn decode_step<P: LogitProvider>(
    providers: &mut [P],
    vocab_size: usize,
    context: &DecodingContext,
    config: &EnsembleConfig,
) -> Result<(TokenId, StepRecord), DecodeError> {
    if providers.is_empty() {
        return Err(ProviderError::EmptyInput.into());
    }
    let pairs = gather_pairs(providers, context, config.fan_out)?;
    let per_model = pairs
        .iter()
        .map(|(id, pair)| {
            if pair.len() != vocab_size {
                return Err(DecodeError::LengthMismatch {
                    provider_id: *id,
                    expected: vocab_size,
                    found: pair.len(),
                });
            }
            Ok(contrastive_probs(pair, config.alpha)?)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let outcome = greedy_optimize(&per_model, &config.greedy)?;
    let step = context.step();
    let mut rng = step_rng(config.seed, step);
    let token = select_token(&outcome.fused, config.strategy, &mut rng)?;
    assert!((token as usize) < vocab_size, "selected token outside vocabulary");

    let evaluations = outcome.evaluations();
    let record = StepRecord {
        step,
        per_model_entropy: outcome.per_model_entropy,
        early_stop: outcome.ledger.stop,
        ledger: outcome.ledger,
        fused_entropy: outcome.fused_entropy,
        evaluations,
        selected_token: token,
    };
    Ok((token, record))
}

pub fn generate<P: LogitProvider>(
    providers: &mut [P],
    prompt: &Prompt,
    config: &EnsembleConfig,
) -> Result<GenerationResult, DecodeError> {
    let started = Instant::now();
    config.validate()?;
    let vocabulary = validate_session(providers)?;
    let mut context = DecodingContext {
        prompt_tokens: prompt.tokens.clone(),
        generated_tokens: Vec::new(),
        input_id: prompt.input_id.clone(),
        perturbation: prompt.perturbation,
    };
    context.validate(vocabulary.len())?;

    let mut records = Vec::new();
    for _ in 0..config.max_new_tokens {
        let (token, record) = decode_step(providers, vocabulary.len(), &context, config)?;
        records.push(record);
        context.generated_tokens.push(token);
        if config.stop_token_ids.contains(&token) {
            break;
        }
    }

    let tokens = context.generated_tokens;
    let totals = Totals {
        steps: records.len(),
        entropy_evaluations: records.iter().map(|r| r.evaluations).sum(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(GenerationResult {
        text: vocabulary.detokenize(&tokens),
        tokens,
        records,
        totals,
    })
}
