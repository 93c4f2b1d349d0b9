//! Synthetic benchmark suites with known ground truth.
//!
//! Each model is described by a [`ModelProfile`]: how often it is right,
//! how often a right answer comes out confident, and how uncertain it is
//! otherwise. Per cell (query, step) the generator builds a distribution
//! that puts mass `q` on the model's answer and spreads the rest evenly,
//! choosing `q` so the distribution hits a target entropy. The logits fed
//! to the scripted providers are the log-probabilities.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{generate, DecodeError, EnsembleConfig, Prompt};
use crate::providers::{PerturbationSpec, ProviderError, ScriptedProvider, TokenId, Vocabulary};

/// Entropy (nats) of a confident answer.
pub const CONFIDENT_ENTROPY: f64 = 0.05;

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    /// One-token yes/no answers.
    #[default]
    PopeStyleYesno,
    /// Multi-token answers over a word vocabulary, scored per token.
    CaptionStyle,
}

/// How the models' error cells relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLayout {
    /// Each model's error cells are drawn independently, so they overlap
    /// partially.
    #[default]
    Independent,
    /// No two models are wrong on the same cell.
    Disjoint,
    /// Lower-accuracy models are wrong on a superset of the cells that
    /// higher-accuracy models get wrong.
    Nested,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub correct_rate: f64,
    /// Probability that a correct answer is emitted at [`CONFIDENT_ENTROPY`];
    /// otherwise it is emitted at `entropy_when_wrong`.
    pub confident_when_correct: f64,
    /// Entropy (nats) of wrong and unconfident answers.
    pub entropy_when_wrong: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub kind: BenchmarkKind,
    pub num_queries: usize,
    pub num_models: usize,
    pub profiles: Vec<ModelProfile>,
    #[serde(default)]
    pub error_layout: ErrorLayout,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    /// Tokens per answer for caption-style suites.
    #[serde(default = "default_caption_length")]
    pub caption_length: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab_size() -> usize {
    8
}

fn default_caption_length() -> usize {
    8
}

impl BenchmarkSpec {
    pub fn steps_per_query(&self) -> usize {
        match self.kind {
            BenchmarkKind::PopeStyleYesno => 1,
            BenchmarkKind::CaptionStyle => self.caption_length,
        }
    }

    pub fn validate(&self) -> Result<(), BenchmarkError> {
        let bad = |m: String| Err(BenchmarkError::InvalidSpec(m));
        if self.num_queries == 0 {
            return bad("num_queries must be >= 1".into());
        }
        if self.num_models == 0 || self.profiles.len() != self.num_models {
            return bad(format!(
                "num_models = {} but {} profiles given",
                self.num_models,
                self.profiles.len()
            ));
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must be >= 3".into());
        }
        if self.kind == BenchmarkKind::CaptionStyle && self.caption_length == 0 {
            return bad("caption_length must be >= 1".into());
        }
        let max_h = (self.vocab_size as f64).ln();
        for (i, p) in self.profiles.iter().enumerate() {
            for (name, v) in [
                ("correct_rate", p.correct_rate),
                ("confident_when_correct", p.confident_when_correct),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("profile {i}: {name} = {v} outside [0, 1]"));
                }
            }
            if !(p.entropy_when_wrong > 0.0 && p.entropy_when_wrong < max_h) {
                return bad(format!(
                    "profile {i}: entropy_when_wrong = {} must lie in (0, ln {} = {max_h:.4})",
                    p.entropy_when_wrong, self.vocab_size
                ));
            }
        }
        if self.error_layout == ErrorLayout::Disjoint {
            let total_err: f64 = self.profiles.iter().map(|p| 1.0 - p.correct_rate).sum();
            if total_err > 1.0 + 1e-12 {
                return bad(format!("disjoint layout needs total error rate <= 1, got {total_err}"));
            }
        }
        Ok(())
    }
}

/// One query: ground truth per step and a logit table per model.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkQuery {
    pub input_id: String,
    pub labels: Vec<TokenId>,
    /// `tables[model][step]`.
    pub tables: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSuite {
    pub spec: BenchmarkSpec,
    pub vocabulary: Vocabulary,
    pub queries: Vec<BenchmarkQuery>,
}

impl BenchmarkSuite {
    /// Scripted providers for one query, restricted to `models`. Provider
    /// ids are the model indices.
    pub fn providers(
        &self,
        query: &BenchmarkQuery,
        models: &[usize],
    ) -> Result<Vec<ScriptedProvider>, ProviderError> {
        models
            .iter()
            .map(|&m| {
                ScriptedProvider::new(
                    m as u32,
                    self.vocabulary.clone(),
                    query.tables[m].clone(),
                    self.spec.seed ^ ((m as u64) << 32),
                    0.0,
                )
            })
            .collect()
    }
}

/// Entropy of "mass q on one outcome, the rest spread over k - 1".
fn peaked_entropy(q: f64, k: usize) -> f64 {
    let rest = (1.0 - q) / (k as f64 - 1.0);
    let mut h = 0.0;
    if q > 0.0 {
        h -= q * q.ln();
    }
    if rest > 0.0 {
        h -= (1.0 - q) * rest.ln();
    }
    h
}

/// The `q` in `(1/k, 1)` whose peaked distribution has entropy `target`.
pub fn peak_mass_for_entropy(target: f64, k: usize) -> f64 {
    let (mut lo, mut hi) = (1.0 / k as f64, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if peaked_entropy(mid, k) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn peaked_logits(answer: usize, q: f64, k: usize) -> Vec<f64> {
    let rest = ((1.0 - q) / (k as f64 - 1.0)).ln();
    let mut row = vec![rest; k];
    row[answer] = q.ln();
    row
}

fn error_cells(spec: &BenchmarkSpec, rng: &mut ChaCha20Rng) -> Vec<Vec<bool>> {
    let cells = spec.num_queries * spec.steps_per_query();
    let counts: Vec<usize> = spec
        .profiles
        .iter()
        .map(|p| ((1.0 - p.correct_rate) * cells as f64).round() as usize)
        .collect();
    let mut wrong = vec![vec![false; cells]; spec.num_models];
    let mut shuffled: Vec<usize> = (0..cells).collect();
    shuffled.shuffle(rng);
    let mut offset = 0;
    for (m, &count) in counts.iter().enumerate() {
        let chosen: Vec<usize> = match spec.error_layout {
            ErrorLayout::Nested => shuffled[..count].to_vec(),
            ErrorLayout::Disjoint => {
                let end = (offset + count).min(cells);
                let slice = shuffled[offset..end].to_vec();
                offset = end;
                slice
            }
            ErrorLayout::Independent => {
                let mut own: Vec<usize> = (0..cells).collect();
                own.shuffle(rng);
                own.truncate(count);
                own
            }
        };
        for c in chosen {
            wrong[m][c] = true;
        }
    }
    wrong
}

pub fn gen_benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkSuite, BenchmarkError> {
    spec.validate()?;
    let k = spec.vocab_size;
    let tokens: Vec<String> = match spec.kind {
        BenchmarkKind::PopeStyleYesno => ["yes", "no"]
            .into_iter()
            .map(String::from)
            .chain((0..k - 2).map(|i| format!("<filler{i}>")))
            .collect(),
        BenchmarkKind::CaptionStyle => (0..k).map(|i| format!(" w{i}")).collect(),
    };
    let vocabulary = Vocabulary::new(tokens)?;

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let wrong = error_cells(spec, &mut rng);
    let confident_q = peak_mass_for_entropy(CONFIDENT_ENTROPY, k);
    let hedged_q: Vec<f64> = spec
        .profiles
        .iter()
        .map(|p| peak_mass_for_entropy(p.entropy_when_wrong, k))
        .collect();

    let steps = spec.steps_per_query();
    let mut queries = Vec::with_capacity(spec.num_queries);
    for qi in 0..spec.num_queries {
        let labels: Vec<TokenId> = (0..steps)
            .map(|_| match spec.kind {
                BenchmarkKind::PopeStyleYesno => rng.random_range(0..2u32),
                BenchmarkKind::CaptionStyle => rng.random_range(0..k as u32),
            })
            .collect();
        let mut tables = vec![Vec::with_capacity(steps); spec.num_models];
        for (t, &label) in labels.iter().enumerate() {
            let cell = qi * steps + t;
            for (m, profile) in spec.profiles.iter().enumerate() {
                let is_wrong = wrong[m][cell];
                let confident = !is_wrong && rng.random_bool(profile.confident_when_correct);
                let answer = if !is_wrong {
                    label as usize
                } else {
                    match spec.kind {
                        BenchmarkKind::PopeStyleYesno => 1 - label as usize,
                        BenchmarkKind::CaptionStyle => {
                            (label as usize + rng.random_range(1..k)) % k
                        }
                    }
                };
                let q = if confident { confident_q } else { hedged_q[m] };
                tables[m].push(peaked_logits(answer, q, k));
            }
        }
        queries.push(BenchmarkQuery {
            input_id: format!("query-{qi}"),
            labels,
            tables,
        });
    }
    Ok(BenchmarkSuite {
        spec: spec.clone(),
        vocabulary,
        queries,
    })
}

/// Aggregate result of decoding a whole suite with one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteScore {
    pub models: Vec<usize>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub mean_fused_entropy: f64,
    /// Mean ledger weight per model in `models`.
    pub mean_weights: Vec<f64>,
    pub entropy_evaluations: usize,
    pub steps: usize,
    /// Steps whose most confident model had entropy below `epsilon`.
    pub steps_below_epsilon: usize,
    pub violations: Vec<String>,
    pub wall_time_s: f64,
}

/// Decodes every query using only `models` and scores tokens against the
/// labels.
pub fn evaluate_suite(
    suite: &BenchmarkSuite,
    config: &EnsembleConfig,
    models: &[usize],
    perturbation: PerturbationSpec,
) -> Result<SuiteScore, BenchmarkError> {
    if models.is_empty() || models.iter().any(|&m| m >= suite.spec.num_models) {
        return Err(BenchmarkError::InvalidSpec(format!(
            "model subset {models:?} invalid for {} models",
            suite.spec.num_models
        )));
    }
    let started = std::time::Instant::now();
    let mut config = config.clone();
    config.max_new_tokens = suite.spec.steps_per_query();
    config.stop_token_ids.clear();

    let mut correct = 0;
    let mut total = 0;
    let mut entropy_sum = 0.0;
    let mut weight_sums = vec![0.0; models.len()];
    let mut evaluations = 0;
    let mut below = 0;
    let mut violations = Vec::new();
    for query in &suite.queries {
        let mut providers = suite.providers(query, models)?;
        let prompt = Prompt {
            tokens: Vec::new(),
            input_id: query.input_id.clone(),
            perturbation,
        };
        let out = generate(&mut providers, &prompt, &config)?;
        for (r, &label) in out.records.iter().zip(&query.labels) {
            total += 1;
            correct += usize::from(r.selected_token == label);
            entropy_sum += r.fused_entropy;
            for (acc, w) in weight_sums.iter_mut().zip(&r.ledger.weights) {
                *acc += w;
            }
            let leader = r.per_model_entropy.iter().copied().fold(f64::INFINITY, f64::min);
            below += usize::from(leader < config.greedy.epsilon);
        }
        evaluations += out.totals.entropy_evaluations;
        violations.extend(
            out.violations(config.greedy.renormalize)
                .into_iter()
                .map(|v| format!("{}: {v}", query.input_id)),
        );
    }
    let steps = total;
    Ok(SuiteScore {
        models: models.to_vec(),
        correct,
        total,
        accuracy: correct as f64 / total as f64,
        mean_fused_entropy: entropy_sum / steps as f64,
        mean_weights: weight_sums.iter().map(|w| w / steps as f64).collect(),
        entropy_evaluations: evaluations,
        steps,
        steps_below_epsilon: below,
        violations,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
