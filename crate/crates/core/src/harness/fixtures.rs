//! Deterministic fixtures: random provider tables and the golden trace.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::decoder::{generate, DecodeError, EnsembleConfig, Prompt};
use crate::providers::{
    LogitProvider, PerturbationKind, PerturbationSpec, ProviderError, ScriptedProvider, Trace,
    TraceRecorder,
    Vocabulary,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoldenSpec {
    pub num_models: usize,
    pub steps: usize,
    pub vocab_size: usize,
    pub noise_scale: f64,
    pub noise_steps: u32,
    pub seed: u64,
}

impl Default for GoldenSpec {
    fn default() -> Self {
        Self {
            num_models: 3,
            steps: 64,
            vocab_size: 32,
            noise_scale: 0.5,
            noise_steps: 500,
            seed: 2024,
        }
    }
}

pub fn token_vocabulary(size: usize) -> Result<Vocabulary, ProviderError> {
    Vocabulary::new((0..size).map(|i| format!(" tok{i}")).collect())
}

/// Logit rows: Gaussian background with a random boost on one token so
/// that models differ in confidence from step to step.
pub fn random_table<R: Rng>(rng: &mut R, steps: usize, vocab_size: usize) -> Vec<Vec<f64>> {
    let background = Normal::new(0.0, 1.5).expect("valid normal");
    (0..steps)
        .map(|_| {
            let mut row: Vec<f64> = (0..vocab_size).map(|_| background.sample(rng)).collect();
            let peak = rng.random_range(0..vocab_size);
            row[peak] += rng.random_range(0.0..8.0);
            row
        })
        .collect()
}

pub fn scripted_ensemble(spec: &GoldenSpec) -> Result<Vec<ScriptedProvider>, ProviderError> {
    let vocab = token_vocabulary(spec.vocab_size)?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    (0..spec.num_models)
        .map(|m| {
            let table = random_table(&mut rng, spec.steps, spec.vocab_size);
            let noise_seed = rng.random();
            Ok(ScriptedProvider::new(m as u32, vocab.clone(), table, noise_seed, spec.noise_scale)?
                .with_step_modulation())
        })
        .collect()
}

pub fn golden_prompt(spec: &GoldenSpec) -> Prompt {
    Prompt {
        tokens: vec![0, 1, 2],
        input_id: "golden-image".into(),
        perturbation: PerturbationSpec {
            kind: PerturbationKind::ProviderNative,
            noise_steps: spec.noise_steps,
        },
    }
}

/// Records a full-length greedy decode of a scripted ensemble. Replaying the
/// result with [`golden_prompt`] (or any prompt whose perturbation is not
/// `none`) reproduces the recorded pairs exactly.
pub fn golden_trace(spec: &GoldenSpec, config: &EnsembleConfig) -> Result<Trace, DecodeError> {
    let providers = scripted_ensemble(spec)?;
    let vocab = providers[0].vocabulary().clone();
    let recorder = TraceRecorder::new(vocab, config.alpha, spec.num_models);
    let mut wrapped: Vec<_> = providers
        .into_iter()
        .enumerate()
        .map(|(m, p)| recorder.wrap(p, m))
        .collect();
    let config = EnsembleConfig {
        max_new_tokens: spec.steps,
        stop_token_ids: Default::default(),
        ..config.clone()
    };
    generate(&mut wrapped, &golden_prompt(spec), &config)?;
    Ok(recorder.finish()?)
}
