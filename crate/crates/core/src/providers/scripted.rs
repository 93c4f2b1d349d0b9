use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    DecodingContext, LogitProvider, ProviderDescriptor, ProviderError, ProviderKind, Vocabulary,
};
use crate::numerics::{LogitPair, LogitVector};

/// In-process stand-in for a model: step `t` returns row `t` of a fixed
/// table. The perturbed channel adds Gaussian offsets drawn from a stream
/// keyed by `(noise_seed, t)`, so it depends only on the seed, the step and
/// the scale.
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    provider_id: u32,
    vocabulary: Vocabulary,
    rows: Vec<LogitVector>,
    noise_seed: u64,
    noise_scale: f64,
    modulate_by_steps: bool,
}

/// Reference step count for [`ScriptedProvider::with_step_modulation`].
const FULL_NOISE_STEPS: f64 = 1000.0;

impl ScriptedProvider {
    pub fn new(
        provider_id: u32,
        vocabulary: Vocabulary,
        table: Vec<Vec<f64>>,
        noise_seed: u64,
        noise_scale: f64,
    ) -> Result<Self, ProviderError> {
        if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
            return Err(ProviderError::InvalidContext(format!(
                "noise_scale must be finite and >= 0, got {noise_scale}"
            )));
        }
        let rows = table
            .into_iter()
            .enumerate()
            .map(|(row, scores)| {
                if scores.len() != vocabulary.len() {
                    return Err(ProviderError::RowLengthMismatch {
                        row,
                        expected: vocabulary.len(),
                        found: scores.len(),
                    });
                }
                Ok(LogitVector::new(scores)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            provider_id,
            vocabulary,
            rows,
            noise_seed,
            noise_scale,
            modulate_by_steps: false,
        })
    }

    /// Scale the noise by `sqrt(min(T, 1000) / 1000)` where `T` is the
    /// context's `noise_steps`.
    pub fn with_step_modulation(mut self) -> Self {
        self.modulate_by_steps = true;
        self
    }

    pub fn num_steps(&self) -> usize {
        self.rows.len()
    }

    fn effective_scale(&self, noise_steps: u32) -> f64 {
        if self.modulate_by_steps {
            let frac = f64::from(noise_steps).min(FULL_NOISE_STEPS) / FULL_NOISE_STEPS;
            self.noise_scale * frac.sqrt()
        } else {
            self.noise_scale
        }
    }

    fn perturb(&self, step: usize, original: &LogitVector, scale: f64) -> LogitVector {
        let mut rng = ChaCha20Rng::seed_from_u64(self.noise_seed);
        rng.set_stream(step as u64);
        let noisy = original
            .as_slice()
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + scale * z
            })
            .collect();
        LogitVector::new(noisy).expect("finite logits plus finite noise")
    }
}

impl LogitProvider for ScriptedProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            provider_id: self.provider_id,
            kind: ProviderKind::Scripted,
            endpoint_or_path: format!("scripted:{}", self.provider_id),
            vocabulary_fingerprint: self.vocabulary.fingerprint(),
        }
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn next_logits(&mut self, context: &DecodingContext) -> Result<LogitPair, ProviderError> {
        let step = context.step();
        let original = self
            .rows
            .get(step)
            .ok_or(ProviderError::TraceExhausted {
                provider_id: self.provider_id,
                step,
            })?
            .clone();
        if context.perturbation.is_none() {
            return Ok(LogitPair::unperturbed(original));
        }
        let scale = self.effective_scale(context.perturbation.noise_steps);
        let perturbed = self.perturb(step, &original, scale);
        Ok(LogitPair::new(original, perturbed)?)
    }
}
