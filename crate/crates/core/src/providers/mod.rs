//! Logit providers: anything that can hand back an original/perturbed
//! [`LogitPair`] for the next token given a decoding context.
//!
//! Three implementations live here or nearby: [`ScriptedProvider`]
//! (in-process test double), [`ReplayProvider`] (reads a recorded trace)
//! and `RemoteProvider` in [`crate::logit_server`].

mod scripted;
mod trace;

pub use scripted::ScriptedProvider;
pub use trace::{
    format_f64, read_trace, write_trace, RecordingProvider, ReplayProvider, Trace, TraceHeader,
    TraceRecorder, TRACE_VERSION,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::{LogitPair, NumericsError};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("no providers supplied")]
    EmptyInput,
    #[error("provider {provider_id}: vocabulary fingerprint {found} does not match session fingerprint {expected}")]
    VocabularyMismatch {
        provider_id: u32,
        expected: String,
        found: String,
    },
    #[error("provider {provider_id} unavailable: {reason}")]
    ProviderUnavailable { provider_id: u32, reason: String },
    #[error("provider {provider_id}: trace exhausted at step {step}")]
    TraceExhausted { provider_id: u32, step: usize },
    #[error("row {row} has {found} scores, vocabulary has {expected}")]
    RowLengthMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("provider id {0} used twice in one session")]
    DuplicateProviderId(u32),
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("invalid context: {0}")]
    InvalidContext(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered token strings plus a 64-bit fingerprint of that order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    fingerprint: u64,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, ProviderError> {
        if tokens.is_empty() {
            return Err(ProviderError::InvalidContext("empty vocabulary".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(tokens.len());
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(ProviderError::DuplicateToken(t.clone()));
            }
        }
        let fingerprint = fingerprint_tokens(&tokens);
        Ok(Self {
            tokens,
            fingerprint,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn fingerprint_hex(&self) -> String {
        fingerprint_hex(self.fingerprint)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| i as TokenId)
    }

    /// Concatenates token strings; ids outside the vocabulary render as
    /// `<unk:ID>`.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| match self.token(id) {
                Some(t) => t.to_owned(),
                None => format!("<unk:{id}>"),
            })
            .collect()
    }
}

/// First 8 bytes (big-endian) of SHA-256 over each token encoded as an
/// 8-byte little-endian length followed by its UTF-8 bytes.
pub fn fingerprint_tokens(tokens: &[String]) -> u64 {
    let mut hasher = Sha256::new();
    for t in tokens {
        hasher.update((t.len() as u64).to_le_bytes());
        hasher.update(t.as_bytes());
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}

pub fn fingerprint_hex(fp: u64) -> String {
    hex::encode(fp.to_be_bytes())
}

pub fn parse_fingerprint_hex(s: &str) -> Result<u64, ProviderError> {
    let bytes = hex::decode(s)
        .map_err(|e| ProviderError::InvalidContext(format!("bad fingerprint {s:?}: {e}")))?;
    let arr: [u8; 8] = bytes
        .try_into()
        .map_err(|_| ProviderError::InvalidContext(format!("fingerprint {s:?} is not 64 bits")))?;
    Ok(u64::from_be_bytes(arr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    #[default]
    None,
    /// The provider applies its own input noising.
    ProviderNative,
    /// The perturbed channel comes from a recorded trace.
    TraceChannel,
}

/// How the perturbed input is produced. `noise_steps` is the diffusion-style
/// step count `T`; it is passed through to providers untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub noise_steps: u32,
}

impl PerturbationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(kind: PerturbationKind, noise_steps: u32) -> Result<Self, ProviderError> {
        let spec = Self { kind, noise_steps };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let is_none = self.kind == PerturbationKind::None;
        if is_none != (self.noise_steps == 0) {
            return Err(ProviderError::InvalidContext(format!(
                "noise_steps = {} is inconsistent with perturbation kind {:?}",
                self.noise_steps, self.kind
            )));
        }
        Ok(())
    }

    pub fn is_none(&self) -> bool {
        self.kind == PerturbationKind::None
    }
}

/// Everything a provider conditions on for one step.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecodingContext {
    pub prompt_tokens: Vec<TokenId>,
    pub generated_tokens: Vec<TokenId>,
    pub input_id: String,
    pub perturbation: PerturbationSpec,
}

impl DecodingContext {
    /// Index of the token about to be generated.
    pub fn step(&self) -> usize {
        self.generated_tokens.len()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), ProviderError> {
        self.perturbation.validate()?;
        if let Some(bad) = self
            .prompt_tokens
            .iter()
            .chain(&self.generated_tokens)
            .find(|&&t| t as usize >= vocab_size)
        {
            return Err(ProviderError::InvalidContext(format!(
                "token id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Scripted,
    Replay,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub provider_id: u32,
    pub kind: ProviderKind,
    pub endpoint_or_path: String,
    pub vocabulary_fingerprint: u64,
}

/// A backend that scores the next token. Implementations need not be
/// reentrant, but must be movable across threads so a decoding step can fan
/// out to several providers at once.
pub trait LogitProvider: Send {
    fn descriptor(&self) -> ProviderDescriptor;

    fn vocabulary(&self) -> &Vocabulary;

    /// Scores for step `context.step()`. When the context carries no
    /// perturbation the perturbed channel equals the original.
    fn next_logits(&mut self, context: &DecodingContext) -> Result<LogitPair, ProviderError>;
}

impl<P: LogitProvider + ?Sized> LogitProvider for Box<P> {
    fn descriptor(&self) -> ProviderDescriptor {
        (**self).descriptor()
    }

    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn next_logits(&mut self, context: &DecodingContext) -> Result<LogitPair, ProviderError> {
        (**self).next_logits(context)
    }
}

/// Checks that every descriptor carries the same fingerprint and returns it.
pub fn validate_descriptors(descriptors: &[ProviderDescriptor]) -> Result<u64, ProviderError> {
    let first = descriptors.first().ok_or(ProviderError::EmptyInput)?;
    let mut seen = std::collections::BTreeSet::new();
    if let Some(d) = descriptors.iter().find(|d| !seen.insert(d.provider_id)) {
        return Err(ProviderError::DuplicateProviderId(d.provider_id));
    }
    for d in &descriptors[1..] {
        if d.vocabulary_fingerprint != first.vocabulary_fingerprint {
            return Err(ProviderError::VocabularyMismatch {
                provider_id: d.provider_id,
                expected: fingerprint_hex(first.vocabulary_fingerprint),
                found: fingerprint_hex(d.vocabulary_fingerprint),
            });
        }
    }
    Ok(first.vocabulary_fingerprint)
}

/// Confirms all providers share one vocabulary and returns it. Each
/// provider's descriptor must also agree with the vocabulary it reports.
pub fn validate_session<P: LogitProvider>(providers: &[P]) -> Result<Vocabulary, ProviderError> {
    let descriptors: Vec<ProviderDescriptor> = providers.iter().map(|p| p.descriptor()).collect();
    let fp = validate_descriptors(&descriptors)?;
    for (p, d) in providers.iter().zip(&descriptors) {
        let actual = p.vocabulary().fingerprint();
        if actual != fp {
            return Err(ProviderError::VocabularyMismatch {
                provider_id: d.provider_id,
                expected: fingerprint_hex(fp),
                found: fingerprint_hex(actual),
            });
        }
    }
    Ok(providers[0].vocabulary().clone())
}
