//! JSON Lines trace files.
//!
//! Line 1 is a header:
//!
//! ```text
//! {"version":1,"vocab":[...],"fingerprint":"<16 hex>","num_models":N,"alpha":A}
//! ```
//!
//! followed by one line per `(step, model)`:
//!
//! ```text
//! {"step":t,"model":i,"original":[...],"perturbed":[...]}
//! ```
//!
//! Every float is written with 17 significant digits so a read-back yields
//! the identical `f64`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use serde::Deserialize;

use super::{
    DecodingContext, LogitProvider, ProviderDescriptor, ProviderError,
    ProviderKind, Vocabulary,
};
use crate::numerics::{LogitPair, LogitVector};

pub const TRACE_VERSION: u32 = 1;

/// `{:.16e}`: 17 significant digits, enough to round-trip any finite `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_array(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_f64(*v));
    }
    out.push(']');
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub vocab: Vec<String>,
    pub fingerprint: String,
    pub num_models: usize,
    pub alpha: f64,
}

#[derive(Deserialize)]
struct RawRecord {
    step: usize,
    model: usize,
    original: Vec<f64>,
    perturbed: Vec<f64>,
}

/// A fully loaded trace, indexed as `steps[step][model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    vocabulary: Vocabulary,
    alpha: f64,
    num_models: usize,
    steps: Vec<Vec<LogitPair>>,
}

impl Trace {
    pub fn new(
        vocabulary: Vocabulary,
        alpha: f64,
        num_models: usize,
        steps: Vec<Vec<LogitPair>>,
    ) -> Result<Self, ProviderError> {
        if num_models == 0 {
            return Err(ProviderError::InvalidTrace("num_models must be >= 1".into()));
        }
        for (t, row) in steps.iter().enumerate() {
            if row.len() != num_models {
                return Err(ProviderError::InvalidTrace(format!(
                    "step {t} has {} models, expected {num_models}",
                    row.len()
                )));
            }
            if let Some(pair) = row.iter().find(|p| p.len() != vocabulary.len()) {
                return Err(ProviderError::RowLengthMismatch {
                    row: t,
                    expected: vocabulary.len(),
                    found: pair.len(),
                });
            }
        }
        Ok(Self {
            vocabulary,
            alpha,
            num_models,
            steps,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_models(&self) -> usize {
        self.num_models
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn pair(&self, step: usize, model: usize) -> Option<&LogitPair> {
        self.steps.get(step).and_then(|row| row.get(model))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ProviderError> {
        let file = std::fs::File::open(path)?;
        read_trace(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ProviderError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_trace(&mut file, self)?;
        file.flush()?;
        Ok(())
    }
}

pub fn write_trace<W: Write>(w: &mut W, trace: &Trace) -> Result<(), ProviderError> {
    let vocab_json = serde_json::to_string(trace.vocabulary.tokens())
        .map_err(|e| ProviderError::InvalidTrace(e.to_string()))?;
    writeln!(
        w,
        "{{\"version\":{TRACE_VERSION},\"vocab\":{vocab_json},\"fingerprint\":\"{}\",\"num_models\":{},\"alpha\":{}}}",
        trace.vocabulary.fingerprint_hex(),
        trace.num_models,
        format_f64(trace.alpha)
    )?;
    let mut line = String::new();
    for (t, row) in trace.steps.iter().enumerate() {
        for (m, pair) in row.iter().enumerate() {
            line.clear();
            line.push_str(&format!("{{\"step\":{t},\"model\":{m},\"original\":"));
            write_array(&mut line, pair.original().as_slice());
            line.push_str(",\"perturbed\":");
            write_array(&mut line, pair.perturbed().as_slice());
            line.push('}');
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Trace, ProviderError> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| ProviderError::InvalidTrace("missing header".into()))??;
    let header: TraceHeader = serde_json::from_str(&header_line)
        .map_err(|e| ProviderError::InvalidTrace(format!("header: {e}")))?;
    if header.version != TRACE_VERSION {
        return Err(ProviderError::InvalidTrace(format!(
            "unsupported trace version {}",
            header.version
        )));
    }
    let vocabulary = Vocabulary::new(header.vocab.clone())?;
    if vocabulary.fingerprint_hex() != header.fingerprint {
        return Err(ProviderError::VocabularyMismatch {
            provider_id: 0,
            expected: header.fingerprint.clone(),
            found: vocabulary.fingerprint_hex(),
        });
    }

    let mut records: BTreeMap<(usize, usize), LogitPair> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line)
            .map_err(|e| ProviderError::InvalidTrace(format!("line {}: {e}", lineno + 2)))?;
        if rec.model >= header.num_models {
            return Err(ProviderError::InvalidTrace(format!(
                "line {}: model {} >= num_models {}",
                lineno + 2,
                rec.model,
                header.num_models
            )));
        }
        let pair = LogitPair::new(LogitVector::new(rec.original)?, LogitVector::new(rec.perturbed)?)?;
        if records.insert((rec.step, rec.model), pair).is_some() {
            return Err(ProviderError::InvalidTrace(format!(
                "duplicate record for step {} model {}",
                rec.step, rec.model
            )));
        }
    }
    let steps = assemble_steps(records, header.num_models)?;
    Trace::new(vocabulary, header.alpha, header.num_models, steps)
}

fn assemble_steps(
    records: BTreeMap<(usize, usize), LogitPair>,
    num_models: usize,
) -> Result<Vec<Vec<LogitPair>>, ProviderError> {
    let mut steps: Vec<Vec<LogitPair>> = Vec::new();
    for ((step, model), pair) in records {
        if step == steps.len() && model == 0 {
            steps.push(Vec::with_capacity(num_models));
        }
        let row = steps.get_mut(step).filter(|row| row.len() == model).ok_or_else(|| {
            ProviderError::InvalidTrace(format!("missing record before step {step} model {model}"))
        })?;
        row.push(pair);
    }
    if let Some((t, _)) = steps.iter().enumerate().find(|(_, r)| r.len() != num_models) {
        return Err(ProviderError::InvalidTrace(format!("step {t} is incomplete")));
    }
    Ok(steps)
}

/// Serves one model's recorded pairs.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    provider_id: u32,
    trace: Arc<Trace>,
    model: usize,
    source: String,
}

impl ReplayProvider {
    pub fn new(provider_id: u32, trace: Arc<Trace>, model: usize) -> Result<Self, ProviderError> {
        if model >= trace.num_models() {
            return Err(ProviderError::InvalidTrace(format!(
                "model {model} not in trace with {} models",
                trace.num_models()
            )));
        }
        Ok(Self {
            provider_id,
            trace,
            model,
            source: String::from("<memory>"),
        })
    }

    /// One replay provider per model in the trace, ids `0..N`.
    pub fn all(trace: Arc<Trace>) -> Vec<Self> {
        (0..trace.num_models())
            .map(|m| Self::new(m as u32, Arc::clone(&trace), m).expect("model in range"))
            .collect()
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }
}

impl LogitProvider for ReplayProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            provider_id: self.provider_id,
            kind: ProviderKind::Replay,
            endpoint_or_path: format!("{}#{}", self.source, self.model),
            vocabulary_fingerprint: self.trace.vocabulary().fingerprint(),
        }
    }

    fn vocabulary(&self) -> &Vocabulary {
        self.trace.vocabulary()
    }

    fn next_logits(&mut self, context: &DecodingContext) -> Result<LogitPair, ProviderError> {
        let step = context.step();
        let pair = self
            .trace
            .pair(step, self.model)
            .ok_or(ProviderError::TraceExhausted {
                provider_id: self.provider_id,
                step,
            })?;
        if context.perturbation.is_none() {
            Ok(LogitPair::unperturbed(pair.original().clone()))
        } else {
            Ok(pair.clone())
        }
    }
}

/// Collects the pairs seen by a set of [`RecordingProvider`]s.
#[derive(Debug, Clone)]
pub struct TraceRecorder {
    vocabulary: Vocabulary,
    alpha: f64,
    num_models: usize,
    pairs: Arc<Mutex<BTreeMap<(usize, usize), LogitPair>>>,
}

impl TraceRecorder {
    pub fn new(vocabulary: Vocabulary, alpha: f64, num_models: usize) -> Self {
        Self {
            vocabulary,
            alpha,
            num_models,
            pairs: Arc::default(),
        }
    }

    /// Wraps `inner` so every pair it returns is recorded as model `model`.
    pub fn wrap<P: LogitProvider>(&self, inner: P, model: usize) -> RecordingProvider<P> {
        RecordingProvider {
            inner,
            model,
            recorder: self.clone(),
        }
    }

    pub fn finish(&self) -> Result<Trace, ProviderError> {
        let pairs = self.pairs.lock().expect("recorder lock poisoned").clone();
        let steps = assemble_steps(pairs, self.num_models)?;
        Trace::new(self.vocabulary.clone(), self.alpha, self.num_models, steps)
    }
}

pub struct RecordingProvider<P> {
    inner: P,
    model: usize,
    recorder: TraceRecorder,
}

impl<P: LogitProvider> LogitProvider for RecordingProvider<P> {
    fn descriptor(&self) -> ProviderDescriptor {
        self.inner.descriptor()
    }

    fn vocabulary(&self) -> &Vocabulary {
        self.inner.vocabulary()
    }

    fn next_logits(&mut self, context: &DecodingContext) -> Result<LogitPair, ProviderError> {
        let pair = self.inner.next_logits(context)?;
        self.recorder
            .pairs
            .lock()
            .expect("recorder lock poisoned")
            .insert((context.step(), self.model), pair.clone());
        Ok(pair)
    }
}
