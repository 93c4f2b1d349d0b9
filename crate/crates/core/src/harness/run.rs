//! Run configuration, execution and reporting behind the `ated run`
//! command.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::benchmark::{evaluate_suite, gen_benchmark, BenchmarkError, BenchmarkSpec};
use crate::decoder::{generate, DecodeError, EnsembleConfig, GenerationResult, Prompt};
use crate::ensemble::EnsembleError;
use crate::logit_server::RemoteProvider;
use crate::providers::{
    LogitProvider, PerturbationKind, PerturbationSpec, ProviderError, ReplayProvider, Trace,
    TraceRecorder, TokenId,
};

/// Exit codes used by the CLI.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const PROVIDER: i32 = 3;
    pub const ASSERTION: i32 = 4;
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("provider error: {0}")]
    Provider(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => exit_code::CONFIG,
            RunError::Provider(_) => exit_code::PROVIDER,
        }
    }
}

impl From<DecodeError> for RunError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::InvalidConfig(_)
            | DecodeError::InvalidStrategyParam(_)
            | DecodeError::Ensemble(EnsembleError::InvalidStep(_))
            | DecodeError::Ensemble(EnsembleError::InvalidConfig(_)) => RunError::Config(e.to_string()),
            other => RunError::Provider(other.to_string()),
        }
    }
}

impl From<ProviderError> for RunError {
    fn from(e: ProviderError) -> Self {
        RunError::Provider(e.to_string())
    }
}

impl From<BenchmarkError> for RunError {
    fn from(e: BenchmarkError) -> Self {
        match e {
            BenchmarkError::InvalidSpec(m) => RunError::Config(m),
            BenchmarkError::Decode(d) => d.into(),
            BenchmarkError::Provider(p) => p.into(),
        }
    }
}

/// Named noise-step settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mme,
    LlavaBench,
    Pope,
}

impl Preset {
    pub fn noise_steps(self) -> u32 {
        match self {
            Preset::Mme => 200,
            Preset::LlavaBench => 500,
            Preset::Pope => 999,
        }
    }

    pub fn perturbation(self) -> PerturbationSpec {
        PerturbationSpec {
            kind: PerturbationKind::ProviderNative,
            noise_steps: self.noise_steps(),
        }
    }

    /// Contrastive strength 1 and grid step 0.05, with this preset's noise.
    pub fn apply(self, config: &mut RunConfig) {
        config.ensemble.alpha = 1.0;
        config.ensemble.greedy.step_s = 0.05;
        config.prompt.perturbation = self.perturbation();
    }
}

impl std::str::FromStr for Preset {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mme" => Ok(Preset::Mme),
            "llava_bench" | "llava-bench" => Ok(Preset::LlavaBench),
            "pope" => Ok(Preset::Pope),
            _ => Err(RunError::Config(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    /// One model column of a trace file.
    Replay { path: PathBuf, model: usize },
    Remote { endpoint: String },
}

/// Grid of `(step_s, epsilon)` settings to run. Empty lists fall back to the
/// base config's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweep {
    pub step_s: Vec<f64>,
    pub epsilon: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub ensemble: EnsembleConfig,
    pub prompt: Prompt,
    pub providers: Vec<ProviderSpec>,
    /// Replay every model of this trace.
    pub replay: Option<PathBuf>,
    pub benchmark: Option<BenchmarkSpec>,
    pub sweep: Sweep,
    /// Write the logit pairs seen during decoding as a trace.
    pub record_trace: Option<PathBuf>,
    /// Write step records as JSON Lines.
    pub record_steps: Option<PathBuf>,
    /// Benchmark mode: also score each model alone.
    pub include_single_models: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ensemble: EnsembleConfig::default(),
            prompt: Prompt::default(),
            providers: Vec::new(),
            replay: None,
            benchmark: None,
            sweep: Sweep::default(),
            record_trace: None,
            record_steps: None,
            include_single_models: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    fn settings(&self) -> Vec<EnsembleConfig> {
        let steps = if self.sweep.step_s.is_empty() {
            vec![self.ensemble.greedy.step_s]
        } else {
            self.sweep.step_s.clone()
        };
        let epsilons = if self.sweep.epsilon.is_empty() {
            vec![self.ensemble.greedy.epsilon]
        } else {
            self.sweep.epsilon.clone()
        };
        let mut out = Vec::new();
        for &s in &steps {
            for &e in &epsilons {
                let mut c = self.ensemble.clone();
                c.greedy.step_s = s;
                c.greedy.epsilon = e;
                out.push(c);
            }
        }
        out
    }

    fn validate(&self) -> Result<(), RunError> {
        let sources = usize::from(self.benchmark.is_some())
            + usize::from(self.replay.is_some())
            + usize::from(!self.providers.is_empty());
        if sources != 1 {
            return Err(RunError::Config(
                "exactly one of benchmark, replay or providers must be given".into(),
            ));
        }
        for c in self.settings() {
            c.validate()?;
        }
        self.prompt
            .perturbation
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        let recording = self.record_trace.is_some() || self.record_steps.is_some();
        if recording && self.benchmark.is_some() {
            return Err(RunError::Config("recording is not supported in benchmark mode".into()));
        }
        if recording && self.settings().len() > 1 {
            return Err(RunError::Config("recording requires a single sweep setting".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigReport {
    pub label: String,
    pub models: Vec<usize>,
    pub step_s: f64,
    pub epsilon: f64,
    /// Only for benchmark runs.
    pub accuracy: Option<f64>,
    pub mean_fused_entropy: f64,
    pub mean_weights: Vec<f64>,
    pub total_entropy_evaluations: usize,
    pub steps: usize,
    pub tokens: Option<Vec<TokenId>>,
    pub text: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// True when the ground truth comes from a generated benchmark rather
    /// than real model outputs.
    pub synthetic: bool,
    pub source: String,
    pub configs: Vec<ConfigReport>,
    pub violations: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Copy with every wall-clock field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for c in &mut r.configs {
            c.wall_time_s = 0.0;
        }
        r
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "source: {}{}",
            self.source,
            if self.synthetic { " (synthetic)" } else { "" }
        );
        let _ = writeln!(
            out,
            "{:<28} {:>6} {:>6} {:>9} {:>11} {:>12} {:>7} {:>9}",
            "config", "s", "eps", "accuracy", "mean_H", "evaluations", "steps", "time_s"
        );
        for c in &self.configs {
            let acc = c.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                out,
                "{:<28} {:>6} {:>6} {:>9} {:>11.5} {:>12} {:>7} {:>9.3}",
                c.label,
                c.step_s,
                c.epsilon,
                acc,
                c.mean_fused_entropy,
                c.total_entropy_evaluations,
                c.steps,
                c.wall_time_s
            );
        }
        if !self.violations.is_empty() {
            let _ = writeln!(out, "{} invariant violation(s)", self.violations.len());
        }
        out
    }
}

fn report_from_generation(label: String, cfg: &EnsembleConfig, out: &GenerationResult) -> ConfigReport {
    let steps = out.records.len().max(1) as f64;
    let n = out.records.first().map_or(0, |r| r.ledger.weights.len());
    let mut mean_weights = vec![0.0; n];
    for r in &out.records {
        for (acc, w) in mean_weights.iter_mut().zip(&r.ledger.weights) {
            *acc += w / steps;
        }
    }
    ConfigReport {
        label,
        models: (0..n).collect(),
        step_s: cfg.greedy.step_s,
        epsilon: cfg.greedy.epsilon,
        accuracy: None,
        mean_fused_entropy: out.records.iter().map(|r| r.fused_entropy).sum::<f64>() / steps,
        mean_weights,
        total_entropy_evaluations: out.totals.entropy_evaluations,
        steps: out.totals.steps,
        tokens: Some(out.tokens.clone()),
        text: Some(out.text.clone()),
        wall_time_s: out.totals.wall_time_s,
    }
}

fn setting_label(prefix: &str, c: &EnsembleConfig) -> String {
    format!("{prefix} s={} eps={}", c.greedy.step_s, c.greedy.epsilon)
}

fn open_providers(config: &RunConfig) -> Result<Vec<Box<dyn LogitProvider>>, RunError> {
    if let Some(path) = &config.replay {
        let trace = Arc::new(Trace::load(path)?);
        let source = path.display().to_string();
        return Ok(ReplayProvider::all(trace)
            .into_iter()
            .map(|p| Box::new(p.with_source(source.clone())) as Box<dyn LogitProvider>)
            .collect());
    }
    let mut traces: Vec<(PathBuf, Arc<Trace>)> = Vec::new();
    let mut out: Vec<Box<dyn LogitProvider>> = Vec::new();
    for (id, spec) in config.providers.iter().enumerate() {
        let id = id as u32;
        match spec {
            ProviderSpec::Replay { path, model } => {
                let trace = match traces.iter().find(|(p, _)| p == path) {
                    Some((_, t)) => Arc::clone(t),
                    None => {
                        let t = Arc::new(Trace::load(path)?);
                        traces.push((path.clone(), Arc::clone(&t)));
                        t
                    }
                };
                let p = ReplayProvider::new(id, trace, *model)?.with_source(path.display().to_string());
                out.push(Box::new(p));
            }
            ProviderSpec::Remote { endpoint } => {
                out.push(Box::new(RemoteProvider::connect(id, endpoint)?));
            }
        }
    }
    Ok(out)
}

fn run_sessions(config: &RunConfig) -> Result<RunReport, RunError> {
    let mut report = RunReport {
        synthetic: false,
        source: match &config.replay {
            Some(p) => format!("replay {}", p.display()),
            None => format!("{} provider(s)", config.providers.len()),
        },
        configs: Vec::new(),
        violations: Vec::new(),
    };
    for setting in config.settings() {
        let providers = open_providers(config)?;
        let out = if let Some(path) = &config.record_trace {
            let vocab = providers[0].vocabulary().clone();
            let recorder = TraceRecorder::new(vocab, setting.alpha, providers.len());
            let mut wrapped: Vec<_> = providers
                .into_iter()
                .enumerate()
                .map(|(m, p)| recorder.wrap(p, m))
                .collect();
            let out = generate(&mut wrapped, &config.prompt, &setting)?;
            recorder.finish()?.save(path)?;
            out
        } else {
            let mut providers = providers;
            generate(&mut providers, &config.prompt, &setting)?
        };
        if let Some(path) = &config.record_steps {
            std::fs::write(path, out.records_jsonl()).map_err(ProviderError::from)?;
        }
        report.violations.extend(out.violations(setting.greedy.renormalize));
        report
            .configs
            .push(report_from_generation(setting_label("ensemble", &setting), &setting, &out));
    }
    Ok(report)
}

fn run_benchmark(config: &RunConfig, spec: &BenchmarkSpec) -> Result<RunReport, RunError> {
    let suite = gen_benchmark(spec)?;
    let mut report = RunReport {
        synthetic: true,
        source: format!(
            "synthetic {:?} benchmark, {} queries, {} models, seed {}",
            spec.kind, spec.num_queries, spec.num_models, spec.seed
        ),
        configs: Vec::new(),
        violations: Vec::new(),
    };
    let all: Vec<usize> = (0..spec.num_models).collect();
    let perturbation = config.prompt.perturbation;
    let mut push = |label: String, c: &EnsembleConfig, models: &[usize]| -> Result<(), RunError> {
        let s = evaluate_suite(&suite, c, models, perturbation)?;
        report.violations.extend(s.violations.iter().cloned());
        report.configs.push(ConfigReport {
            label,
            models: s.models,
            step_s: c.greedy.step_s,
            epsilon: c.greedy.epsilon,
            accuracy: Some(s.accuracy),
            mean_fused_entropy: s.mean_fused_entropy,
            mean_weights: s.mean_weights,
            total_entropy_evaluations: s.entropy_evaluations,
            steps: s.steps,
            tokens: None,
            text: None,
            wall_time_s: s.wall_time_s,
        });
        Ok(())
    };
    if config.include_single_models {
        for m in 0..spec.num_models {
            push(format!("model{m}"), &config.ensemble, &[m])?;
        }
    }
    for setting in config.settings() {
        push(setting_label("ensemble", &setting), &setting, &all)?;
    }
    Ok(report)
}

pub fn run(config: &RunConfig) -> Result<RunReport, RunError> {
    config.validate()?;
    match &config.benchmark {
        Some(spec) => run_benchmark(config, spec),
        None => run_sessions(config),
    }
}
