use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use ated_core::decoder::{EnsembleConfig, FanOut, Strategy};
use ated_core::ensemble::{Renormalize, SkipPolicy};
use ated_core::harness::benchmark::BenchmarkSpec;
use ated_core::harness::fixtures::{golden_trace, GoldenSpec};
use ated_core::harness::run::{exit_code, run, Preset, ProviderSpec, RunConfig, RunError, RunReport};
use ated_core::logit_server::{RunningServer, TraceBackend};
use ated_core::providers::{PerturbationKind, PerturbationSpec, Trace};

#[derive(Parser)]
#[command(name = "ated", version, about = "Entropy-guided ensemble decoding over logit providers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode a replayed trace, remote providers or a synthetic benchmark.
    Run(Box<RunArgs>),
    /// Serve one model column of a trace over TCP.
    Serve(ServeArgs),
    /// Write a deterministic scripted-ensemble trace.
    GoldenTrace(GoldenArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config. Flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Grid step; a comma list sweeps.
    #[arg(long, value_delimiter = ',')]
    step: Vec<f64>,
    /// Early-stop threshold in nats; a comma list sweeps.
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    /// none | softmax
    #[arg(long)]
    renormalize: Option<String>,
    /// continue_next_model | break_all
    #[arg(long)]
    skip_policy: Option<String>,
    /// greedy | multinomial | top_k:K | top_p:P
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    stop_tokens: Vec<u32>,
    #[arg(long)]
    concurrent: bool,
    /// Comma list of `remote:HOST:PORT` or `replay:MODEL@PATH`.
    #[arg(long, value_delimiter = ',')]
    providers: Vec<String>,
    /// Replay every model of a trace file.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Benchmark spec (JSON).
    #[arg(long)]
    benchmark: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    prompt_tokens: Option<Vec<u32>>,
    #[arg(long)]
    input_id: Option<String>,
    /// Perturb with provider-native noise for this many steps.
    #[arg(long)]
    noise_steps: Option<u32>,
    #[arg(long)]
    record_trace: Option<PathBuf>,
    /// Step records as JSON Lines.
    #[arg(long)]
    record_steps: Option<PathBuf>,
    /// Write the RunReport JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Exit 4 on invariant violations, or when the ensemble trails the best
    /// single model by more than 0.5 points.
    #[arg(long)]
    assert: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 0)]
    model_index: usize,
    #[arg(long)]
    model_name: Option<String>,
}

#[derive(Args)]
struct GoldenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    models: usize,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
}

fn config_err(e: impl std::fmt::Display) -> RunError {
    RunError::Config(e.to_string())
}

fn parse_enum<T: serde::de::DeserializeOwned>(name: &str, v: &str) -> Result<T, RunError> {
    serde_json::from_value(serde_json::Value::String(v.to_owned()))
        .map_err(|_| config_err(format!("invalid --{name} value {v:?}")))
}

fn parse_provider(s: &str) -> Result<ProviderSpec, RunError> {
    if let Some(endpoint) = s.strip_prefix("remote:") {
        return Ok(ProviderSpec::Remote {
            endpoint: endpoint.to_owned(),
        });
    }
    if let Some(rest) = s.strip_prefix("replay:") {
        if let Some((model, path)) = rest.split_once('@') {
            let model = model
                .parse()
                .map_err(|_| config_err(format!("bad model index in {s:?}")))?;
            return Ok(ProviderSpec::Replay {
                path: path.into(),
                model,
            });
        }
    }
    Err(config_err(format!(
        "provider {s:?} must be remote:HOST:PORT or replay:MODEL@PATH"
    )))
}

fn build_config(a: &RunArgs) -> Result<RunConfig, RunError> {
    let mut c = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = &a.preset {
        p.parse::<Preset>()?.apply(&mut c);
    }
    let e: &mut EnsembleConfig = &mut c.ensemble;
    if let Some(v) = a.alpha {
        e.alpha = v;
    }
    match a.step.as_slice() {
        [] => {}
        [s] => e.greedy.step_s = *s,
        many => c.sweep.step_s = many.to_vec(),
    }
    match a.epsilon.as_slice() {
        [] => {}
        [x] => e.greedy.epsilon = *x,
        many => c.sweep.epsilon = many.to_vec(),
    }
    if let Some(v) = &a.renormalize {
        e.greedy.renormalize = parse_enum::<Renormalize>("renormalize", v)?;
    }
    if let Some(v) = &a.skip_policy {
        e.greedy.skip_policy = parse_enum::<SkipPolicy>("skip-policy", v)?;
    }
    if let Some(v) = &a.strategy {
        e.strategy = v.parse::<Strategy>().map_err(config_err)?;
    }
    if let Some(v) = a.max_new_tokens {
        e.max_new_tokens = v;
    }
    if let Some(v) = a.seed {
        e.seed = v;
    }
    if !a.stop_tokens.is_empty() {
        e.stop_token_ids = a.stop_tokens.iter().copied().collect();
    }
    if a.concurrent {
        e.fan_out = FanOut::Concurrent;
    }
    if !a.providers.is_empty() {
        c.providers = a.providers.iter().map(|s| parse_provider(s)).collect::<Result<_, _>>()?;
    }
    if let Some(p) = &a.replay {
        c.replay = Some(p.clone());
    }
    if let Some(path) = &a.benchmark {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let spec: BenchmarkSpec = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        c.benchmark = Some(spec);
    }
    if let Some(t) = &a.prompt_tokens {
        c.prompt.tokens = t.clone();
    }
    if let Some(id) = &a.input_id {
        c.prompt.input_id = id.clone();
    }
    if let Some(n) = a.noise_steps {
        c.prompt.perturbation = if n == 0 {
            PerturbationSpec::none()
        } else {
            PerturbationSpec::new(PerturbationKind::ProviderNative, n).map_err(config_err)?
        };
    }
    if a.record_trace.is_some() {
        c.record_trace = a.record_trace.clone();
    }
    if a.record_steps.is_some() {
        c.record_steps = a.record_steps.clone();
    }
    Ok(c)
}

fn check(report: &RunReport) -> Vec<String> {
    let mut failures = report.violations.clone();
    let singles: Vec<f64> = report
        .configs
        .iter()
        .filter(|c| c.models.len() == 1)
        .filter_map(|c| c.accuracy)
        .collect();
    if let Some(best) = singles.iter().copied().reduce(f64::max) {
        for c in report.configs.iter().filter(|c| c.models.len() > 1) {
            if let Some(acc) = c.accuracy {
                if acc < best - 0.005 {
                    failures.push(format!("{}: accuracy {acc:.4} below best single {best:.4}", c.label));
                }
            }
        }
    }
    failures
}

fn cmd_run(a: &RunArgs) -> Result<i32, RunError> {
    let config = build_config(a)?;
    let report = run(&config)?;
    if let Some(path) = &a.report {
        std::fs::write(path, report.to_json())
            .map_err(|e| RunError::Provider(format!("{}: {e}", path.display())))?;
    }
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.render_table());
    }
    if a.assert {
        let failures = check(&report);
        if !failures.is_empty() {
            for f in &failures {
                eprintln!("assertion failed: {f}");
            }
            return Ok(exit_code::ASSERTION);
        }
    }
    Ok(exit_code::SUCCESS)
}

fn cmd_serve(a: &ServeArgs) -> anyhow::Result<()> {
    let trace = Arc::new(Trace::load(&a.trace).with_context(|| format!("loading {}", a.trace.display()))?);
    let name = a
        .model_name
        .clone()
        .unwrap_or_else(|| format!("{}#{}", a.trace.display(), a.model_index));
    let backend = TraceBackend::new(trace, a.model_index, name)?;
    let server = RunningServer::bind(&a.listen, backend).with_context(|| format!("binding {}", a.listen))?;
    eprintln!("serving on {}", server.local_addr());
    server.wait();
    Ok(())
}

fn cmd_golden(a: &GoldenArgs) -> anyhow::Result<()> {
    let spec = GoldenSpec {
        num_models: a.models,
        steps: a.steps,
        vocab_size: a.vocab_size,
        seed: a.seed,
        ..Default::default()
    };
    let config = EnsembleConfig {
        alpha: a.alpha,
        ..Default::default()
    };
    golden_trace(&spec, &config)?.save(&a.out)?;
    eprintln!("wrote {} ({} models, {} steps)", a.out.display(), a.models, a.steps);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Run(a) => cmd_run(a).unwrap_or_else(|e| {
            eprintln!("error: {e}");
            e.exit_code()
        }),
        Command::Serve(a) => match cmd_serve(a) {
            Ok(()) => exit_code::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                exit_code::PROVIDER
            }
        },
        Command::GoldenTrace(a) => match cmd_golden(a) {
            Ok(()) => exit_code::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                exit_code::CONFIG
            }
        },
    };
    ExitCode::from(code as u8)
}
