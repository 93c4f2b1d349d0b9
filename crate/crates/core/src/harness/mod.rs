//! Test and evaluation harness: oracles, synthetic suites, fixtures and the
//! experiment runner behind the CLI.

pub mod benchmark;
pub mod fixtures;
pub mod oracle;
pub mod run;

pub use benchmark::{
    evaluate_suite, gen_benchmark, BenchmarkError, BenchmarkKind, BenchmarkSpec, BenchmarkSuite,
    ErrorLayout, ModelProfile, SuiteScore,
};
pub use fixtures::{golden_prompt, golden_trace, scripted_ensemble, GoldenSpec};
pub use oracle::{oracle_global_simplex, oracle_pairwise, PairwiseOracle, SimplexOracle};
pub use run::{run, RunConfig, RunError, RunReport};
