//! Runs task bundles against vision-language model endpoints.

pub mod client;
pub mod config;
pub mod humans;
pub mod mock;
pub mod parse;
pub mod prompt;
pub mod runner;

pub use client::{query_model, QueryOutcome, RateLimiter};
pub use config::{EndpointConfig, Transport};
pub use humans::{ingest_human_answers, HumanIngest};
pub use parse::parse_answer;
pub use prompt::{render_prompt, RenderedPrompt};
pub use runner::{read_journal, run_benchmark, RunError, RunOptions, RunSummary};
