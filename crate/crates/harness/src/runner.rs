//! Runs a task bundle against endpoints with a resumable JSONL journal.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use tokio::sync::{mpsc, Semaphore};

use crate::client::{query_model, RateLimiter};
use crate::config::EndpointConfig;
use crate::parse::parse_answer;
use crate::prompt::render_prompt;
use segbench_core::model::{EvalRecord, EvalStatus, TaskInstance};
use segbench_core::taskgen::LoadedBundle;
use segbench_core::templates::{TemplateError, TemplateSet};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("journal {path}: {source}")]
    Journal { path: PathBuf, source: std::io::Error },
    #[error("journal {path} line {line}: {message}")]
    CorruptJournal { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Config(#[from] crate::config::EndpointConfigError),
}

/// Reads a journal. A last line without its newline is a write cut short
/// by a crash and is dropped; any other malformed line is an error.
pub fn read_journal(path: &Path) -> Result<Vec<EvalRecord>, RunError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(RunError::Journal { path: path.to_owned(), source }),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EvalRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) if i + 1 == lines.len() && !complete => {
                tracing::warn!("dropping truncated last journal line in {}", path.display());
            }
            Err(e) => {
                return Err(RunError::CorruptJournal { path: path.to_owned(), line: i + 1, message: e.to_string() })
            }
        }
    }
    Ok(records)
}

/// Rewrites the journal without a truncated tail so appends start on a
/// fresh line.
fn repair_journal(path: &Path, records: &[EvalRecord]) -> Result<(), RunError> {
    let io = |source| RunError::Journal { path: path.to_owned(), source };
    let Ok(text) = std::fs::read_to_string(path) else { return Ok(()) };
    if text.is_empty() || text.ends_with('\n') {
        return Ok(());
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(&tmp, out).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many new records. Used to simulate an interrupted run.
    pub max_new_records: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct RunSummary {
    pub previously_done: usize,
    pub new_records: usize,
    /// model -> status -> count over the whole journal.
    pub status_counts: BTreeMap<String, BTreeMap<EvalStatus, usize>>,
}

struct Job {
    task: Arc<TaskInstance>,
    endpoint: Arc<EndpointConfig>,
}

/// Queries every (task, endpoint) pair not yet in the journal and appends
/// one record per pair.
pub async fn run_benchmark(
    bundle: &LoadedBundle,
    endpoints: &[EndpointConfig],
    templates: &TemplateSet,
    journal: &Path,
    options: &RunOptions,
) -> Result<RunSummary, RunError> {
    for e in endpoints {
        e.validate()?;
    }
    let existing = read_journal(journal)?;
    repair_journal(journal, &existing)?;
    let done: HashSet<(String, String)> = existing.iter().map(|r| (r.task_id.clone(), r.model_id.clone())).collect();
    let prompts: BTreeMap<String, String> =
        bundle.tasks.iter().map(|t| Ok((t.task_id.clone(), render_prompt(t, templates)?.text))).collect::<Result<_, TemplateError>>()?;
    let prompts = Arc::new(prompts);

    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(journal)
        .map_err(|source| RunError::Journal { path: journal.to_owned(), source })?;
    let (tx, mut rx) = mpsc::channel::<EvalRecord>(256);
    let journal_path = journal.to_owned();
    let writer = tokio::task::spawn_blocking(move || -> Result<Vec<EvalRecord>, RunError> {
        let mut file = file;
        let mut written = Vec::new();
        while let Some(r) = rx.blocking_recv() {
            let mut line = serde_json::to_string(&r).expect("record serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|source| RunError::Journal { path: journal_path.clone(), source })?;
            written.push(r);
        }
        file.sync_all().map_err(|source| RunError::Journal { path: journal_path.clone(), source })?;
        Ok(written)
    });

    let client = reqwest::Client::new();
    let budget = Arc::new(AtomicUsize::new(options.max_new_records.unwrap_or(usize::MAX)));
    let bundle = Arc::new(bundle.clone());
    let mut handles = Vec::new();
    for endpoint in endpoints {
        let endpoint = Arc::new(endpoint.clone());
        let limiter = Arc::new(RateLimiter::new(endpoint.rate_limit_rpm));
        let semaphore = Arc::new(Semaphore::new(endpoint.max_concurrency));
        for task in &bundle.tasks {
            if done.contains(&(task.task_id.clone(), endpoint.model_id.clone())) {
                continue;
            }
            let job = Job { task: Arc::new(task.clone()), endpoint: endpoint.clone() };
            let (client, limiter, semaphore, tx, budget, bundle, prompts) =
                (client.clone(), limiter.clone(), semaphore.clone(), tx.clone(), budget.clone(), bundle.clone(), prompts.clone());
            handles.push(tokio::spawn(async move {
                let _permit = semaphore.acquire_owned().await.expect("semaphore open");
                if budget.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1)).is_err() {
                    return;
                }
                let record = evaluate_one(&client, &job, &limiter, &bundle, &prompts[&job.task.task_id]).await;
                let _ = tx.send(record).await;
            }));
        }
    }
    drop(tx);
    for h in handles {
        let _ = h.await;
    }
    let written = writer.await.expect("journal writer")?;

    let mut status_counts: BTreeMap<String, BTreeMap<EvalStatus, usize>> = BTreeMap::new();
    for r in existing.iter().chain(&written) {
        *status_counts.entry(r.model_id.clone()).or_default().entry(r.status).or_default() += 1;
    }
    Ok(RunSummary { previously_done: existing.len(), new_records: written.len(), status_counts })
}

async fn evaluate_one(client: &reqwest::Client, job: &Job, limiter: &RateLimiter, bundle: &LoadedBundle, prompt: &str) -> EvalRecord {
    let mut images = Vec::with_capacity(job.task.image_refs.len());
    for id in &job.task.image_refs {
        match bundle.asset_png(id) {
            Ok(bytes) => images.push(bytes),
            Err(e) => {
                return EvalRecord {
                    task_id: job.task.task_id.clone(),
                    model_id: job.endpoint.model_id.clone(),
                    raw_response: format!("missing attachment: {e}"),
                    parsed_answer: None,
                    status: EvalStatus::TransportError,
                    latency_ms: 0,
                    attempt_count: 0,
                }
            }
        }
    }
    let outcome = query_model(client, &job.endpoint, limiter, prompt, &images).await;
    let (status, parsed) = match outcome.status {
        EvalStatus::Answered => match parse_answer(&outcome.raw, job.task.answer_type) {
            Some(a) => (EvalStatus::Answered, Some(a)),
            None => (EvalStatus::Unparseable, None),
        },
        other => (other, None),
    };
    EvalRecord {
        task_id: job.task.task_id.clone(),
        model_id: job.endpoint.model_id.clone(),
        raw_response: outcome.raw,
        parsed_answer: parsed,
        status,
        latency_ms: outcome.latency_ms,
        attempt_count: outcome.attempts,
    }
}

/// Record keys, for comparing runs.
pub fn record_keys(records: &[EvalRecord]) -> BTreeSet<(String, String)> {
    records.iter().map(|r| (r.task_id.clone(), r.model_id.clone())).collect()
}
