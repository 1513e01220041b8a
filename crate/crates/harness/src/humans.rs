//! Human task ratings as a pseudo-model.

use std::collections::{BTreeMap, HashMap};

use segbench_core::enrich::consensus;
use segbench_core::metrics::HUMANS_MODEL_ID;
use segbench_core::model::{Answer, EvalRecord, EvalStatus, HumanRating, RatingItem, TaskInstance};

#[derive(Debug, Clone, Default)]
pub struct HumanIngest {
    pub records: Vec<EvalRecord>,
    /// Rater answers per task in rank order, capped at `max_raters`.
    pub answers: BTreeMap<String, Vec<String>>,
    /// Tasks without any rating.
    pub missing: Vec<String>,
    /// Ratings for unknown tasks or beyond `max_raters`.
    pub warnings: Vec<String>,
}

/// Turns task-level ratings into consensus answers for the "humans" model.
/// An unresolved consensus is kept as an unparseable record.
pub fn ingest_human_answers(
    tasks: &[TaskInstance],
    ratings: &[HumanRating],
    consensus_threshold: usize,
    max_raters: usize,
) -> HumanIngest {
    let mut grouped: HashMap<&str, Vec<&HumanRating>> = HashMap::new();
    let mut out = HumanIngest::default();
    let known: HashMap<&str, &TaskInstance> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    for r in ratings {
        let RatingItem::Task { task_id } = &r.item else { continue };
        if known.contains_key(task_id.as_str()) {
            grouped.entry(task_id.as_str()).or_default().push(r);
        } else {
            out.warnings.push(format!("rating for unknown task {task_id}"));
        }
    }
    for t in tasks {
        let Some(mut group) = grouped.remove(t.task_id.as_str()) else {
            out.missing.push(t.task_id.clone());
            continue;
        };
        group.sort_by_key(|r| r.rank_in_sequence);
        if group.len() > max_raters {
            out.warnings.push(format!("task {}: {} ratings, using the first {max_raters}", t.task_id, group.len()));
            group.truncate(max_raters);
        }
        let answers: Vec<String> = group.iter().map(|r| r.answer.clone()).collect();
        let outcome = consensus(&answers, consensus_threshold);
        let parsed = outcome.answer.as_deref().and_then(Answer::from_token).filter(|a| a.answer_type() == t.answer_type);
        out.records.push(EvalRecord {
            task_id: t.task_id.clone(),
            model_id: HUMANS_MODEL_ID.into(),
            raw_response: outcome.answer.clone().unwrap_or_else(|| "unresolved".into()),
            status: if parsed.is_some() { EvalStatus::Answered } else { EvalStatus::Unparseable },
            parsed_answer: parsed,
            latency_ms: 0,
            attempt_count: outcome.ratings_used as u32,
        });
        out.answers.insert(t.task_id.clone(), answers);
    }
    if !out.missing.is_empty() {
        tracing::warn!("{} task(s) have no human ratings", out.missing.len());
    }
    out
}
