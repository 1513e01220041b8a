use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::analytics::{
    ambiguity_vs_performance, human_ambiguity, rank_models, source_vs_difficulty, task_correlation,
    task_difficulty_ranks, AmbiguityPoint, CorrelationReport, DifficultyReport, RankReport, SourceDifficultyRow,
};
use super::{CellStatus, Group, ScoreMatrix, ScoringMode, ThresholdGrid};
use crate::model::HumanRating;

/// Model id under which human consensus answers are scored.
pub const HUMANS_MODEL_ID: &str = "humans";

pub struct ReportInputs<'a> {
    pub matrix: &'a ScoreMatrix,
    /// Task-level human ratings, for ambiguity.
    pub ratings: &'a [HumanRating],
    pub open_models: &'a BTreeSet<String>,
    pub grid: &'a ThresholdGrid,
    pub mode: ScoringMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub group: String,
    pub accuracy: Option<f64>,
    /// Accuracy with non-answered cells left out.
    pub accuracy_excluding_unanswered: Option<f64>,
    pub status_counts: BTreeMap<CellStatus, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub model: String,
    pub dataset: String,
    pub accuracy_percent: Vec<f64>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scoring_mode: ScoringMode,
    pub thresholds: ThresholdGrid,
    pub models: Vec<String>,
    pub accuracy_by_dataset: Vec<AccuracyRow>,
    pub accuracy_by_task: Vec<AccuracyRow>,
    pub curves: Vec<CurveRow>,
    pub ranks_by_dataset: RankReport,
    pub ranks_by_task: RankReport,
    pub difficulty: BTreeMap<String, DifficultyReport>,
    pub ambiguity: BTreeMap<String, f64>,
    pub ambiguity_vs_performance: Vec<AmbiguityPoint>,
    pub source_vs_difficulty: Vec<SourceDifficultyRow>,
    pub correlation: Option<CorrelationReport>,
    pub warnings: Vec<String>,
}

fn accuracy_row(m: &ScoreMatrix, model: usize, group: &Group, mode: ScoringMode) -> AccuracyRow {
    let other = match mode {
        ScoringMode::Default => ScoringMode::Exclude,
        ScoringMode::Exclude => ScoringMode::Default,
    };
    let (a, b) = (m.accuracy(model, group, mode), m.accuracy(model, group, other));
    let (accuracy, excluded) = if mode == ScoringMode::Default { (a, b) } else { (b, a) };
    AccuracyRow {
        model: m.models[model].clone(),
        group: group.label(),
        accuracy,
        accuracy_excluding_unanswered: excluded,
        status_counts: m.status_counts(model, group),
    }
}

pub fn build_report(inputs: &ReportInputs) -> MetricReport {
    let m = inputs.matrix;
    let mode = inputs.mode;
    let mut warnings = Vec::new();
    let datasets = m.datasets();
    let task_types = m.task_types();
    let all: Vec<usize> = (0..m.models.len()).collect();
    let machines: Vec<usize> = all.iter().copied().filter(|&i| m.models[i] != HUMANS_MODEL_ID).collect();

    let mut accuracy_by_dataset = Vec::new();
    let mut accuracy_by_task = Vec::new();
    let mut curves = Vec::new();
    for &i in &all {
        for d in std::iter::once(Group::All).chain(datasets.iter().cloned().map(Group::Dataset)) {
            accuracy_by_dataset.push(accuracy_row(m, i, &d, mode));
            match m.accuracy_curve(i, &d, mode, inputs.grid) {
                Some(curve) => curves.push(CurveRow {
                    model: m.models[i].clone(),
                    dataset: d.label(),
                    auc: super::auc_from_curve(&curve),
                    accuracy_percent: curve,
                }),
                None => warnings.push(format!("{} / {}: no scored images", m.models[i], d.label())),
            }
        }
        for t in &task_types {
            accuracy_by_task.push(accuracy_row(m, i, &Group::TaskType(*t), mode));
        }
    }
    for row in accuracy_by_dataset.iter().chain(&accuracy_by_task) {
        let unanswered: usize =
            row.status_counts.iter().filter(|(s, _)| **s != CellStatus::Answered).map(|(_, c)| *c).sum();
        if unanswered > 0 && row.group == "all" {
            warnings.push(format!("{}: {unanswered} task(s) without a parsed answer", row.model));
        }
    }

    let table = |groups: Vec<Group>| -> BTreeMap<String, BTreeMap<String, f64>> {
        groups
            .iter()
            .map(|g| {
                let accs = machines.iter().filter_map(|&i| Some((m.models[i].clone(), m.accuracy(i, g, mode)?))).collect();
                (g.label(), accs)
            })
            .collect()
    };
    let ranks_by_dataset = rank_models(&table(datasets.iter().cloned().map(Group::Dataset).collect()));
    let ranks_by_task = rank_models(&table(task_types.iter().copied().map(Group::TaskType).collect()));

    let open: Vec<usize> = machines.iter().copied().filter(|&i| inputs.open_models.contains(&m.models[i])).collect();
    let closed: Vec<usize> = machines.iter().copied().filter(|&i| !inputs.open_models.contains(&m.models[i])).collect();
    let humans: Vec<usize> = m.model_index(HUMANS_MODEL_ID).into_iter().collect();
    let mut difficulty = BTreeMap::new();
    for (name, pop) in [("all", &machines), ("open", &open), ("closed", &closed), ("humans", &humans)] {
        if !pop.is_empty() {
            difficulty.insert(name.to_owned(), task_difficulty_ranks(m, pop, mode));
        }
    }
    let source = difficulty.get("all").map(source_vs_difficulty).unwrap_or_default();

    let ambiguity = human_ambiguity(inputs.ratings);
    let amb_points = ambiguity_vs_performance(m, &ambiguity, &machines, mode);

    let correlation = if machines.len() >= 3 && task_types.len() >= 2 {
        Some(task_correlation(m, &machines, mode))
    } else {
        warnings.push("task correlation needs at least 3 models and 2 task types".into());
        None
    };

    MetricReport {
        scoring_mode: mode,
        thresholds: inputs.grid.clone(),
        models: m.models.clone(),
        accuracy_by_dataset,
        accuracy_by_task,
        curves,
        ranks_by_dataset,
        ranks_by_task,
        difficulty,
        ambiguity,
        ambiguity_vs_performance: amb_points,
        source_vs_difficulty: source,
        correlation,
        warnings,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).map_err(std::io::Error::other)? + "\n")
}

const STATUSES: [CellStatus; 5] = [
    CellStatus::Answered,
    CellStatus::Unparseable,
    CellStatus::UnansweredSafety,
    CellStatus::TransportError,
    CellStatus::Missing,
];

fn accuracy_rows(rows: &[AccuracyRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let mut v = vec![r.model.clone(), r.group.clone(), fmt_opt(r.accuracy), fmt_opt(r.accuracy_excluding_unanswered)];
            v.extend(STATUSES.iter().map(|s| r.status_counts.get(s).copied().unwrap_or(0).to_string()));
            v
        })
        .collect()
}

/// Writes one CSV per table, report.json, and plot data under `plots/`.
/// Returns every path written.
pub fn write_report(report: &MetricReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    let acc_header =
        ["model", "group", "accuracy", "accuracy_excluding_unanswered", "answered", "unparseable", "unanswered_safety", "transport_error", "missing"];
    write_csv(&out("accuracy_by_dataset.csv"), &acc_header, accuracy_rows(&report.accuracy_by_dataset))?;
    write_csv(&out("accuracy_by_task.csv"), &acc_header, accuracy_rows(&report.accuracy_by_task))?;

    let mut curve_rows = Vec::new();
    for c in &report.curves {
        for (t, a) in report.thresholds.values().iter().zip(&c.accuracy_percent) {
            curve_rows.push(vec![c.model.clone(), c.dataset.clone(), t.to_string(), a.to_string()]);
        }
    }
    write_csv(&out("accuracy_percent_t.csv"), &["model", "dataset", "t", "accuracy_percent"], curve_rows)?;
    write_csv(
        &out("auc.csv"),
        &["model", "dataset", "auc"],
        report.curves.iter().map(|c| vec![c.model.clone(), c.dataset.clone(), c.auc.to_string()]).collect(),
    )?;

    let rank_rows = |r: &RankReport| -> Vec<Vec<String>> {
        r.ranks
            .iter()
            .flat_map(|(d, per)| per.iter().map(move |(m, k)| vec![d.clone(), m.clone(), k.to_string()]))
            .collect()
    };
    write_csv(&out("ranks_by_dataset.csv"), &["dataset", "model", "rank"], rank_rows(&report.ranks_by_dataset))?;
    write_csv(&out("ranks_by_task.csv"), &["task_type", "model", "rank"], rank_rows(&report.ranks_by_task))?;
    let dist_rows = |r: &RankReport| -> Vec<Vec<String>> {
        r.distribution
            .iter()
            .flat_map(|(m, d)| d.iter().map(move |(k, p)| vec![m.clone(), k.to_string(), p.to_string()]))
            .collect()
    };
    write_csv(&out("rank_distribution.csv"), &["model", "rank", "share"], dist_rows(&report.ranks_by_dataset))?;

    let mut diff_rows = Vec::new();
    for (pop, d) in &report.difficulty {
        for (domain, ranks) in &d.ranks {
            for (t, r) in ranks {
                diff_rows.push(vec![pop.clone(), domain.clone(), t.to_string(), d.aggregate[domain][t].to_string(), r.to_string()]);
            }
        }
    }
    write_csv(&out("task_difficulty.csv"), &["population", "domain", "task_type", "accuracy", "rank"], diff_rows)?;
    write_csv(
        &out("ambiguity.csv"),
        &["task_id", "ambiguity"],
        report.ambiguity.iter().map(|(t, a)| vec![t.clone(), a.to_string()]).collect(),
    )?;
    if let Some(c) = &report.correlation {
        let mut header = vec!["task_type".to_string()];
        header.extend(c.tasks.iter().map(|t| t.to_string()));
        let rows = c
            .tasks
            .iter()
            .zip(&c.matrix)
            .map(|(t, row)| std::iter::once(t.to_string()).chain(row.iter().map(|r| fmt_opt(*r))).collect())
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&out("task_correlation.csv"), &header, rows)?;
    }

    write_json(&out("report.json"), report)?;
    write_json(&out("plots/threshold_curves.json"), &serde_json::json!({"thresholds": report.thresholds, "curves": report.curves}))?;
    write_json(&out("plots/rank_distributions.json"), &serde_json::json!({"by_dataset": report.ranks_by_dataset, "by_task": report.ranks_by_task}))?;
    write_json(&out("plots/task_difficulty.json"), &report.difficulty)?;
    write_json(&out("plots/correlation.json"), &report.correlation)?;
    write_json(&out("plots/ambiguity_vs_performance.json"), &report.ambiguity_vs_performance)?;
    write_json(&out("plots/source_vs_difficulty.json"), &report.source_vs_difficulty)?;
    Ok(written)
}
