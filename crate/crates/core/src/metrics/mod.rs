//! Scoring: the correctness matrix, plain accuracy, thresholded per-image
//! accuracy and its grid mean, plus ranking and task-level analytics.

mod analytics;
mod report;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{EvalRecord, EvalStatus, TaskInstance, TaskType};

pub use analytics::{
    ambiguity_vs_performance, average_linkage, competition_ranks, correlation_matrix, human_ambiguity, pearson, rank_models,
    source_vs_difficulty, task_correlation, task_difficulty_ranks, AmbiguityPoint, CorrelationReport, DifficultyReport,
    Merge, RankReport, SourceDifficultyRow,
};
pub use report::{build_report, write_report, AccuracyRow, CurveRow, MetricReport, ReportInputs, HUMANS_MODEL_ID};

pub const DEFAULT_THRESHOLDS: [f64; 14] = [0.2, 0.3, 0.4, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("threshold grid must be non-empty, strictly increasing and within [0, 1]")]
    BadGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdGrid(Vec<f64>);

impl ThresholdGrid {
    pub fn new(values: Vec<f64>) -> Result<Self, MetricsError> {
        let ok = !values.is_empty()
            && values.iter().all(|t| (0.0..=1.0).contains(t))
            && values.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(Self(values))
        } else {
            Err(MetricsError::BadGrid)
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self(DEFAULT_THRESHOLDS.to_vec())
    }
}

impl TryFrom<Vec<f64>> for ThresholdGrid {
    type Error = MetricsError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ThresholdGrid> for Vec<f64> {
    fn from(g: ThresholdGrid) -> Self {
        g.0
    }
}

/// How non-answered cells enter accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Every non-answered cell counts as incorrect.
    #[default]
    Default,
    /// Only answered cells are scored.
    Exclude,
}

/// Status of one (model, task) cell; `Missing` means no record exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Answered,
    Unparseable,
    UnansweredSafety,
    TransportError,
    Missing,
}

impl From<EvalStatus> for CellStatus {
    fn from(s: EvalStatus) -> Self {
        match s {
            EvalStatus::Answered => CellStatus::Answered,
            EvalStatus::Unparseable => CellStatus::Unparseable,
            EvalStatus::UnansweredSafety => CellStatus::UnansweredSafety,
            EvalStatus::TransportError => CellStatus::TransportError,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub status: CellStatus,
    pub correct: bool,
}

impl Cell {
    pub const MISSING: Cell = Cell { status: CellStatus::Missing, correct: false };

    fn score(&self, mode: ScoringMode) -> Option<bool> {
        let answered = self.status == CellStatus::Answered;
        match mode {
            ScoringMode::Exclude if !answered => None,
            _ => Some(answered && self.correct),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub task_id: String,
    pub image_id: String,
    pub dataset: String,
    pub task_type: TaskType,
}

impl From<&TaskInstance> for TaskInfo {
    fn from(t: &TaskInstance) -> Self {
        Self { task_id: t.task_id.clone(), image_id: t.image_id.clone(), dataset: t.dataset.clone(), task_type: t.task_type }
    }
}

/// Correctness per (model, task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub tasks: Vec<TaskInfo>,
    pub models: Vec<String>,
    /// `cells[m][q]` for model index m and task index q.
    pub cells: Vec<Vec<Cell>>,
}

/// Which tasks a metric looks at.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "by", content = "value")]
pub enum Group {
    All,
    Dataset(String),
    TaskType(TaskType),
    DatasetTask(String, TaskType),
}

impl Group {
    pub fn contains(&self, t: &TaskInfo) -> bool {
        match self {
            Group::All => true,
            Group::Dataset(d) => &t.dataset == d,
            Group::TaskType(tt) => t.task_type == *tt,
            Group::DatasetTask(d, tt) => &t.dataset == d && t.task_type == *tt,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Group::All => "all".into(),
            Group::Dataset(d) => d.clone(),
            Group::TaskType(t) => t.id().into(),
            Group::DatasetTask(d, t) => format!("{d}/{t}"),
        }
    }
}

impl ScoreMatrix {
    /// Builds the matrix from records. Models are sorted by id; a record is
    /// correct only when answered with the key. The first record per
    /// (task, model) wins; records for unknown tasks are ignored.
    pub fn from_records(tasks: &[TaskInstance], records: &[EvalRecord]) -> Self {
        let index: HashMap<&str, usize> = tasks.iter().enumerate().map(|(i, t)| (t.task_id.as_str(), i)).collect();
        let mut models: Vec<String> = records.iter().map(|r| r.model_id.clone()).collect();
        models.sort();
        models.dedup();
        let model_index: HashMap<&str, usize> = models.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
        let mut cells = vec![vec![Cell::MISSING; tasks.len()]; models.len()];
        for r in records {
            let Some(&q) = index.get(r.task_id.as_str()) else { continue };
            let m = model_index[r.model_id.as_str()];
            if cells[m][q].status != CellStatus::Missing {
                continue;
            }
            let correct = r.status == EvalStatus::Answered && r.parsed_answer.as_ref() == Some(&tasks[q].answer_key);
            cells[m][q] = Cell { status: r.status.into(), correct };
        }
        Self { tasks: tasks.iter().map(TaskInfo::from).collect(), models, cells }
    }

    /// All cells answered, with the given correctness.
    pub fn from_correctness(tasks: Vec<TaskInfo>, models: Vec<String>, correct: Vec<Vec<bool>>) -> Self {
        let cells =
            correct.into_iter().map(|row| row.into_iter().map(|c| Cell { status: CellStatus::Answered, correct: c }).collect()).collect();
        Self { tasks, models, cells }
    }

    pub fn model_index(&self, model: &str) -> Option<usize> {
        self.models.iter().position(|m| m == model)
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut d: Vec<String> = self.tasks.iter().map(|t| t.dataset.clone()).collect();
        d.sort();
        d.dedup();
        d
    }

    pub fn task_types(&self) -> Vec<TaskType> {
        let mut t: Vec<TaskType> = self.tasks.iter().map(|t| t.task_type).collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn status_counts(&self, model: usize, group: &Group) -> BTreeMap<CellStatus, usize> {
        let mut counts = BTreeMap::new();
        for (q, t) in self.tasks.iter().enumerate() {
            if group.contains(t) {
                *counts.entry(self.cells[model][q].status).or_default() += 1;
            }
        }
        counts
    }

    /// 100 x mean correctness over the group; `None` for an empty group.
    pub fn accuracy(&self, model: usize, group: &Group, mode: ScoringMode) -> Option<f64> {
        let (mut hit, mut n) = (0usize, 0usize);
        for (q, t) in self.tasks.iter().enumerate() {
            if !group.contains(t) {
                continue;
            }
            if let Some(c) = self.cells[model][q].score(mode) {
                n += 1;
                hit += c as usize;
            }
        }
        (n > 0).then(|| 100.0 * hit as f64 / n as f64)
    }

    /// Per-image fraction of the group's questions answered correctly.
    /// Images with no scored question are left out.
    pub fn image_fractions(&self, model: usize, group: &Group, mode: ScoringMode) -> BTreeMap<String, f64> {
        let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for (q, t) in self.tasks.iter().enumerate() {
            if !group.contains(t) {
                continue;
            }
            if let Some(c) = self.cells[model][q].score(mode) {
                let e = tally.entry(t.image_id.as_str()).or_default();
                e.0 += c as usize;
                e.1 += 1;
            }
        }
        tally.into_iter().map(|(i, (hit, n))| (i.to_owned(), hit as f64 / n as f64)).collect()
    }

    pub fn accuracy_percent_t(&self, model: usize, group: &Group, mode: ScoringMode, t: f64) -> Option<f64> {
        accuracy_percent_from_fractions(self.image_fractions(model, group, mode).values().copied(), t)
    }

    pub fn accuracy_curve(&self, model: usize, group: &Group, mode: ScoringMode, grid: &ThresholdGrid) -> Option<Vec<f64>> {
        let fractions: Vec<f64> = self.image_fractions(model, group, mode).into_values().collect();
        grid.values().iter().map(|t| accuracy_percent_from_fractions(fractions.iter().copied(), *t)).collect()
    }

    pub fn auc(&self, model: usize, group: &Group, mode: ScoringMode, grid: &ThresholdGrid) -> Option<f64> {
        self.accuracy_curve(model, group, mode, grid).map(|curve| auc_from_curve(&curve))
    }
}

/// 100 x share of images whose fraction is at least `t`.
pub fn accuracy_percent_from_fractions(fractions: impl IntoIterator<Item = f64>, t: f64) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in fractions {
        n += 1;
        hit += (f >= t) as usize;
    }
    (n > 0).then(|| 100.0 * hit as f64 / n as f64)
}

/// Grid mean of Accuracy%(t) / 100.
pub fn auc_from_curve(curve: &[f64]) -> f64 {
    curve.iter().map(|a| a / 100.0).sum::<f64>() / curve.len() as f64
}
