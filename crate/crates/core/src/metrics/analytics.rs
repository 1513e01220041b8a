use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Group, ScoreMatrix, ScoringMode};
use crate::model::{HumanRating, MetadataSource, RatingItem, TaskType};
use crate::taskgen::catalog;

/// Competition ranking ("1224"): rank = 1 + number of strictly better
/// entries. Non-finite values are left out.
pub fn competition_ranks<K: Ord + Clone>(values: &BTreeMap<K, f64>, higher_is_better: bool) -> BTreeMap<K, usize> {
    let finite: Vec<(&K, f64)> = values.iter().filter(|(_, v)| v.is_finite()).map(|(k, v)| (k, *v)).collect();
    finite
        .iter()
        .map(|(k, v)| {
            let better = finite.iter().filter(|(_, o)| if higher_is_better { o > v } else { o < v }).count();
            ((*k).clone(), better + 1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// domain -> model -> rank.
    pub ranks: BTreeMap<String, BTreeMap<String, usize>>,
    /// model -> rank -> share of domains in which the model got that rank.
    pub distribution: BTreeMap<String, BTreeMap<usize, f64>>,
}

/// Ranks models within each domain by descending accuracy.
pub fn rank_models(table: &BTreeMap<String, BTreeMap<String, f64>>) -> RankReport {
    let ranks: BTreeMap<String, BTreeMap<String, usize>> =
        table.iter().map(|(d, accs)| (d.clone(), competition_ranks(accs, true))).collect();
    let mut counts: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    for per_model in ranks.values() {
        for (m, r) in per_model {
            *counts.entry(m.clone()).or_default().entry(*r).or_default() += 1;
        }
    }
    let distribution = counts
        .into_iter()
        .map(|(m, c)| {
            let n: usize = c.values().sum();
            (m, c.into_iter().map(|(r, k)| (r, k as f64 / n as f64)).collect())
        })
        .collect();
    RankReport { ranks, distribution }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub population: Vec<String>,
    /// domain -> task type -> mean accuracy over the population.
    pub aggregate: BTreeMap<String, BTreeMap<TaskType, f64>>,
    /// domain -> task type -> rank, 1 = hardest.
    pub ranks: BTreeMap<String, BTreeMap<TaskType, usize>>,
    /// task type -> rank -> share of (domain, model) pairs assigning that rank.
    pub blobs: BTreeMap<TaskType, BTreeMap<usize, f64>>,
}

/// Task difficulty per domain for a population of models (matrix indices).
pub fn task_difficulty_ranks(m: &ScoreMatrix, population: &[usize], mode: ScoringMode) -> DifficultyReport {
    let mut aggregate = BTreeMap::new();
    let mut blob_counts: BTreeMap<TaskType, BTreeMap<usize, usize>> = BTreeMap::new();
    for d in m.datasets() {
        let mut sums: BTreeMap<TaskType, (f64, usize)> = BTreeMap::new();
        for &model in population {
            let mut per_model = BTreeMap::new();
            for t in m.task_types() {
                if let Some(a) = m.accuracy(model, &Group::DatasetTask(d.clone(), t), mode) {
                    per_model.insert(t, a);
                    let e = sums.entry(t).or_default();
                    e.0 += a;
                    e.1 += 1;
                }
            }
            for (t, r) in competition_ranks(&per_model, false) {
                *blob_counts.entry(t).or_default().entry(r).or_default() += 1;
            }
        }
        let mean: BTreeMap<TaskType, f64> = sums.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect();
        if !mean.is_empty() {
            aggregate.insert(d, mean);
        }
    }
    let ranks = aggregate.iter().map(|(d, accs)| (d.clone(), competition_ranks(accs, false))).collect();
    let blobs = blob_counts
        .into_iter()
        .map(|(t, c)| {
            let n: usize = c.values().sum();
            (t, c.into_iter().map(|(r, k)| (r, k as f64 / n as f64)).collect())
        })
        .collect();
    DifficultyReport { population: population.iter().map(|&i| m.models[i].clone()).collect(), aggregate, ranks, blobs }
}

/// Per task: 1 - (count of the modal answer / ratings collected).
pub fn human_ambiguity(ratings: &[HumanRating]) -> BTreeMap<String, f64> {
    let mut per_task: BTreeMap<&str, HashMap<&str, usize>> = BTreeMap::new();
    for r in ratings {
        if let RatingItem::Task { task_id } = &r.item {
            *per_task.entry(task_id.as_str()).or_default().entry(r.answer.as_str()).or_default() += 1;
        }
    }
    per_task
        .into_iter()
        .map(|(t, counts)| {
            let n: usize = counts.values().sum();
            let modal = counts.values().copied().max().unwrap_or(0);
            (t.to_owned(), 1.0 - modal as f64 / n as f64)
        })
        .collect()
}

/// Pearson correlation; `None` when either vector has zero variance or
/// fewer than two observations.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One agglomeration step. Leaves are 0..n; the cluster made at step i is n + i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

/// Average-linkage agglomerative clustering over a symmetric distance
/// matrix. Ties go to the pair with the smallest (left, right) ids.
pub fn average_linkage(dist: &[Vec<f64>]) -> Vec<Merge> {
    let n = dist.len();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    while clusters.len() > 1 {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let (ca, cb) = (&clusters[a].1, &clusters[b].1);
                let total: f64 = ca.iter().flat_map(|i| cb.iter().map(move |j| dist[*i][*j])).sum();
                let d = total / (ca.len() * cb.len()) as f64;
                let ids = (clusters[a].0.min(clusters[b].0), clusters[a].0.max(clusters[b].0));
                if best.is_none_or(|(bd, bids, _, _)| d < bd || (d == bd && ids < bids)) {
                    best = Some((d, ids, a, b));
                }
            }
        }
        let (d, _, a, b) = best.expect("at least two clusters");
        let (cb_id, cb) = clusters.remove(b);
        let (ca_id, mut ca) = clusters.remove(a);
        ca.extend(cb);
        merges.push(Merge { left: ca_id.min(cb_id), right: ca_id.max(cb_id), distance: d, size: ca.len() });
        clusters.push((n + merges.len() - 1, ca));
    }
    merges
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub tasks: Vec<TaskType>,
    /// Observation labels, "model|domain".
    pub observations: Vec<String>,
    /// Per task, the accuracy at each observation.
    pub vectors: Vec<Vec<Option<f64>>>,
    /// Pearson r over pairwise-complete observations; `None` when undefined.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Average linkage on 1 - r; undefined pairs use distance 1.
    pub linkage: Vec<Merge>,
}

/// Correlates task types by their accuracies across (model, domain) cells.
pub fn task_correlation(m: &ScoreMatrix, models: &[usize], mode: ScoringMode) -> CorrelationReport {
    let tasks = m.task_types();
    let domains = m.datasets();
    let mut observations = Vec::new();
    let mut vectors = vec![Vec::new(); tasks.len()];
    for &model in models {
        for d in &domains {
            observations.push(format!("{}|{d}", m.models[model]));
            for (k, t) in tasks.iter().enumerate() {
                vectors[k].push(m.accuracy(model, &Group::DatasetTask(d.clone(), *t), mode));
            }
        }
    }
    let matrix = correlation_matrix(&vectors);
    let dist: Vec<Vec<f64>> = matrix
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().map(|(j, r)| if i == j { 0.0 } else { 1.0 - r.unwrap_or(0.0) }).collect())
        .collect();
    let linkage = average_linkage(&dist);
    CorrelationReport { tasks, observations, vectors, matrix, linkage }
}

pub fn correlation_matrix(vectors: &[Vec<Option<f64>>]) -> Vec<Vec<Option<f64>>> {
    let k = vectors.len();
    let mut matrix = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let (x, y): (Vec<f64>, Vec<f64>) =
                vectors[i].iter().zip(&vectors[j]).filter_map(|(a, b)| Some(((*a)?, (*b)?))).unzip();
            let r = pearson(&x, &y);
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    matrix
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDifficultyRow {
    pub task_type: TaskType,
    pub key_source: MetadataSource,
    pub mean_rank: f64,
    pub mean_accuracy: f64,
}

/// Joins each task type's key source with its difficulty, averaged over domains.
pub fn source_vs_difficulty(report: &DifficultyReport) -> Vec<SourceDifficultyRow> {
    catalog()
        .into_iter()
        .filter_map(|entry| {
            let ranks: Vec<f64> = report.ranks.values().filter_map(|r| r.get(&entry.task_type)).map(|r| *r as f64).collect();
            let accs: Vec<f64> = report.aggregate.values().filter_map(|a| a.get(&entry.task_type)).copied().collect();
            if ranks.is_empty() {
                return None;
            }
            Some(SourceDifficultyRow {
                task_type: entry.task_type,
                key_source: entry.key_source,
                mean_rank: ranks.iter().sum::<f64>() / ranks.len() as f64,
                mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityPoint {
    pub task_id: String,
    pub task_type: TaskType,
    pub ambiguity: f64,
    /// Share of the given models that answered correctly, in percent.
    pub model_accuracy: f64,
}

/// One point per task with an ambiguity score.
pub fn ambiguity_vs_performance(
    m: &ScoreMatrix,
    ambiguity: &BTreeMap<String, f64>,
    models: &[usize],
    mode: ScoringMode,
) -> Vec<AmbiguityPoint> {
    let mut out = Vec::new();
    for (q, t) in m.tasks.iter().enumerate() {
        let Some(&a) = ambiguity.get(&t.task_id) else { continue };
        let scored: Vec<bool> = models.iter().filter_map(|&i| m.cells[i][q].score(mode)).collect();
        if scored.is_empty() {
            continue;
        }
        let acc = 100.0 * scored.iter().filter(|c| **c).count() as f64 / scored.len() as f64;
        out.push(AmbiguityPoint { task_id: t.task_id.clone(), task_type: t.task_type, ambiguity: a, model_accuracy: acc });
    }
    out
}
