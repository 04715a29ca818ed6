//! Normalized Performance Metric.
//!
//! Each task score is rescaled so that its random baseline maps to 0 and a
//! perfect score maps to 100, then averaged without weights.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curves::{CurveError, TrainingCurve};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NpmError {
    #[error("perfect score {perfect} must exceed random baseline {baseline}")]
    Domain { baseline: f64, perfect: f64 },
    #[error("task {0} is listed more than once in the task specs")]
    DuplicateSpec(String),
    #[error("no task spec for task {0}")]
    UnknownTask(String),
    #[error("task {task_id} appears more than once for {condition} / {model_scale} at {checkpoint_tokens}B tokens")]
    DuplicateResult {
        task_id: String,
        condition: String,
        model_scale: String,
        checkpoint_tokens: f64,
    },
    #[error("task {task_id}: raw score {raw} outside the native range [{min}, {max}]")]
    OutOfRange {
        task_id: String,
        raw: f64,
        min: f64,
        max: f64,
    },
    #[error(transparent)]
    Curve(#[from] CurveError),
}

/// `100 * (raw - baseline) / (perfect - baseline)`, unclamped.
pub fn npm(raw_score: f64, random_baseline: f64, perfect_score: f64) -> Result<f64, NpmError> {
    if perfect_score.partial_cmp(&random_baseline) != Some(core::cmp::Ordering::Greater)
        || !random_baseline.is_finite()
        || !perfect_score.is_finite()
    {
        return Err(NpmError::Domain {
            baseline: random_baseline,
            perfect: perfect_score,
        });
    }
    Ok(100.0 * (raw_score - random_baseline) / (perfect_score - random_baseline))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub category: String,
    pub random_baseline: f64,
    pub perfect_score: f64,
    /// Lowest score the task can produce. Defaults to unbounded below.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_score: Option<f64>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), NpmError> {
        npm(self.random_baseline, self.random_baseline, self.perfect_score).map(|_| ())
    }

    pub fn npm(&self, raw: f64) -> Result<f64, NpmError> {
        let min = self.min_score.unwrap_or(f64::NEG_INFINITY);
        if !raw.is_finite() || raw < min || raw > self.perfect_score {
            return Err(NpmError::OutOfRange {
                task_id: self.task_id.clone(),
                raw,
                min,
                max: self.perfect_score,
            });
        }
        npm(raw, self.random_baseline, self.perfect_score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub raw_score: f64,
    /// Training tokens seen at the checkpoint, in billions.
    pub checkpoint_tokens: f64,
    pub condition: String,
    pub model_scale: String,
}

/// Task specs keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskCatalog(BTreeMap<String, TaskSpec>);

impl TaskCatalog {
    pub fn new<I: IntoIterator<Item = TaskSpec>>(specs: I) -> Result<Self, NpmError> {
        let mut map = BTreeMap::new();
        for spec in specs {
            spec.validate()?;
            if map.contains_key(&spec.task_id) {
                return Err(NpmError::DuplicateSpec(spec.task_id));
            }
            map.insert(spec.task_id.clone(), spec);
        }
        Ok(Self(map))
    }

    pub fn get(&self, task_id: &str) -> Result<&TaskSpec, NpmError> {
        self.0
            .get(task_id)
            .ok_or_else(|| NpmError::UnknownTask(task_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.0.values().map(|s| s.category.as_str()).collect()
    }

    pub fn task_npm(&self, result: &TaskResult) -> Result<f64, NpmError> {
        self.get(&result.task_id)?.npm(result.raw_score)
    }
}

/// Mean NPM of the tasks in `category`. `None` when the category has no
/// results; an empty category never averages to zero.
pub fn category_average(
    results: &[TaskResult],
    catalog: &TaskCatalog,
    category: &str,
) -> Result<Option<f64>, NpmError> {
    let mut values = Vec::new();
    for r in results {
        let spec = catalog.get(&r.task_id)?;
        if spec.category == category {
            values.push(spec.npm(r.raw_score)?);
        }
    }
    Ok(mean(&values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub npm: Option<f64>,
    /// Number of tasks that contributed.
    pub coverage: usize,
}

/// Unweighted mean over every task present. Results must all belong to one
/// checkpoint of one condition.
pub fn macro_average(results: &[TaskResult], catalog: &TaskCatalog) -> Result<MacroAverage, NpmError> {
    check_unique_tasks(results)?;
    let values = results
        .iter()
        .map(|r| catalog.task_npm(r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MacroAverage {
        npm: mean(&values),
        coverage: values.len(),
    })
}

fn check_unique_tasks(results: &[TaskResult]) -> Result<(), NpmError> {
    let mut seen = BTreeSet::new();
    for r in results {
        let key = (
            r.model_scale.as_str(),
            r.condition.as_str(),
            r.checkpoint_tokens.to_bits(),
            r.task_id.as_str(),
        );
        if !seen.insert(key) {
            return Err(NpmError::DuplicateResult {
                task_id: r.task_id.clone(),
                condition: r.condition.clone(),
                model_scale: r.model_scale.clone(),
                checkpoint_tokens: r.checkpoint_tokens,
            });
        }
    }
    Ok(())
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub npm: f64,
    pub tasks: usize,
}

/// Scores of one condition at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub model_scale: String,
    pub condition: String,
    pub checkpoint_tokens: f64,
    pub overall_npm: Option<f64>,
    pub coverage: usize,
    pub expected_tasks: usize,
    pub categories: BTreeMap<String, CategoryScore>,
}

/// Groups results by (scale, condition, checkpoint) and scores each group.
/// Reports come back sorted by scale, condition, then tokens.
pub fn evaluate(results: &[TaskResult], catalog: &TaskCatalog) -> Result<Vec<CheckpointReport>, NpmError> {
    check_unique_tasks(results)?;
    let mut groups: Vec<&TaskResult> = results.iter().collect();
    groups.sort_by(|a, b| {
        (a.model_scale.as_str(), a.condition.as_str())
            .cmp(&(b.model_scale.as_str(), b.condition.as_str()))
            .then(a.checkpoint_tokens.total_cmp(&b.checkpoint_tokens))
    });
    let mut reports = Vec::new();
    let mut start = 0;
    while start < groups.len() {
        let head = groups[start];
        let end = groups[start..]
            .iter()
            .position(|r| {
                r.model_scale != head.model_scale
                    || r.condition != head.condition
                    || r.checkpoint_tokens.total_cmp(&head.checkpoint_tokens) != Ordering::Equal
            })
            .map_or(groups.len(), |off| start + off);
        let mut all = Vec::new();
        let mut by_category: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &groups[start..end] {
            let spec = catalog.get(&r.task_id)?;
            let value = spec.npm(r.raw_score)?;
            all.push(value);
            by_category.entry(spec.category.clone()).or_default().push(value);
        }
        reports.push(CheckpointReport {
            model_scale: head.model_scale.clone(),
            condition: head.condition.clone(),
            checkpoint_tokens: head.checkpoint_tokens,
            overall_npm: mean(&all),
            coverage: all.len(),
            expected_tasks: catalog.len(),
            categories: by_category
                .into_iter()
                .map(|(k, v)| {
                    let tasks = v.len();
                    (
                        k,
                        CategoryScore {
                            npm: mean(&v).unwrap_or_default(),
                            tasks,
                        },
                    )
                })
                .collect(),
        });
        start = end;
    }
    Ok(reports)
}

/// Overall curves per scale and per-category curves per scale, built from
/// checkpoint reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportCurves {
    pub overall: BTreeMap<String, Vec<TrainingCurve>>,
    /// scale -> category -> curves
    pub categories: BTreeMap<String, BTreeMap<String, Vec<TrainingCurve>>>,
}

pub fn curves_from_reports(reports: &[CheckpointReport]) -> Result<ReportCurves, NpmError> {
    type Points = BTreeMap<(String, String), Vec<(f64, f64)>>;
    let mut overall: Points = BTreeMap::new();
    let mut categories: BTreeMap<String, Points> = BTreeMap::new();
    for r in reports {
        let key = (r.model_scale.clone(), r.condition.clone());
        if let Some(v) = r.overall_npm {
            overall.entry(key.clone()).or_default().push((r.checkpoint_tokens, v));
        }
        for (cat, score) in &r.categories {
            categories
                .entry(cat.clone())
                .or_default()
                .entry(key.clone())
                .or_default()
                .push((r.checkpoint_tokens, score.npm));
        }
    }
    let mut out = ReportCurves::default();
    for ((scale, condition), points) in overall {
        let curve = TrainingCurve::new(&condition, &scale, points)?;
        out.overall.entry(scale).or_default().push(curve);
    }
    for (cat, points) in categories {
        for ((scale, condition), points) in points {
            let curve = TrainingCurve::new(&condition, &scale, points)?;
            out.categories
                .entry(scale)
                .or_default()
                .entry(cat.clone())
                .or_default()
                .push(curve);
        }
    }
    Ok(out)
}
