//! Evaluation inputs and outputs: task specs, per-task results, checkpoint
//! reports and curve files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rewrite_forge_core::curves::slug;
use rewrite_forge_core::npm::{curves_from_reports, evaluate, CheckpointReport};
use rewrite_forge_core::{TaskCatalog, TaskResult, TaskSpec, TrainingCurve};
use serde::{Deserialize, Serialize};

use crate::manifest::write_json;

pub const REPORTS_FILE: &str = "checkpoint-reports.json";

/// Overall curves of one model scale: condition -> `[[tokens_billions, npm], ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFile {
    pub model_scale: String,
    pub curves: BTreeMap<String, Vec<(f64, f64)>>,
}

/// Per-category curves of one model scale: category -> condition -> points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFile {
    pub model_scale: String,
    pub categories: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>>,
}

impl CurveFile {
    pub fn to_curves(&self) -> anyhow::Result<Vec<TrainingCurve>> {
        self.curves
            .iter()
            .map(|(cond, points)| {
                TrainingCurve::new(cond, &self.model_scale, points.clone())
                    .with_context(|| format!("curve {cond} at {}", self.model_scale))
            })
            .collect()
    }

    pub fn from_curves(model_scale: &str, curves: &[TrainingCurve]) -> Self {
        Self {
            model_scale: model_scale.to_string(),
            curves: curves
                .iter()
                .map(|c| (c.condition().to_string(), c.points().to_vec()))
                .collect(),
        }
    }
}

impl CategoryFile {
    pub fn to_curves(&self) -> anyhow::Result<BTreeMap<String, Vec<TrainingCurve>>> {
        let mut out = BTreeMap::new();
        for (category, by_condition) in &self.categories {
            let curves = CurveFile {
                model_scale: self.model_scale.clone(),
                curves: by_condition.clone(),
            }
            .to_curves()
            .with_context(|| format!("category {category}"))?;
            out.insert(category.clone(), curves);
        }
        Ok(out)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_curve_file(path: &Path) -> anyhow::Result<CurveFile> {
    read_json(path)
}

pub fn load_category_file(path: &Path) -> anyhow::Result<CategoryFile> {
    read_json(path)
}

pub fn load_catalog(path: &Path) -> anyhow::Result<TaskCatalog> {
    let specs: Vec<TaskSpec> = read_json(path)?;
    TaskCatalog::new(specs).with_context(|| path.display().to_string())
}

/// Results file: one JSON object per line; blank lines are skipped.
pub fn load_results(path: &Path) -> anyhow::Result<Vec<TaskResult>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TaskResult =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub reports: Vec<CheckpointReport>,
    pub curve_files: Vec<PathBuf>,
    pub category_files: Vec<PathBuf>,
}

/// Scores every checkpoint and writes the reports plus one overall and one
/// category curve file per model scale.
pub fn run_eval(
    results: &[TaskResult],
    catalog: &TaskCatalog,
    out_dir: &Path,
    write: bool,
) -> anyhow::Result<EvalOutput> {
    if results.is_empty() {
        bail!("no task results to evaluate");
    }
    let reports = evaluate(results, catalog)?;
    let curves = curves_from_reports(&reports)?;
    let mut output = EvalOutput {
        reports,
        curve_files: Vec::new(),
        category_files: Vec::new(),
    };
    if write {
        fs::create_dir_all(out_dir)?;
        write_json(&out_dir.join(REPORTS_FILE), &output.reports)?;
    }
    for (scale, list) in &curves.overall {
        let path = out_dir.join(format!("curves-{}.json", slug(scale)));
        if write {
            write_json(&path, &CurveFile::from_curves(scale, list))?;
        }
        output.curve_files.push(path);
    }
    for (scale, by_category) in &curves.categories {
        let file = CategoryFile {
            model_scale: scale.clone(),
            categories: by_category
                .iter()
                .map(|(cat, list)| {
                    let curves = list
                        .iter()
                        .map(|c| (c.condition().to_string(), c.points().to_vec()))
                        .collect();
                    (cat.clone(), curves)
                })
                .collect(),
        };
        let path = out_dir.join(format!("categories-{}.json", slug(scale)));
        if write {
            write_json(&path, &file)?;
        }
        output.category_files.push(path);
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, cat: &str) -> TaskSpec {
        serde_json::from_value(serde_json::json!({
            "task_id": id, "category": cat, "random_baseline": 0.25, "perfect_score": 1.0
        }))
        .unwrap()
    }

    fn result(id: &str, raw: f64, tokens: f64, cond: &str) -> TaskResult {
        TaskResult {
            task_id: id.into(),
            raw_score: raw,
            checkpoint_tokens: tokens,
            condition: cond.into(),
            model_scale: "7B".into(),
        }
    }

    #[test]
    fn reports_and_curve_files() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = TaskCatalog::new([spec("a", "Exams"), spec("b", "Math")]).unwrap();
        let results = vec![
            result("a", 0.55, 5.0, "edu"),
            result("b", 0.25, 5.0, "edu"),
            result("a", 0.70, 10.0, "edu"),
            result("b", 0.40, 10.0, "edu"),
        ];
        let out = run_eval(&results, &catalog, dir.path(), true).unwrap();
        assert_eq!(out.reports.len(), 2);
        assert!((out.reports[0].overall_npm.unwrap() - 20.0).abs() < 1e-9);
        let curves = load_curve_file(&out.curve_files[0]).unwrap().to_curves().unwrap();
        assert_eq!(curves[0].points().len(), 2);
        let cats = load_category_file(&out.category_files[0]).unwrap().to_curves().unwrap();
        assert_eq!(cats.keys().collect::<Vec<_>>(), ["Exams", "Math"]);
        assert!((cats["Exams"][0].points()[0].1 - 40.0).abs() < 1e-9);
    }

    #[test]
    fn curve_file_wire_shape() {
        let f: CurveFile =
            serde_json::from_str(r#"{"model_scale":"7B","curves":{"edu":[[5,30.0],[10,31.5]]}}"#).unwrap();
        let c = f.to_curves().unwrap();
        assert_eq!(c[0].points(), &[(5.0, 30.0), (10.0, 31.5)]);
        let bad: CurveFile =
            serde_json::from_str(r#"{"model_scale":"7B","curves":{"edu":[[10,1.0],[5,2.0]]}}"#).unwrap();
        assert!(bad.to_curves().is_err());
    }

    #[test]
    fn empty_results_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = TaskCatalog::new([spec("a", "Exams")]).unwrap();
        assert!(run_eval(&[], &catalog, dir.path(), false).is_err());
    }
}
