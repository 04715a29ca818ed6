//! Results artifacts: the peak summary, condition gaps, saturation points and
//! plot tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use rewrite_forge_core::curves::{format_tokens, gap, plot_table, slug, summary_table, PlotTable};
use rewrite_forge_core::{SaturationParams, SummaryTable, TrainingCurve};
use serde::{Deserialize, Serialize};

use crate::manifest::write_json;

pub const SUMMARY_TEXT: &str = "summary.txt";
pub const SUMMARY_JSON: &str = "summary.json";
pub const INDEX_FILE: &str = "index.json";

/// Rewrite-vs-plain pairs compared at the gap checkpoint.
pub const GAP_PAIRS: [(&str, &str); 2] = [("edu+rewrites", "edu"), ("non-edu+rewrites", "non-edu")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub model_scale: String,
    pub condition_a: String,
    pub condition_b: String,
    pub at_tokens: f64,
    /// `npm_a - npm_b`; absent when either curve lacks the checkpoint.
    pub gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPeak {
    pub model_scale: String,
    pub category: String,
    pub condition: String,
    pub peak_npm: f64,
    pub peak_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub saturation: SaturationParams,
    pub table: SummaryTable,
    pub gaps: Vec<GapRow>,
    pub category_peaks: Vec<CategoryPeak>,
}

/// Curves of one model scale, overall and by category.
#[derive(Debug, Clone, Default)]
pub struct ScaleCurves {
    pub overall: Vec<TrainingCurve>,
    pub categories: BTreeMap<String, Vec<TrainingCurve>>,
}

pub fn analyze(
    scales: &BTreeMap<String, ScaleCurves>,
    scale_order: &[String],
    saturation: SaturationParams,
    gap_at: f64,
) -> anyhow::Result<Analysis> {
    let ordered: Vec<&String> = scale_order.iter().filter(|s| scales.contains_key(*s)).collect();
    let all: Vec<TrainingCurve> = ordered
        .iter()
        .flat_map(|s| scales[*s].overall.iter().cloned())
        .collect();
    let table = summary_table(&all, saturation)?;
    let mut gaps = Vec::new();
    let mut category_peaks = Vec::new();
    for scale in ordered {
        let set = &scales[scale];
        let find = |name: &str| set.overall.iter().find(|c| c.condition() == name);
        for (a, b) in GAP_PAIRS {
            let (Some(ca), Some(cb)) = (find(a), find(b)) else {
                continue;
            };
            let (value, missing) = match gap(ca, cb, gap_at) {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            };
            gaps.push(GapRow {
                model_scale: scale.clone(),
                condition_a: a.into(),
                condition_b: b.into(),
                at_tokens: gap_at,
                gap: value,
                missing,
            });
        }
        for (category, curves) in &set.categories {
            for c in curves {
                let (peak_npm, peak_tokens) = c.peak();
                category_peaks.push(CategoryPeak {
                    model_scale: scale.clone(),
                    category: category.clone(),
                    condition: c.condition().into(),
                    peak_npm,
                    peak_tokens,
                });
            }
        }
    }
    Ok(Analysis {
        saturation,
        table,
        gaps,
        category_peaks,
    })
}

impl Analysis {
    pub fn render(&self) -> String {
        let mut out = String::from("Peak average NPM (tokens at peak, billions); * marks the best per scale\n\n");
        out.push_str(&self.table.render());
        if !self.gaps.is_empty() {
            out.push_str("\nGaps\n");
            for g in &self.gaps {
                let value = g.gap.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.1}"));
                out.push_str(&format!(
                    "{:<6} {} vs {} at {}B: {value}\n",
                    g.model_scale,
                    g.condition_a,
                    g.condition_b,
                    format_tokens(g.at_tokens)
                ));
            }
        }
        out.push_str(&format!(
            "\nSaturation (epsilon {}, min tail {})\n",
            self.saturation.epsilon, self.saturation.min_tail
        ));
        for r in &self.table.rows {
            let at = r.saturation_tokens.map_or_else(
                || "none (still rising)".to_string(),
                |t| format!("{}B", format_tokens(t)),
            );
            out.push_str(&format!("{:<6} {:<18} {at}\n", r.model_scale, r.condition));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotFile {
    pub group: String,
    pub file: String,
    pub columns: Vec<String>,
    pub rows: usize,
}

fn write_plot_csv(path: &Path, table: &PlotTable) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    let mut header = vec!["tokens_billions".to_string()];
    header.extend(table.columns.iter().cloned());
    w.write_record(&header)?;
    for (tokens, values) in &table.rows {
        let mut row = vec![format_tokens(*tokens)];
        row.extend(values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One CSV per group, named by the group's slug, plus an index. Groups with
/// no curves produce no file.
pub fn emit_plot_data(dir: &Path, groups: &[(String, Vec<&TrainingCurve>)]) -> anyhow::Result<Vec<PlotFile>> {
    fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    let mut index = Vec::new();
    for (group, curves) in groups {
        if curves.is_empty() {
            continue;
        }
        let table = plot_table(curves);
        let file = format!("{}.csv", slug(group));
        write_plot_csv(&dir.join(&file), &table)?;
        index.push(PlotFile {
            group: group.clone(),
            file,
            columns: table.columns,
            rows: table.rows.len(),
        });
    }
    write_json(&dir.join(INDEX_FILE), &index)?;
    Ok(index)
}

/// Writes the summary and every plot table under `dir`.
pub fn write_analysis(
    dir: &Path,
    analysis: &Analysis,
    scales: &BTreeMap<String, ScaleCurves>,
) -> anyhow::Result<Vec<PlotFile>> {
    fs::create_dir_all(dir)?;
    let plots = dir.join("plots");
    if plots.exists() {
        // tables from an earlier run with other groups must not linger
        fs::remove_dir_all(&plots)?;
    }
    fs::write(dir.join(SUMMARY_TEXT), analysis.render())?;
    write_json(&dir.join(SUMMARY_JSON), analysis)?;
    let overall: Vec<(String, Vec<&TrainingCurve>)> = scales
        .iter()
        .map(|(scale, set)| (scale.clone(), set.overall.iter().collect()))
        .collect();
    let mut files = emit_plot_data(&plots, &overall)?;
    for (scale, set) in scales {
        if set.categories.is_empty() {
            continue;
        }
        let groups: Vec<(String, Vec<&TrainingCurve>)> = set
            .categories
            .iter()
            .map(|(cat, curves)| (cat.clone(), curves.iter().collect()))
            .collect();
        let sub = format!("categories-{}", slug(scale));
        for mut f in emit_plot_data(&plots.join(&sub), &groups)? {
            f.file = format!("{sub}/{}", f.file);
            files.push(f);
        }
    }
    Ok(files)
}
