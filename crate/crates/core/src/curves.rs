//! Training-curve analysis: peaks, gaps between conditions, plateau detection
//! and the per-scale peak table.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical row order of the four conditions.
pub const CONDITION_ORDER: [&str; 4] = ["edu+rewrites", "edu", "non-edu+rewrites", "non-edu"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurveError {
    #[error("curve {condition}/{model_scale} has no points")]
    Empty { condition: String, model_scale: String },
    #[error("curve {condition}/{model_scale}: token coordinates must be finite and strictly increasing (at {tokens})")]
    NotIncreasing {
        condition: String,
        model_scale: String,
        tokens: f64,
    },
    #[error("curve {condition}/{model_scale}: non-finite NPM at {tokens}B tokens")]
    NonFinite {
        condition: String,
        model_scale: String,
        tokens: f64,
    },
    #[error("curve {condition}/{model_scale} has no checkpoint at {tokens}B tokens")]
    MissingCheckpoint {
        condition: String,
        model_scale: String,
        tokens: f64,
    },
    #[error("duplicate curve for {condition}/{model_scale}")]
    Duplicate { condition: String, model_scale: String },
    #[error("invalid saturation parameters: {0}")]
    Saturation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    condition: String,
    model_scale: String,
    points: Vec<(f64, f64)>,
}

impl TrainingCurve {
    /// `points` are `(tokens_billions, npm)` in increasing token order.
    pub fn new(condition: &str, model_scale: &str, points: Vec<(f64, f64)>) -> Result<Self, CurveError> {
        let curve = Self {
            condition: condition.to_string(),
            model_scale: model_scale.to_string(),
            points,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<(), CurveError> {
        if self.points.is_empty() {
            return Err(CurveError::Empty {
                condition: self.condition.clone(),
                model_scale: self.model_scale.clone(),
            });
        }
        let mut prev = f64::NEG_INFINITY;
        for &(tokens, value) in &self.points {
            if !tokens.is_finite() || tokens <= prev {
                return Err(CurveError::NotIncreasing {
                    condition: self.condition.clone(),
                    model_scale: self.model_scale.clone(),
                    tokens,
                });
            }
            if !value.is_finite() {
                return Err(CurveError::NonFinite {
                    condition: self.condition.clone(),
                    model_scale: self.model_scale.clone(),
                    tokens,
                });
            }
            prev = tokens;
        }
        Ok(())
    }

    pub fn condition(&self) -> &str {
        &self.condition
    }

    pub fn model_scale(&self) -> &str {
        &self.model_scale
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn npm_at(&self, tokens: f64) -> Option<f64> {
        self.points.iter().find(|&&(t, _)| t == tokens).map(|&(_, v)| v)
    }

    /// Highest NPM and where it was reached; ties go to the earliest checkpoint.
    pub fn peak(&self) -> (f64, f64) {
        let mut best = self.points[0];
        for &p in &self.points[1..] {
            if p.1 > best.1 {
                best = p;
            }
        }
        (best.1, best.0)
    }
}

/// `npm_a(at) - npm_b(at)`. Both curves need a checkpoint at exactly `at`.
pub fn gap(a: &TrainingCurve, b: &TrainingCurve, at_tokens: f64) -> Result<f64, CurveError> {
    let value = |c: &TrainingCurve| {
        c.npm_at(at_tokens).ok_or_else(|| CurveError::MissingCheckpoint {
            condition: c.condition.clone(),
            model_scale: c.model_scale.clone(),
            tokens: at_tokens,
        })
    };
    Ok(value(a)? - value(b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationParams {
    pub epsilon: f64,
    pub min_tail: usize,
}

impl Default for SaturationParams {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            min_tail: 2,
        }
    }
}

/// First checkpoint followed by at least `min_tail` checkpoints, none of which
/// rises more than `epsilon` above it. `None` while the curve keeps climbing.
pub fn saturation_point(curve: &TrainingCurve, params: SaturationParams) -> Result<Option<f64>, CurveError> {
    if !(params.epsilon.is_finite() && params.epsilon > 0.0) {
        return Err(CurveError::Saturation("epsilon must be > 0".into()));
    }
    if params.min_tail == 0 {
        return Err(CurveError::Saturation("min_tail must be >= 1".into()));
    }
    let points = curve.points();
    for (i, &(tokens, value)) in points.iter().enumerate() {
        let tail = &points[i + 1..];
        if tail.len() < params.min_tail {
            break;
        }
        let tail_max = tail.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if tail_max <= value + params.epsilon {
            return Ok(Some(tokens));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub condition: String,
    pub model_scale: String,
    pub peak_npm: f64,
    pub peak_tokens: f64,
    pub saturation_tokens: Option<f64>,
    /// Peak equals the best peak at this scale.
    pub scale_max: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub scales: Vec<String>,
    pub rows: Vec<CurveSummary>,
}

fn condition_rank(condition: &str) -> usize {
    CONDITION_ORDER
        .iter()
        .position(|c| *c == condition)
        .unwrap_or(CONDITION_ORDER.len())
}

/// One row per (condition, scale). Scales keep their first-seen order and
/// conditions follow [`CONDITION_ORDER`], then name.
pub fn summary_table(curves: &[TrainingCurve], saturation: SaturationParams) -> Result<SummaryTable, CurveError> {
    let mut seen = BTreeSet::new();
    let mut scales: Vec<String> = Vec::new();
    for c in curves {
        if !seen.insert((c.condition.as_str(), c.model_scale.as_str())) {
            return Err(CurveError::Duplicate {
                condition: c.condition.clone(),
                model_scale: c.model_scale.clone(),
            });
        }
        if !scales.contains(&c.model_scale) {
            scales.push(c.model_scale.clone());
        }
    }
    let mut rows = Vec::with_capacity(curves.len());
    for c in curves {
        let (peak_npm, peak_tokens) = c.peak();
        rows.push(CurveSummary {
            condition: c.condition.clone(),
            model_scale: c.model_scale.clone(),
            peak_npm,
            peak_tokens,
            saturation_tokens: saturation_point(c, saturation)?,
            scale_max: false,
        });
    }
    for scale in &scales {
        let best = rows
            .iter()
            .filter(|r| &r.model_scale == scale)
            .map(|r| r.peak_npm)
            .fold(f64::NEG_INFINITY, f64::max);
        for r in rows.iter_mut().filter(|r| &r.model_scale == scale) {
            r.scale_max = r.peak_npm == best;
        }
    }
    rows.sort_by(|a, b| {
        let sa = scales.iter().position(|s| *s == a.model_scale);
        let sb = scales.iter().position(|s| *s == b.model_scale);
        sa.cmp(&sb)
            .then(condition_rank(&a.condition).cmp(&condition_rank(&b.condition)))
            .then(a.condition.cmp(&b.condition))
    });
    Ok(SummaryTable { scales, rows })
}

impl SummaryTable {
    pub fn get(&self, condition: &str, model_scale: &str) -> Option<&CurveSummary> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.model_scale == model_scale)
    }

    /// Conditions down, scales across; `*` marks the best peak at each scale.
    pub fn render(&self) -> String {
        let mut conditions: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !conditions.contains(&r.condition.as_str()) {
                conditions.push(&r.condition);
            }
        }
        conditions.sort_by(|a, b| condition_rank(a).cmp(&condition_rank(b)).then(a.cmp(b)));
        let mut out = String::new();
        let _ = write!(out, "{:<20}", "condition");
        for s in &self.scales {
            let _ = write!(out, "  {s:<14}");
        }
        out = out.trim_end().to_string();
        out.push('\n');
        for c in conditions {
            let mut line = String::new();
            let _ = write!(line, "{c:<20}");
            for s in &self.scales {
                let cell = match self.get(c, s) {
                    Some(r) => alloc::format!(
                        "{:.1} ({}B){}",
                        r.peak_npm,
                        format_tokens(r.peak_tokens),
                        if r.scale_max { " *" } else { "" }
                    ),
                    None => "-".to_string(),
                };
                let _ = write!(line, "  {cell:<14}");
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

/// `30` for whole numbers, `12.5` otherwise.
pub fn format_tokens(tokens: f64) -> String {
    if tokens == (tokens as i64) as f64 {
        alloc::format!("{}", tokens as i64)
    } else {
        alloc::format!("{tokens}")
    }
}

/// Column-aligned values of several curves over the union of their checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub columns: Vec<String>,
    pub rows: Vec<(f64, Vec<Option<f64>>)>,
}

pub fn plot_table(curves: &[&TrainingCurve]) -> PlotTable {
    let mut tokens: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).collect();
    tokens.sort_by(f64::total_cmp);
    tokens.dedup();
    let mut ordered: Vec<&TrainingCurve> = curves.to_vec();
    ordered.sort_by(|a, b| {
        condition_rank(&a.condition)
            .cmp(&condition_rank(&b.condition))
            .then(a.condition.cmp(&b.condition))
    });
    let rows = tokens
        .into_iter()
        .map(|t| (t, ordered.iter().map(|c| c.npm_at(t)).collect()))
        .collect();
    PlotTable {
        columns: ordered.iter().map(|c| c.condition.clone()).collect(),
        rows,
    }
}

/// Lowercase ASCII slug: `General Knowledge` -> `general-knowledge`.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for ch in name.chars() {
        if ch.is_alphanumeric() {
            out.extend(ch.to_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}
