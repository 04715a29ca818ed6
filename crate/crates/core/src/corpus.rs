//! Document data model shared by every pipeline stage.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewrite::RewriteStyle;

/// Inclusive upper bound of both quality scores.
pub const MAX_SCORE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DocumentError {
    #[error("score out of range: {field}={value} (expected a finite value in [0, 5])")]
    ScoreOutOfRange { field: &'static str, value: String },
    #[error("document id is empty")]
    EmptyId,
    #[error("document {id} has empty text")]
    EmptyText { id: String },
    #[error("duplicate document id {id}")]
    DuplicateId { id: String },
    #[error("synthetic document {id} names parent {parent_id}, which is not an original document in this dataset")]
    DanglingParent { id: String, parent_id: String },
}

/// STEM and Educational classifier scores, each in the closed interval [0, 5].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    stem: f64,
    edu: f64,
}

impl QualityScores {
    pub fn new(stem: f64, edu: f64) -> Result<Self, DocumentError> {
        check_score("stem_score", stem)?;
        check_score("edu_score", edu)?;
        Ok(Self { stem, edu })
    }

    pub fn stem(&self) -> f64 {
        self.stem
    }

    pub fn edu(&self) -> f64 {
        self.edu
    }

    /// The larger of the two scores.
    pub fn max(&self) -> f64 {
        if self.stem >= self.edu {
            self.stem
        } else {
            self.edu
        }
    }

    pub fn min(&self) -> f64 {
        if self.stem <= self.edu {
            self.stem
        } else {
            self.edu
        }
    }
}

fn check_score(field: &'static str, value: f64) -> Result<(), DocumentError> {
    if value.is_finite() && (0.0..=MAX_SCORE).contains(&value) {
        Ok(())
    } else {
        Err(DocumentError::ScoreOutOfRange {
            field,
            value: alloc::format!("{value}"),
        })
    }
}

/// Where a document came from. Synthetic documents always carry their style
/// and the id of the original they were rewritten from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Original,
    Synthetic { style: RewriteStyle, parent_id: String },
}

impl Origin {
    pub fn is_synthetic(&self) -> bool {
        matches!(self, Origin::Synthetic { .. })
    }

    pub fn style(&self) -> Option<RewriteStyle> {
        match self {
            Origin::Original => None,
            Origin::Synthetic { style, .. } => Some(*style),
        }
    }

    pub fn parent_id(&self) -> Option<&str> {
        match self {
            Origin::Original => None,
            Origin::Synthetic { parent_id, .. } => Some(parent_id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityTier {
    High,
    Low,
    Unassigned,
}

impl QualityTier {
    pub fn as_str(&self) -> &'static str {
        match self {
            QualityTier::High => "high",
            QualityTier::Low => "low",
            QualityTier::Unassigned => "unassigned",
        }
    }
}

/// One corpus record.
///
/// `extra` keeps fields this crate does not interpret, keyed by field name,
/// with each value held as its raw serialized text so that writers can emit it
/// back unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub scores: QualityScores,
    pub token_count: u64,
    pub origin: Origin,
    pub source_url: Option<String>,
    pub extra: BTreeMap<String, String>,
}

impl Document {
    /// Checks the invariants that do not depend on the rest of the dataset.
    pub fn validate(&self) -> Result<(), DocumentError> {
        if self.id.is_empty() {
            return Err(DocumentError::EmptyId);
        }
        if self.text.is_empty() {
            return Err(DocumentError::EmptyText { id: self.id.clone() });
        }
        QualityScores::new(self.scores.stem, self.scores.edu)?;
        Ok(())
    }
}

/// Fails on the first duplicate id.
pub fn check_unique_ids<'a, I>(docs: I) -> Result<(), DocumentError>
where
    I: IntoIterator<Item = &'a Document>,
{
    let mut seen = BTreeSet::new();
    for doc in docs {
        if !seen.insert(doc.id.as_str()) {
            return Err(DocumentError::DuplicateId { id: doc.id.clone() });
        }
    }
    Ok(())
}

/// Every synthetic document must name an original present in `originals`.
pub fn check_provenance<'a, I>(originals: &BTreeSet<&str>, synthetic: I) -> Result<(), DocumentError>
where
    I: IntoIterator<Item = &'a Document>,
{
    for doc in synthetic {
        if let Origin::Synthetic { parent_id, .. } = &doc.origin {
            if !originals.contains(parent_id.as_str()) {
                return Err(DocumentError::DanglingParent {
                    id: doc.id.clone(),
                    parent_id: parent_id.clone(),
                });
            }
        }
    }
    Ok(())
}
