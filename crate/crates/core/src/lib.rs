//! Allocation-only core of the rewrite-forge pipeline.
//!
//! Everything here is pure computation over in-memory values: document
//! validation, token counting, quality-tier partitioning, rewrite request
//! planning, budget-matched condition mixing, NPM scoring and training-curve
//! analysis. File formats, HTTP and the command line live in the
//! `rewrite-forge` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod curves;
pub mod digest;
pub mod mixture;
pub mod npm;
pub mod partition;
pub mod retry;
pub mod rewrite;
pub mod tokens;

pub use corpus::{Document, DocumentError, Origin, QualityScores, QualityTier};
pub use curves::{CurveError, CurveSummary, SaturationParams, SummaryTable, TrainingCurve};
pub use mixture::{ConditionDataset, ConditionSpec, MixError, TrainingConfig};
pub use npm::{npm, NpmError, TaskCatalog, TaskResult, TaskSpec};
pub use partition::{classify_tier, select_subset, SubsetManifest, TierPolicy};
pub use retry::RetryPolicy;
pub use rewrite::{RewriteRecord, RewriteStyle, SamplingParams, StyleTemplate, TemplateSet};
pub use tokens::{count_tokens, tally_corpus, CountingScheme, TokenCounter, Vocabulary};
