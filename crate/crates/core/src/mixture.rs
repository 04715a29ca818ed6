//! Budget-matched training conditions.
//!
//! A condition crosses a quality tier with "rewrites or not". Conditions with
//! rewrites draw once from originals plus every synthetic style; conditions
//! without repeat the originals for as many epochs as the target needs. Both
//! land within a fixed tolerance of the same token target.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, Document, DocumentError, QualityTier};
use crate::partition::{admit_in_order, seeded_order};

/// Default tolerance as a fraction of the target.
pub const DEFAULT_TOLERANCE: f64 = 0.005;

/// Upper bound on the bitset used by the exact fill, in bits.
const EXACT_FILL_BITS: u64 = 1 << 27;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MixError {
    #[error("invalid condition spec: {0}")]
    InvalidSpec(String),
    #[error("condition {condition}: supply shortfall, built {achieved} of {target} tokens (deficit {deficit}, tolerance {tolerance})")]
    Shortfall {
        condition: String,
        target: u64,
        achieved: u64,
        deficit: u64,
        tolerance: u64,
    },
    #[error("condition {condition}: rewrite corpus does not derive from the original subset: {source}")]
    Provenance { condition: String, source: DocumentError },
    #[error("condition {condition}: rewrites requested but no rewrite corpus supplied")]
    MissingRewrites { condition: String },
    #[error("document {id} has {tokens} tokens, more than the {shard_tokens}-token shard size")]
    OversizeDocument { id: String, tokens: u64, shard_tokens: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub tier: QualityTier,
    pub rewrites: bool,
    pub target_budget: u64,
    pub seed: u64,
    /// Reshuffle each repeated epoch with `seed + epoch_index`. When false
    /// every epoch uses the same seeded order.
    #[serde(default = "default_true")]
    pub reshuffle_epochs: bool,
}

fn default_true() -> bool {
    true
}

impl ConditionSpec {
    pub fn new(tier: QualityTier, rewrites: bool, target_budget: u64, seed: u64) -> Self {
        Self {
            tier,
            rewrites,
            target_budget,
            seed,
            reshuffle_epochs: true,
        }
    }

    /// `edu`, `edu+rewrites`, `non-edu` or `non-edu+rewrites`.
    pub fn name(&self) -> String {
        let base = match self.tier {
            QualityTier::High => "edu",
            QualityTier::Low => "non-edu",
            QualityTier::Unassigned => "unassigned",
        };
        if self.rewrites {
            alloc::format!("{base}+rewrites")
        } else {
            base.to_string()
        }
    }

    pub fn validate(&self) -> Result<(), MixError> {
        if self.tier == QualityTier::Unassigned {
            return Err(MixError::InvalidSpec("tier must be high or low".into()));
        }
        if self.target_budget == 0 {
            return Err(MixError::InvalidSpec("target_budget must be positive".into()));
        }
        Ok(())
    }
}

/// Tokens of slack allowed around `target`.
pub fn tolerance_tokens(target: u64, fraction: f64) -> u64 {
    if fraction.is_finite() && fraction > 0.0 {
        // floor keeps |total - target| <= fraction * target exact
        (target as f64 * fraction) as u64
    } else {
        0
    }
}

/// A built condition: the ordered document sequence plus its accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionDataset<'a> {
    pub spec: ConditionSpec,
    pub sequence: Vec<&'a Document>,
    pub total_tokens: u64,
    pub unique_tokens: u64,
    pub epochs: u32,
    pub tolerance_tokens: u64,
}

impl ConditionDataset<'_> {
    pub fn sizes(&self) -> Vec<u64> {
        self.sequence.iter().map(|d| d.token_count).collect()
    }
}

/// Picks positions from `sizes`, scanned in order, whose sum lands as close to
/// `target` as possible without exceeding it.
///
/// The stop-before-overflow scan runs first. If it misses by more than
/// `tolerance`, an exact subset-sum pass over the same order is tried when it
/// fits in memory, and the better of the two is kept. Selected positions are
/// returned in scan order.
pub fn fill_to_target(sizes: &[u64], target: u64, tolerance: u64) -> Vec<usize> {
    let greedy = admit_in_order(sizes, target);
    if target - greedy.total <= tolerance {
        return greedy.admitted;
    }
    match exact_fill(sizes, target) {
        Some((total, picked)) if total > greedy.total => picked,
        _ => greedy.admitted,
    }
}

fn exact_fill(sizes: &[u64], target: u64) -> Option<(u64, Vec<usize>)> {
    let width = target.checked_add(1)?;
    if (sizes.len() as u64).saturating_mul(width) > EXACT_FILL_BITS {
        return None;
    }
    let width = width as usize;
    let words = width.div_ceil(64);
    // rows[i] = sums reachable with the first i items
    let mut rows: Vec<Vec<u64>> = Vec::with_capacity(sizes.len() + 1);
    let mut first = alloc::vec![0u64; words];
    first[0] = 1;
    rows.push(first);
    for &size in sizes {
        let prev = rows.last().expect("seeded with one row");
        let mut next = prev.clone();
        if (size as usize) < width {
            shifted_or(&mut next, prev, size as usize, width);
        }
        rows.push(next);
    }
    let last = rows.last()?;
    let best = (0..width).rev().find(|&s| bit(last, s))?;
    let mut picked = Vec::new();
    let mut sum = best;
    for i in (0..sizes.len()).rev() {
        if bit(&rows[i], sum) {
            continue;
        }
        picked.push(i);
        sum -= sizes[i] as usize;
    }
    picked.reverse();
    Some((best as u64, picked))
}

fn bit(words: &[u64], i: usize) -> bool {
    words[i / 64] >> (i % 64) & 1 == 1
}

/// `dst |= src << shift`, truncated to `width` bits.
fn shifted_or(dst: &mut [u64], src: &[u64], shift: usize, width: usize) {
    let word_shift = shift / 64;
    let bit_shift = shift % 64;
    for i in (word_shift..dst.len()).rev() {
        let j = i - word_shift;
        let mut v = src[j] << bit_shift;
        if bit_shift > 0 && j > 0 {
            v |= src[j - 1] >> (64 - bit_shift);
        }
        dst[i] |= v;
    }
    let spare = dst.len() * 64 - width;
    if spare > 0 {
        let last = dst.len() - 1;
        dst[last] &= u64::MAX >> spare;
    }
}

/// Builds one condition.
///
/// `originals` is the tier subset. `rewrites` must be present exactly when the
/// spec asks for rewrites, and every synthetic document in it must descend
/// from a document in `originals`.
pub fn build_condition<'a>(
    spec: &ConditionSpec,
    originals: &'a [Document],
    rewrites: Option<&'a [Document]>,
    tolerance_fraction: f64,
) -> Result<ConditionDataset<'a>, MixError> {
    spec.validate()?;
    let name = spec.name();
    let tolerance = tolerance_tokens(spec.target_budget, tolerance_fraction);
    let provenance = |source| MixError::Provenance {
        condition: name.clone(),
        source,
    };
    corpus::check_unique_ids(originals).map_err(provenance)?;
    if let Some(doc) = originals.iter().find(|d| d.origin.is_synthetic()) {
        return Err(MixError::InvalidSpec(alloc::format!(
            "original subset contains synthetic document {}",
            doc.id
        )));
    }

    let (sequence, epochs) = if spec.rewrites {
        let synthetic = rewrites.ok_or_else(|| MixError::MissingRewrites {
            condition: name.clone(),
        })?;
        let parents: BTreeSet<&str> = originals.iter().map(|d| d.id.as_str()).collect();
        if let Some(doc) = synthetic.iter().find(|d| !d.origin.is_synthetic()) {
            return Err(provenance(DocumentError::DanglingParent {
                id: doc.id.clone(),
                parent_id: String::new(),
            }));
        }
        corpus::check_provenance(&parents, synthetic).map_err(provenance)?;
        let pool: Vec<&Document> = originals.iter().chain(synthetic.iter()).collect();
        corpus::check_unique_ids(pool.iter().copied()).map_err(provenance)?;
        let ids: Vec<&str> = pool.iter().map(|d| d.id.as_str()).collect();
        let order = seeded_order(&ids, spec.seed);
        let sizes: Vec<u64> = order.iter().map(|&p| pool[p].token_count).collect();
        let picked = fill_to_target(&sizes, spec.target_budget, tolerance);
        let sequence: Vec<&Document> = picked.into_iter().map(|i| pool[order[i]]).collect();
        (sequence, 1)
    } else {
        let unique: u64 = originals.iter().map(|d| d.token_count).sum();
        if unique == 0 {
            return Err(MixError::Shortfall {
                condition: name,
                target: spec.target_budget,
                achieved: 0,
                deficit: spec.target_budget,
                tolerance,
            });
        }
        let planned = spec.target_budget.div_ceil(unique);
        let ids: Vec<&str> = originals.iter().map(|d| d.id.as_str()).collect();
        let mut sequence = Vec::new();
        let mut epochs = 0u32;
        for epoch in 0..planned {
            let seed = if spec.reshuffle_epochs {
                spec.seed.wrapping_add(epoch)
            } else {
                spec.seed
            };
            let order = seeded_order(&ids, seed);
            let before = sequence.len();
            if epoch + 1 < planned {
                sequence.extend(order.iter().map(|&p| &originals[p]));
            } else {
                let remaining = spec.target_budget - epoch * unique;
                let sizes: Vec<u64> = order.iter().map(|&p| originals[p].token_count).collect();
                let picked = fill_to_target(&sizes, remaining, tolerance);
                sequence.extend(picked.into_iter().map(|i| &originals[order[i]]));
            }
            if sequence.len() > before {
                epochs += 1;
            }
        }
        (sequence, epochs)
    };

    let total_tokens: u64 = sequence.iter().map(|d| d.token_count).sum();
    let mut seen = BTreeSet::new();
    let unique_tokens: u64 = sequence
        .iter()
        .filter(|d| seen.insert(d.id.as_str()))
        .map(|d| d.token_count)
        .sum();
    let deficit = spec.target_budget - total_tokens;
    if deficit > tolerance {
        return Err(MixError::Shortfall {
            condition: name,
            target: spec.target_budget,
            achieved: total_tokens,
            deficit,
            tolerance,
        });
    }
    Ok(ConditionDataset {
        spec: spec.clone(),
        sequence,
        total_tokens,
        unique_tokens,
        epochs,
        tolerance_tokens: tolerance,
    })
}

/// Packs documents, in order, into shards of at most `shard_tokens` tokens.
/// Returns one index range per shard.
pub fn plan_shards(docs: &[&Document], shard_tokens: u64) -> Result<Vec<Range<usize>>, MixError> {
    if let Some(doc) = docs.iter().find(|d| d.token_count > shard_tokens) {
        return Err(MixError::OversizeDocument {
            id: doc.id.clone(),
            tokens: doc.token_count,
            shard_tokens,
        });
    }
    let mut shards = Vec::new();
    let mut start = 0;
    let mut filled = 0u64;
    for (i, doc) in docs.iter().enumerate() {
        if filled + doc.token_count > shard_tokens && i > start {
            shards.push(start..i);
            start = i;
            filled = 0;
        }
        filled += doc.token_count;
    }
    if start < docs.len() {
        shards.push(start..docs.len());
    }
    Ok(shards)
}

/// Continued-pretraining hyperparameters attached to every condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub optimizer_name: String,
    pub learning_rate: f64,
    pub schedule: String,
    pub warmup_fraction: f64,
    pub sequence_length: u32,
    pub condition: ConditionSpec,
}

pub fn emit_training_config(spec: &ConditionSpec) -> TrainingConfig {
    TrainingConfig {
        optimizer_name: "AdamW".into(),
        learning_rate: 3e-4,
        schedule: "cosine".into(),
        warmup_fraction: 0.05,
        sequence_length: 4096,
        condition: spec.clone(),
    }
}
