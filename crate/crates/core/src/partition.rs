//! Quality-tier classification and budget-capped subset selection.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, QualityScores, QualityTier};
use crate::digest::seeded_key;
use crate::tokens::{BudgetLedger, CountingScheme};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error("invalid tier policy: {0}")]
    InvalidPolicy(String),
    #[error("tier {0:?} cannot be selected; choose high or low")]
    UnselectableTier(QualityTier),
    #[error("duplicate document id {0} in selection input")]
    DuplicateId(String),
}

/// How the low band is applied to the two scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowPredicate {
    /// Both scores at most `low_max` and the larger at least `low_min`.
    MaxScoreInBand,
    /// At least one score inside `[low_min, low_max]`.
    EitherScoreInBand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TierPolicy {
    pub high_threshold: f64,
    pub low_min: f64,
    pub low_max: f64,
    pub low_predicate: LowPredicate,
}

impl Default for TierPolicy {
    fn default() -> Self {
        Self {
            high_threshold: 2.5,
            low_min: 0.5,
            low_max: 2.0,
            low_predicate: LowPredicate::MaxScoreInBand,
        }
    }
}

impl TierPolicy {
    pub fn validate(&self) -> Result<(), PartitionError> {
        let finite = [self.high_threshold, self.low_min, self.low_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(PartitionError::InvalidPolicy("thresholds must be finite".into()));
        }
        if !(self.low_min <= self.low_max && self.low_max < self.high_threshold) {
            return Err(PartitionError::InvalidPolicy(alloc::format!(
                "need low_min <= low_max < high_threshold, got {} / {} / {}",
                self.low_min,
                self.low_max,
                self.high_threshold
            )));
        }
        Ok(())
    }
}

/// High is strict (`max > high_threshold`); the low band is closed.
pub fn classify_tier(scores: &QualityScores, policy: &TierPolicy) -> QualityTier {
    let top = scores.max();
    if top > policy.high_threshold {
        return QualityTier::High;
    }
    let band = policy.low_min..=policy.low_max;
    let low = match policy.low_predicate {
        LowPredicate::MaxScoreInBand => band.contains(&top),
        LowPredicate::EitherScoreInBand => band.contains(&scores.stem()) || band.contains(&scores.edu()),
    };
    if low {
        QualityTier::Low
    } else {
        QualityTier::Unassigned
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetManifest {
    pub tier: QualityTier,
    pub policy: TierPolicy,
    pub seed: u64,
    pub budget: u64,
    pub counting_scheme: CountingScheme,
    pub total_tokens: u64,
    /// Set when every tier candidate was admitted and the budget still was not met.
    pub supply_shortfall: bool,
    pub candidate_count: u64,
    pub candidate_tokens: u64,
    pub document_ids: Vec<String>,
}

/// Outcome of scanning candidates in a fixed order against a budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    /// Positions (into the scanned order) that were admitted.
    pub admitted: Vec<usize>,
    pub total: u64,
    /// Smallest candidate turned away, if any.
    pub smallest_rejected: Option<u64>,
}

/// Stop-before-overflow admission.
///
/// A candidate that would overflow is skipped and scanning continues; only
/// candidates strictly smaller than every skipped one can still fit, so the
/// scan keeps a running ceiling and stops once nothing can fit.
pub fn admit_in_order(sizes: &[u64], budget: u64) -> Admission {
    let mut ledger = BudgetLedger::new(budget);
    let mut admitted = Vec::new();
    let mut smallest_rejected: Option<u64> = None;
    for (pos, &size) in sizes.iter().enumerate() {
        if smallest_rejected.is_some_and(|ceiling| size >= ceiling) {
            continue;
        }
        if ledger.try_admit(size) {
            admitted.push(pos);
        } else {
            smallest_rejected = Some(size);
        }
    }
    Admission {
        admitted,
        total: ledger.accumulated(),
        smallest_rejected,
    }
}

/// Seeded permutation of `ids`: positions ordered by a keyed hash of each id.
pub fn seeded_order<S: AsRef<str>>(ids: &[S], seed: u64) -> Vec<usize> {
    let mut order: Vec<(u64, &str, usize)> = ids
        .iter()
        .enumerate()
        .map(|(pos, id)| (seeded_key(seed, id.as_ref()), id.as_ref(), pos))
        .collect();
    order.sort_unstable();
    order.into_iter().map(|(_, _, pos)| pos).collect()
}

/// Selects documents of `tier` under `budget` tokens.
pub fn select_subset<'a, I>(
    documents: I,
    tier: QualityTier,
    budget: u64,
    seed: u64,
    policy: &TierPolicy,
    counting_scheme: CountingScheme,
) -> Result<SubsetManifest, PartitionError>
where
    I: IntoIterator<Item = &'a Document>,
{
    policy.validate()?;
    if tier == QualityTier::Unassigned {
        return Err(PartitionError::UnselectableTier(tier));
    }
    let mut seen = BTreeSet::new();
    let mut ids = Vec::new();
    let mut sizes = Vec::new();
    for doc in documents {
        if classify_tier(&doc.scores, policy) != tier {
            continue;
        }
        if !seen.insert(doc.id.clone()) {
            return Err(PartitionError::DuplicateId(doc.id.clone()));
        }
        ids.push(doc.id.as_str());
        sizes.push(doc.token_count);
    }
    let order = seeded_order(&ids, seed);
    let ordered_sizes: Vec<u64> = order.iter().map(|&p| sizes[p]).collect();
    let admission = admit_in_order(&ordered_sizes, budget);
    let document_ids = admission
        .admitted
        .iter()
        .map(|&p| String::from(ids[order[p]]))
        .collect();
    Ok(SubsetManifest {
        tier,
        policy: *policy,
        seed,
        budget,
        counting_scheme,
        total_tokens: admission.total,
        supply_shortfall: admission.smallest_rejected.is_none() && admission.total < budget,
        candidate_count: ids.len() as u64,
        candidate_tokens: sizes.iter().sum(),
        document_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Origin;
    use alloc::collections::BTreeMap;
    use proptest::prelude::*;

    fn scores(stem: f64, edu: f64) -> QualityScores {
        QualityScores::new(stem, edu).unwrap()
    }

    fn doc(id: &str, stem: f64, edu: f64, tokens: u64) -> Document {
        Document {
            id: id.into(),
            text: "t".into(),
            scores: scores(stem, edu),
            token_count: tokens,
            origin: Origin::Original,
            source_url: None,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn tier_examples() {
        let p = TierPolicy::default();
        assert_eq!(classify_tier(&scores(3.0, 1.0), &p), QualityTier::High);
        assert_eq!(classify_tier(&scores(1.5, 1.8), &p), QualityTier::Low);
        assert_eq!(classify_tier(&scores(2.2, 2.3), &p), QualityTier::Unassigned);
        assert_eq!(classify_tier(&scores(0.1, 0.2), &p), QualityTier::Unassigned);
    }

    #[test]
    fn tier_boundaries() {
        let p = TierPolicy::default();
        assert_eq!(classify_tier(&scores(2.5, 2.5), &p), QualityTier::Unassigned);
        assert_eq!(classify_tier(&scores(2.0, 2.0), &p), QualityTier::Low);
        assert_eq!(classify_tier(&scores(0.5, 0.5), &p), QualityTier::Low);
        assert_eq!(classify_tier(&scores(0.0, 5.0), &p), QualityTier::High);
    }

    #[test]
    fn either_predicate_admits_mixed_scores() {
        let p = TierPolicy {
            low_predicate: LowPredicate::EitherScoreInBand,
            ..TierPolicy::default()
        };
        // edu in band, stem in the gap: Low under "either", Unassigned under "max"
        assert_eq!(classify_tier(&scores(2.3, 1.0), &p), QualityTier::Low);
        assert_eq!(
            classify_tier(&scores(2.3, 1.0), &TierPolicy::default()),
            QualityTier::Unassigned
        );
    }

    #[test]
    fn policy_validation() {
        let bad = TierPolicy {
            low_max: 2.5,
            ..TierPolicy::default()
        };
        assert!(bad.validate().is_err());
        assert!(TierPolicy::default().validate().is_ok());
    }

    #[test]
    fn empty_stream_flags_shortfall() {
        let m = select_subset(
            core::iter::empty(),
            QualityTier::High,
            10,
            1,
            &TierPolicy::default(),
            CountingScheme::WhitespaceWords,
        )
        .unwrap();
        assert!(m.document_ids.is_empty());
        assert_eq!(m.total_tokens, 0);
        assert!(m.supply_shortfall);
    }

    #[test]
    fn five_threes_under_ten() {
        let docs: Vec<_> = (0..5).map(|i| doc(&alloc::format!("h{i}"), 3.0, 1.0, 3)).collect();
        let m = select_subset(
            &docs,
            QualityTier::High,
            10,
            42,
            &TierPolicy::default(),
            CountingScheme::WhitespaceWords,
        )
        .unwrap();
        assert_eq!(m.document_ids.len(), 3);
        assert_eq!(m.total_tokens, 9);
        assert!(!m.supply_shortfall);
    }

    #[test]
    fn skip_then_admit_smaller() {
        let a = admit_in_order(&[6, 5, 3], 9);
        assert_eq!(a.admitted, alloc::vec![0, 2]);
        assert_eq!(a.total, 9);
        assert_eq!(a.smallest_rejected, Some(5));
    }

    #[test]
    fn seeded_selection_reaches_six_five_three_order() {
        // find a seed whose permutation scans the sizes as 6, 5, 3
        let docs = [doc("a", 3.0, 0.0, 3), doc("b", 3.0, 0.0, 5), doc("c", 3.0, 0.0, 6)];
        let ids = ["a", "b", "c"];
        let seed = (0..1000u64)
            .find(|&s| seeded_order(&ids, s) == alloc::vec![2, 1, 0])
            .expect("some seed orders c, b, a");
        let m = select_subset(
            &docs,
            QualityTier::High,
            9,
            seed,
            &TierPolicy::default(),
            CountingScheme::WhitespaceWords,
        )
        .unwrap();
        assert_eq!(m.document_ids, alloc::vec![String::from("c"), String::from("a")]);
        assert_eq!(m.total_tokens, 9);
    }

    #[test]
    fn selection_ignores_arrival_order() {
        let docs: Vec<_> = (0..30)
            .map(|i| doc(&alloc::format!("d{i}"), 0.2 + (i % 5) as f64 * 0.4, 1.0, 1 + i % 7))
            .collect();
        let mut reversed = docs.clone();
        reversed.reverse();
        let p = TierPolicy::default();
        let a = select_subset(&docs, QualityTier::Low, 40, 9, &p, CountingScheme::WhitespaceWords).unwrap();
        let b = select_subset(&reversed, QualityTier::Low, 40, 9, &p, CountingScheme::WhitespaceWords).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_candidates_rejected() {
        let docs = [doc("x", 3.0, 3.0, 1), doc("x", 3.0, 3.0, 1)];
        let err = select_subset(
            &docs,
            QualityTier::High,
            5,
            0,
            &TierPolicy::default(),
            CountingScheme::WhitespaceWords,
        )
        .unwrap_err();
        assert_eq!(err, PartitionError::DuplicateId("x".into()));
    }

    /// Exhaustive check of the three-document example: no admission order of
    /// the fixed permutation beats the greedy scan.
    #[test]
    fn greedy_matches_best_prefix_closed_subset_for_small_case() {
        let sizes = [6u64, 5, 3];
        let mut best = 0;
        for mask in 0u32..8 {
            let sum: u64 = (0..3).filter(|i| mask & (1 << i) != 0).map(|i| sizes[i]).sum();
            if sum <= 9 {
                best = best.max(sum);
            }
        }
        assert_eq!(admit_in_order(&sizes, 9).total, best);
    }

    proptest! {
        #[test]
        fn partition_is_exclusive(stem in 0.0f64..=5.0, edu in 0.0f64..=5.0) {
            let tier = classify_tier(&scores(stem, edu), &TierPolicy::default());
            let high = stem.max(edu) > 2.5;
            prop_assert_eq!(tier == QualityTier::High, high);
        }

        #[test]
        fn admission_is_sound_and_maximal(sizes in proptest::collection::vec(1u64..50, 0..60), budget in 0u64..800) {
            let a = admit_in_order(&sizes, budget);
            prop_assert!(a.total <= budget);
            let admitted: BTreeSet<usize> = a.admitted.iter().copied().collect();
            prop_assert_eq!(admitted.len(), a.admitted.len());
            for (pos, &size) in sizes.iter().enumerate() {
                if !admitted.contains(&pos) {
                    prop_assert!(a.total + size > budget);
                }
            }
            if let Some(min) = a.smallest_rejected {
                prop_assert!(a.total + min > budget);
            }
        }

        #[test]
        fn selection_is_deterministic(seed in any::<u64>(), n in 0usize..40, budget in 0u64..300) {
            let docs: Vec<_> = (0..n).map(|i| doc(&alloc::format!("d{i}"), 3.0, 0.0, 1 + (i as u64 * 7) % 23)).collect();
            let p = TierPolicy::default();
            let a = select_subset(&docs, QualityTier::High, budget, seed, &p, CountingScheme::BytesDiv4).unwrap();
            let b = select_subset(&docs, QualityTier::High, budget, seed, &p, CountingScheme::BytesDiv4).unwrap();
            prop_assert!(a.total_tokens <= budget);
            prop_assert_eq!(a, b);
        }
    }
}
