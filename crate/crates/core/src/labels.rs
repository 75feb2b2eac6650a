//! Reference labels from a three-rater panel.
//!
//! Each rater's differential is mapped onto the taxonomy, deduplicated
//! (highest confidence wins), ranked by confidence with competition ranking,
//! and weighted by inverse rank. Tie groups share their rank's weight
//! equally. The three weighted differentials are summed and renormalized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{ConditionId, ConditionTaxonomy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterDiagnosis {
    pub raw_name: String,
    /// 1 (least) to 5 (most confident).
    pub confidence: u8,
}

impl RaterDiagnosis {
    pub fn new(raw_name: impl Into<String>, confidence: u8) -> Self {
        Self { raw_name: raw_name.into(), confidence }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappedDiagnosis {
    pub condition: ConditionId,
    pub confidence: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedEntry {
    pub condition: ConditionId,
    pub weight: f64,
}

/// Entries ordered by descending weight, then ascending condition id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightedDifferential {
    entries: Vec<WeightedEntry>,
}

impl WeightedDifferential {
    /// Sorts into canonical order. Callers guarantee unique ids and positive weights.
    ///
    /// Weights are compared on a 1e-12 grid so that sums which are equal as
    /// rationals but differ in the last ulp still tie and fall back to id order.
    fn from_unsorted(mut entries: Vec<WeightedEntry>) -> Self {
        entries.sort_by(|a, b| {
            tie_key(b.weight).cmp(&tie_key(a.weight)).then(a.condition.cmp(&b.condition))
        });
        Self { entries }
    }

    /// A single-condition differential with weight 1.
    pub fn single(condition: ConditionId) -> Self {
        Self { entries: vec![WeightedEntry { condition, weight: 1.0 }] }
    }

    pub fn entries(&self) -> &[WeightedEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self) -> Option<ConditionId> {
        self.entries.first().map(|e| e.condition)
    }

    pub fn total_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }
}

fn tie_key(w: f64) -> i64 {
    (w * 1e12).round() as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ambiguity {
    Unanimous,
    Intermediate,
    Ambiguous,
}

impl Ambiguity {
    pub fn as_str(self) -> &'static str {
        match self {
            Ambiguity::Unanimous => "unanimous",
            Ambiguity::Intermediate => "intermediate",
            Ambiguity::Ambiguous => "ambiguous",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLabel {
    pub top1: ConditionId,
    pub combined: WeightedDifferential,
    pub ambiguity: Ambiguity,
}

/// Maps raw names, drops unmappable ones and keeps the highest confidence per condition.
/// Output is ordered by condition id.
pub fn map_and_dedup(diagnoses: &[RaterDiagnosis], taxonomy: &ConditionTaxonomy) -> Vec<MappedDiagnosis> {
    let mut best: BTreeMap<ConditionId, u8> = BTreeMap::new();
    for d in diagnoses {
        if let Some(id) = taxonomy.map_diagnosis(&d.raw_name) {
            let slot = best.entry(id).or_insert(d.confidence);
            *slot = (*slot).max(d.confidence);
        }
    }
    best.into_iter()
        .map(|(condition, confidence)| MappedDiagnosis { condition, confidence })
        .collect()
}

/// Inverse-rank weights with competition ranking over confidence ties.
pub fn rank_weights(deduped: &[MappedDiagnosis]) -> WeightedDifferential {
    let mut sorted = deduped.to_vec();
    sorted.sort_by(|a, b| b.confidence.cmp(&a.confidence).then(a.condition.cmp(&b.condition)));
    let mut entries = Vec::with_capacity(sorted.len());
    let mut start = 0;
    while start < sorted.len() {
        let conf = sorted[start].confidence;
        let end = start + sorted[start..].iter().take_while(|d| d.confidence == conf).count();
        let rank = start + 1;
        let group = end - start;
        let share = (1.0 / rank as f64) / group as f64;
        entries.extend(sorted[start..end].iter().map(|d| WeightedEntry { condition: d.condition, weight: share }));
        start = end;
    }
    WeightedDifferential::from_unsorted(entries)
}

/// Weighted differential for one rater's raw diagnoses.
pub fn rater_differential(diagnoses: &[RaterDiagnosis], taxonomy: &ConditionTaxonomy) -> WeightedDifferential {
    rank_weights(&map_and_dedup(diagnoses, taxonomy))
}

/// Sums the three raters' weights per condition and renormalizes.
pub fn combine_panel(per_rater: &[WeightedDifferential; 3]) -> Result<ReferenceLabel> {
    if per_rater.iter().all(WeightedDifferential::is_empty) {
        return Err(Error::Undiagnosable);
    }
    let mut parts: BTreeMap<ConditionId, Vec<f64>> = BTreeMap::new();
    for rater in per_rater {
        for e in &rater.entries {
            parts.entry(e.condition).or_default().push(e.weight);
        }
    }
    // Summing in sorted order makes the result bit-identical under any rater order.
    let raw = WeightedDifferential::from_unsorted(
        parts
            .into_iter()
            .map(|(condition, mut w)| {
                w.sort_by(f64::total_cmp);
                WeightedEntry { condition, weight: w.iter().sum() }
            })
            .collect(),
    );
    let top1 = raw.top().expect("nonempty");
    let total = raw.total_weight();
    let combined = WeightedDifferential {
        entries: raw
            .entries
            .iter()
            .map(|e| WeightedEntry { condition: e.condition, weight: e.weight / total })
            .collect(),
    };

    let tops: Vec<Option<ConditionId>> = per_rater.iter().map(WeightedDifferential::top).collect();
    let agree = |a: usize, b: usize| tops[a].is_some() && tops[a] == tops[b];
    let ambiguity = if agree(0, 1) && agree(1, 2) {
        Ambiguity::Unanimous
    } else if agree(0, 1) || agree(0, 2) || agree(1, 2) {
        Ambiguity::Intermediate
    } else {
        Ambiguity::Ambiguous
    };
    Ok(ReferenceLabel { top1, combined, ambiguity })
}

/// Full reference-label construction from a raw three-rater panel.
pub fn reference_label(panel: &[Vec<RaterDiagnosis>; 3], taxonomy: &ConditionTaxonomy) -> Result<ReferenceLabel> {
    let per_rater = [
        rater_differential(&panel[0], taxonomy),
        rater_differential(&panel[1], taxonomy),
        rater_differential(&panel[2], taxonomy),
    ];
    combine_panel(&per_rater)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tax() -> ConditionTaxonomy {
        ConditionTaxonomy::desk_default()
    }

    fn id(t: &ConditionTaxonomy, name: &str) -> ConditionId {
        t.map_diagnosis(name).unwrap()
    }

    fn md(c: usize, conf: u8) -> MappedDiagnosis {
        MappedDiagnosis { condition: ConditionId(c), confidence: conf }
    }

    fn weights(w: &WeightedDifferential) -> Vec<f64> {
        w.entries().iter().map(|e| e.weight).collect()
    }

    #[test]
    fn dedup_keeps_highest_confidence() {
        let t = tax();
        let out = map_and_dedup(
            &[RaterDiagnosis::new("Eczema", 4), RaterDiagnosis::new("Atopic dermatitis", 2)],
            &t,
        );
        assert_eq!(out, vec![MappedDiagnosis { condition: id(&t, "Eczema"), confidence: 4 }]);
        assert!(map_and_dedup(&[RaterDiagnosis::new("quantum rash", 5)], &t).is_empty());
        let tinea = map_and_dedup(&[RaterDiagnosis::new("Tinea", 3)], &t);
        assert_eq!(tinea, vec![MappedDiagnosis { condition: id(&t, "Tinea"), confidence: 3 }]);
    }

    #[test]
    fn rank_weight_examples() {
        assert_eq!(weights(&rank_weights(&[md(0, 5), md(1, 3), md(2, 3)])), vec![1.0, 0.25, 0.25]);
        assert_eq!(weights(&rank_weights(&[md(4, 4)])), vec![1.0]);
        assert_eq!(weights(&rank_weights(&[md(0, 2), md(1, 2)])), vec![0.5, 0.5]);
        // competition ranking: 1, 2, 2, 4
        assert_eq!(
            weights(&rank_weights(&[md(0, 5), md(1, 4), md(2, 4), md(3, 1)])),
            vec![1.0, 0.25, 0.25, 0.25]
        );
    }

    #[test]
    fn harmonic_sum_without_ties() {
        let d: Vec<_> = (0..5).map(|i| md(i, 5 - i as u8)).collect();
        let h: f64 = (1..=5).map(|r| 1.0 / r as f64).sum();
        assert!((rank_weights(&d).total_weight() - h).abs() < 1e-12);
    }

    #[test]
    fn panel_agreement_classes() {
        let t = tax();
        let e = WeightedDifferential::single(id(&t, "Eczema"));
        let ti = WeightedDifferential::single(id(&t, "Tinea"));
        let p = WeightedDifferential::single(id(&t, "Psoriasis"));

        let l = combine_panel(&[e.clone(), e.clone(), e.clone()]).unwrap();
        assert_eq!(l.top1, id(&t, "Eczema"));
        assert_eq!(l.ambiguity, Ambiguity::Unanimous);

        let l = combine_panel(&[e.clone(), e.clone(), ti.clone()]).unwrap();
        assert_eq!(l.ambiguity, Ambiguity::Intermediate);
        assert_eq!(l.top1, id(&t, "Eczema"));

        let l = combine_panel(&[e, ti, p]).unwrap();
        assert_eq!(l.ambiguity, Ambiguity::Ambiguous);
        assert!((l.combined.total_weight() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_panel_is_undiagnosable() {
        let empty = WeightedDifferential::default();
        assert!(matches!(
            combine_panel(&[empty.clone(), empty.clone(), empty]),
            Err(Error::Undiagnosable)
        ));
    }

    #[test]
    fn top1_ties_break_to_lower_id() {
        let a = WeightedDifferential::single(ConditionId(7));
        let b = WeightedDifferential::single(ConditionId(3));
        let l = combine_panel(&[a, b, WeightedDifferential::default()]).unwrap();
        assert_eq!(l.top1, ConditionId(3));
        assert_eq!(l.ambiguity, Ambiguity::Ambiguous);
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            diag in proptest::collection::vec((0usize..40, 1u8..=5), 0..6),
            seed in any::<u64>(),
        ) {
            let t = tax();
            let raw: Vec<RaterDiagnosis> = diag
                .iter()
                .map(|&(c, conf)| RaterDiagnosis::new(t.name(ConditionId(c)), conf))
                .collect();
            let mut shuffled = raw.clone();
            // deterministic Fisher-Yates from the seed
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(rater_differential(&raw, &t), rater_differential(&shuffled, &t));
        }

        #[test]
        fn combined_weights_sum_to_one(
            panel in proptest::array::uniform3(proptest::collection::vec((0usize..40, 1u8..=5), 1..5)),
            order in 0usize..6,
        ) {
            let diffs: Vec<WeightedDifferential> = panel
                .iter()
                .map(|r| rank_weights(&r.iter().map(|&(c, k)| md(c, k)).collect::<Vec<_>>()))
                .map(|w| {
                    // dedup is the caller's job for rank_weights; re-run through the map path
                    let mut seen = std::collections::BTreeMap::new();
                    for e in w.entries() { seen.entry(e.condition).or_insert(e.weight); }
                    WeightedDifferential::from_unsorted(seen.into_iter().map(|(condition, weight)| WeightedEntry { condition, weight }).collect())
                })
                .collect();
            let perms = [[0,1,2],[0,2,1],[1,0,2],[1,2,0],[2,0,1],[2,1,0]];
            let p = perms[order];
            let a = combine_panel(&[diffs[0].clone(), diffs[1].clone(), diffs[2].clone()]).unwrap();
            let b = combine_panel(&[diffs[p[0]].clone(), diffs[p[1]].clone(), diffs[p[2]].clone()]).unwrap();
            prop_assert!((a.combined.total_weight() - 1.0).abs() < 1e-12);
            prop_assert_eq!(a.top1, b.top1);
            prop_assert_eq!(a.ambiguity, b.ambiguity);
        }
    }
}
