//! Label distributions over a fixed label space.
//!
//! A device describes both the data it holds and the data it *wants* to
//! classify well with a [`LabelDistribution`]. Two distributions are compared
//! with the overlap [`similarity`], and the overlap feeds the exponential
//! aggregation [`weight`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of labels in both bundled datasets.
pub const DEFAULT_NUM_LABELS: usize = 10;

const SUM_TOLERANCE: f64 = 1e-9;

/// Normalized label frequencies. Never empty, always sums to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    /// Normalizes raw (non-negative) counts. An all-zero vector is rejected.
    pub fn from_counts(counts: &[f64]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::param("label space must have at least one label"));
        }
        if let Some(bad) = counts.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(Error::param(format!(
                "label count {bad} is not a non-negative finite value"
            )));
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(Error::param("label distribution has no mass"));
        }
        Ok(LabelDistribution {
            probs: counts.iter().map(|c| c / total).collect(),
        })
    }

    /// Takes already-normalized fractions, checking the invariants.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::param("label space must have at least one label"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::param("probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::param(format!("probabilities sum to {total}, not 1")));
        }
        Ok(LabelDistribution { probs })
    }

    /// Equal mass on each of `labels`.
    pub fn uniform_over(labels: &[usize], num_labels: usize) -> Result<Self> {
        let mut counts = vec![0.0; num_labels];
        for &l in labels {
            if l >= num_labels {
                return Err(Error::param(format!(
                    "label {l} outside label space of {num_labels}"
                )));
            }
            counts[l] = 1.0;
        }
        Self::from_counts(&counts)
    }

    /// All mass on one label.
    pub fn point_mass(label: usize, num_labels: usize) -> Result<Self> {
        Self::uniform_over(&[label], num_labels)
    }

    /// Empirical distribution of a label stream.
    pub fn empirical(labels: &[usize], num_labels: usize) -> Result<Self> {
        let mut counts = vec![0.0; num_labels];
        for &l in labels {
            if l >= num_labels {
                return Err(Error::param(format!(
                    "label {l} outside label space of {num_labels}"
                )));
            }
            counts[l] += 1.0;
        }
        Self::from_counts(&counts)
    }

    pub fn num_labels(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, label: usize) -> f64 {
        self.probs.get(label).copied().unwrap_or(0.0)
    }

    /// Labels with non-zero mass.
    pub fn support(&self) -> LabelSet {
        label_set_of(self)
    }
}

/// Sorted, duplicate-free set of label ids. Key type of the gradient table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelSet(Vec<usize>);

impl LabelSet {
    pub fn new(mut labels: Vec<usize>, num_labels: usize) -> Result<Self> {
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::param("duplicate label in label set"));
        }
        if let Some(&l) = labels.last() {
            if l >= num_labels {
                return Err(Error::param(format!(
                    "label {l} outside label space of {num_labels}"
                )));
            }
        }
        Ok(LabelSet(labels))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.0.binary_search(&label).is_ok()
    }

    /// True when every label of `self` is in `other` and `other` is larger.
    pub fn is_strict_subset_of(&self, other: &LabelSet) -> bool {
        self.len() < other.len() && self.0.iter().all(|l| other.contains(*l))
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        f.write_str("}")
    }
}

/// Overlap of two distributions: the sum over labels of the smaller mass.
///
/// Symmetric, 0 for disjoint supports and 1 for identical distributions.
pub fn similarity(a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
    Error::check_len(a.num_labels(), b.num_labels())?;
    Ok(a.probs.iter().zip(&b.probs).map(|(p, q)| p.min(*q)).sum())
}

/// Aggregation weight `exp(-lambda * (1 - sim(goal, dist)))`.
pub fn weight(dist: &LabelDistribution, goal: &LabelDistribution, lambda: f64) -> Result<f64> {
    let sim = similarity(goal, dist)?;
    weight_from_similarity(sim, lambda)
}

/// Same as [`weight`] for a precomputed similarity.
pub fn weight_from_similarity(sim: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::param(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    Ok((-lambda * (1.0 - sim)).exp())
}

pub fn label_set_of(dist: &LabelDistribution) -> LabelSet {
    LabelSet(
        dist.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(l, _)| l)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uni(labels: &[usize]) -> LabelDistribution {
        LabelDistribution::uniform_over(labels, DEFAULT_NUM_LABELS).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let all: Vec<usize> = (0..10).collect();
        assert!((similarity(&uni(&all), &uni(&all)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(similarity(&uni(&[0, 1]), &uni(&[5, 6])).unwrap(), 0.0);
        // min(0.2, 1/3) on labels 3 and 4.
        let s = similarity(&uni(&[0, 1, 2, 3, 4]), &uni(&[3, 4, 5])).unwrap();
        assert!((s - 0.4).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_mismatched_spaces() {
        let a = LabelDistribution::uniform_over(&[0], 3).unwrap();
        let b = LabelDistribution::uniform_over(&[0], 4).unwrap();
        assert!(matches!(similarity(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn weight_examples() {
        let d = uni(&[1, 2]);
        assert_eq!(weight(&d, &d, 3.7).unwrap(), 1.0);
        assert!(
            (weight_from_similarity(0.4, 1.0).unwrap() - 0.548_811_636_094_026_4).abs() < 1e-12
        );
        assert!(
            (weight_from_similarity(0.0, 2.0).unwrap() - 0.135_335_283_236_612_7).abs() < 1e-12
        );
        assert!(weight_from_similarity(0.5, 0.0).is_err());
        assert!(weight_from_similarity(0.5, -1.0).is_err());
    }

    #[test]
    fn label_set_examples() {
        assert_eq!(label_set_of(&uni(&[3, 2])).labels(), &[2, 3]);
        assert_eq!(
            label_set_of(&LabelDistribution::point_mass(7, 10).unwrap()).labels(),
            &[7]
        );
        assert_eq!(label_set_of(&uni(&(0..10).collect::<Vec<_>>())).len(), 10);
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(LabelDistribution::from_counts(&[0.0, 0.0]).is_err());
        assert!(LabelDistribution::from_counts(&[1.0, -1.0]).is_err());
        assert!(LabelDistribution::from_probs(vec![0.5, 0.4]).is_err());
        assert!(LabelDistribution::uniform_over(&[10], 10).is_err());
        assert!(LabelSet::new(vec![1, 1], 10).is_err());
        assert!(LabelSet::new(vec![10], 10).is_err());
    }

    #[test]
    fn from_counts_normalizes() {
        let d = LabelDistribution::from_counts(&[1.0, 3.0]).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.75]);
    }

    #[test]
    fn strict_subset() {
        let small = LabelSet::new(vec![0, 1], 10).unwrap();
        let big = LabelSet::new(vec![0, 1, 2], 10).unwrap();
        assert!(small.is_strict_subset_of(&big));
        assert!(!big.is_strict_subset_of(&small));
        assert!(!big.is_strict_subset_of(&big));
        assert_eq!(big.to_string(), "{0,1,2}");
    }

    fn arb_dist() -> impl Strategy<Value = LabelDistribution> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0..10.0f64], 10)
            .prop_filter("mass", |c| c.iter().sum::<f64>() > 0.0)
            .prop_map(|c| LabelDistribution::from_counts(&c).unwrap())
    }

    proptest! {
        #[test]
        fn similarity_axioms(a in arb_dist(), b in arb_dist()) {
            let ab = similarity(&a, &b).unwrap();
            prop_assert_eq!(ab, similarity(&b, &a).unwrap());
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            prop_assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn weight_is_monotone(s1 in 0.0..1.0f64, s2 in 0.0..1.0f64, lambda in 0.01..10.0f64) {
            prop_assume!(s1 < s2);
            prop_assert!(weight_from_similarity(s1, lambda).unwrap() < weight_from_similarity(s2, lambda).unwrap());
        }

        #[test]
        fn restricted_support_roundtrip(mask in prop::collection::vec(any::<bool>(), 10)) {
            let labels: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(l, _)| l).collect();
            prop_assume!(!labels.is_empty());
            let d = LabelDistribution::uniform_over(&labels, 10).unwrap();
            let set = label_set_of(&d);
            prop_assert_eq!(set.labels(), labels.as_slice());
        }
    }
}
