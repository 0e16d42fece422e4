//! Feature vectors and the distance metrics used throughout the crate.
//!
//! All arithmetic is `f64` and every reduction runs in index order, so results
//! are reproducible bit-for-bit for identical inputs.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RnnpError};

/// A finite, non-empty embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVec(Vec<f64>);

impl FeatureVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("feature vector must have dim >= 1"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at coordinate {pos}")));
        }
        Ok(Self(values))
    }

    /// Wraps values produced by arithmetic on already-validated vectors.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self + offset`, coordinate-wise.
    pub fn translated(&self, offset: &[f64]) -> Result<Self> {
        check_dims(self.dim(), offset.len())?;
        Self::new(self.0.iter().zip(offset).map(|(a, b)| a + b).collect())
    }

    /// `alpha * self + (1 - alpha) * other`.
    pub fn mix(&self, other: &FeatureVec, alpha: f64) -> Self {
        debug_assert_eq!(self.dim(), other.dim());
        let beta = 1.0 - alpha;
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        )
    }
}

impl TryFrom<Vec<f64>> for FeatureVec {
    type Error = RnnpError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<FeatureVec> for Vec<f64> {
    fn from(v: FeatureVec) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for FeatureVec {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Distance used for soft assignment and classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SquaredEuclidean,
    /// `1 - cos(a, b)`; zero vectors are treated as maximally dissimilar to everything.
    Cosine,
}

impl Metric {
    /// Distance between two equal-length slices. Callers guarantee the lengths match.
    #[inline]
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::SquaredEuclidean => sq_dist(a, b),
            Metric::Cosine => cosine_dist(a, b),
        }
    }

    pub fn distance(self, a: &FeatureVec, b: &FeatureVec) -> Result<f64> {
        check_dims(a.dim(), b.dim())?;
        Ok(self.eval(a.as_slice(), b.as_slice()))
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn cosine_dist(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

pub(crate) fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(invalid(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `sum_k (a_k - b_k)^2`.
pub fn squared_euclidean(a: &FeatureVec, b: &FeatureVec) -> Result<f64> {
    Metric::SquaredEuclidean.distance(a, b)
}

/// Running `sum_i w_i v_i` and `sum_i w_i`, accumulated in insertion order.
///
/// Zero weights are skipped entirely, so the sum over a hard (one-hot)
/// assignment is exactly the plain sum of the assigned vectors.
#[derive(Debug, Clone)]
pub struct WeightedSum {
    sum: Vec<f64>,
    weight: f64,
}

impl WeightedSum {
    pub fn new(dim: usize) -> Self {
        Self {
            sum: vec![0.0; dim],
            weight: 0.0,
        }
    }

    #[inline]
    pub fn add(&mut self, v: &[f64], w: f64) {
        if w == 0.0 {
            return;
        }
        for (s, x) in self.sum.iter_mut().zip(v) {
            *s += w * x;
        }
        self.weight += w;
    }

    pub fn total_weight(&self) -> f64 {
        self.weight
    }

    /// The weighted mean, or `None` when the accumulated weight is not positive.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn mean(&self) -> Option<FeatureVec> {
        // Also rejects NaN.
        if !(self.weight > 0.0) {
            return None;
        }
        let w = self.weight;
        Some(FeatureVec::from_raw(
            self.sum.iter().map(|s| s / w).collect(),
        ))
    }
}

/// `(sum_i w_i v_i) / (sum_i w_i)`.
pub fn weighted_mean(vectors: &[FeatureVec], weights: &[f64]) -> Result<FeatureVec> {
    let first = vectors
        .first()
        .ok_or_else(|| RnnpError::Degenerate("weighted_mean of empty list".into()))?;
    if vectors.len() != weights.len() {
        return Err(invalid(format!(
            "{} vectors but {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(invalid(format!(
            "weights must be finite and non-negative, got {w}"
        )));
    }
    let mut acc = WeightedSum::new(first.dim());
    for (v, &w) in vectors.iter().zip(weights) {
        check_dims(first.dim(), v.dim())?;
        acc.add(v.as_slice(), w);
    }
    acc.mean()
        .ok_or_else(|| RnnpError::Degenerate("total weight is zero".into()))
}

/// Unweighted mean of a non-empty list.
pub fn mean(vectors: &[FeatureVec]) -> Result<FeatureVec> {
    weighted_mean(vectors, &vec![1.0; vectors.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVec {
        FeatureVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn squared_euclidean_examples() {
        assert_eq!(
            squared_euclidean(&fv(&[0.0, 0.0]), &fv(&[3.0, 4.0])).unwrap(),
            25.0
        );
        let a = fv(&[1.5, -2.0, 7.0]);
        assert_eq!(squared_euclidean(&a, &a).unwrap(), 0.0);
        assert_eq!(squared_euclidean(&fv(&[2.0]), &fv(&[5.0])).unwrap(), 9.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = squared_euclidean(&fv(&[1.0]), &fv(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, RnnpError::InvalidInput(_)));
    }

    #[test]
    fn feature_vec_rejects_bad_values() {
        assert!(FeatureVec::new(vec![]).is_err());
        assert!(FeatureVec::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVec::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn weighted_mean_examples() {
        let m = weighted_mean(&[fv(&[0.0, 0.0]), fv(&[2.0, 2.0])], &[1.0, 1.0]).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 1.0]);
        let m = weighted_mean(&[fv(&[1.0, 0.0]), fv(&[0.0, 1.0])], &[3.0, 1.0]).unwrap();
        assert_eq!(m.as_slice(), &[0.75, 0.25]);
        let v = fv(&[0.3, -1.7, 4.0]);
        assert_eq!(weighted_mean(std::slice::from_ref(&v), &[2.5]).unwrap(), v);
    }

    #[test]
    fn weighted_mean_degenerate_inputs() {
        assert!(matches!(
            weighted_mean(&[], &[]),
            Err(RnnpError::Degenerate(_))
        ));
        assert!(matches!(
            weighted_mean(&[fv(&[1.0])], &[0.0]),
            Err(RnnpError::Degenerate(_))
        ));
        assert!(weighted_mean(&[fv(&[1.0])], &[1.0, 2.0]).is_err());
        assert!(weighted_mean(&[fv(&[1.0])], &[-1.0]).is_err());
    }

    #[test]
    fn cosine_metric() {
        let d = Metric::Cosine
            .distance(&fv(&[1.0, 0.0]), &fv(&[0.0, 2.0]))
            .unwrap();
        assert_relative_eq!(d, 1.0);
        let d = Metric::Cosine
            .distance(&fv(&[1.0, 1.0]), &fv(&[2.0, 2.0]))
            .unwrap();
        assert_relative_eq!(d, 0.0, epsilon = 1e-15);
    }

    fn pair(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        let c = || proptest::collection::vec(-100.0f64..100.0, dim);
        (c(), c(), c())
    }

    proptest! {
        #[test]
        fn distance_symmetric_and_translation_invariant(
            (a, b, t) in (1usize..12).prop_flat_map(pair)
        ) {
            let (a, b) = (fv(&a), fv(&b));
            let ab = squared_euclidean(&a, &b).unwrap();
            prop_assert_eq!(ab, squared_euclidean(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            let shifted = squared_euclidean(&a.translated(&t).unwrap(), &b.translated(&t).unwrap()).unwrap();
            prop_assert!((shifted - ab).abs() <= 1e-9 * (1.0 + ab));
        }

        #[test]
        fn weighted_mean_scale_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 3), 1..8),
            scale in 1e-3f64..1e3,
            seed_w in proptest::collection::vec(0.01f64..10.0, 8),
        ) {
            let vs: Vec<_> = rows.iter().map(|r| fv(r)).collect();
            let ws = &seed_w[..vs.len()];
            let scaled: Vec<f64> = ws.iter().map(|w| w * scale).collect();
            let m1 = weighted_mean(&vs, ws).unwrap();
            let m2 = weighted_mean(&vs, &scaled).unwrap();
            for (x, y) in m1.as_slice().iter().zip(m2.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}
