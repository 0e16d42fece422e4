//! Nearest-neighbor-prototype classification: class-mean prototypes and a
//! softmax over negative query-to-prototype distances.

use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{invalid, Result, RnnpError};
use crate::vecmath::{check_dims, FeatureVec, Metric, WeightedSum};

/// One prototype per episode class, indexed by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrototypeSet(Vec<FeatureVec>);

impl PrototypeSet {
    pub fn new(prototypes: Vec<FeatureVec>) -> Result<Self> {
        let first = prototypes
            .first()
            .ok_or_else(|| invalid("prototype set must not be empty"))?;
        for p in &prototypes {
            check_dims(first.dim(), p.dim())?;
        }
        Ok(Self(prototypes))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.0[0].dim()
    }

    pub fn get(&self, class: usize) -> &FeatureVec {
        &self.0[class]
    }

    pub fn as_slice(&self) -> &[FeatureVec] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<FeatureVec> {
        self.0
    }
}

/// Per-class probabilities for one query; sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassProbabilities(Vec<f64>);

impl ClassProbabilities {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Which support labels to group by when averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Observed,
    True,
}

/// Class-mean prototypes over the support set.
pub fn compute_prototypes(episode: &Episode, label_source: LabelSource) -> Result<PrototypeSet> {
    let labels = match label_source {
        LabelSource::Observed => &episode.support_observed_labels,
        LabelSource::True => &episode.support_true_labels,
    };
    let dim = episode.dim();
    let mut sums = vec![WeightedSum::new(dim); episode.n_way];
    for (f, &l) in episode.support_features.iter().zip(labels) {
        sums[l].add(f.as_slice(), 1.0);
    }
    let prototypes = sums
        .iter()
        .enumerate()
        .map(|(class, s)| s.mean().ok_or(RnnpError::DegenerateClass { class }))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrototypeSet(prototypes))
}

/// Softmax of `-distances`, shifted by the smallest distance so that large
/// distances cannot underflow every term.
pub(crate) fn softmax_neg_into(distances: &[f64], out: &mut [f64]) {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (o, &d) in out.iter_mut().zip(distances) {
        *o = (min - d).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Classifies `query` with squared Euclidean distance.
pub fn classify(
    prototypes: &PrototypeSet,
    query: &FeatureVec,
) -> Result<(ClassProbabilities, usize)> {
    classify_with(prototypes, query, Metric::SquaredEuclidean)
}

pub fn classify_with(
    prototypes: &PrototypeSet,
    query: &FeatureVec,
    metric: Metric,
) -> Result<(ClassProbabilities, usize)> {
    check_dims(prototypes.dim(), query.dim())?;
    let distances: Vec<f64> = prototypes
        .as_slice()
        .iter()
        .map(|p| metric.eval(query.as_slice(), p.as_slice()))
        .collect();
    let mut probs = vec![0.0; distances.len()];
    softmax_neg_into(&distances, &mut probs);
    let probs = ClassProbabilities(probs);
    let predicted = probs.argmax();
    Ok((probs, predicted))
}
