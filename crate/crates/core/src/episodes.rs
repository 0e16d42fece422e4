//! Embedding pools, N-way K-shot episode sampling, and support-label corruption.
//!
//! Inside an episode, classes are identified by their position `0..n_way`
//! in the order they were drawn from the pool.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::vecmath::{check_dims, FeatureVec};

/// Class identifier as it appears in an embedding pool.
pub type ClassId = i64;

/// A labeled pool of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Vec<FeatureVec>,
    labels: Vec<ClassId>,
    class_index: BTreeMap<ClassId, Vec<usize>>,
    /// True class means, known only for synthetic pools.
    means: Option<BTreeMap<ClassId, FeatureVec>>,
}

impl EmbeddingSet {
    pub fn new(features: Vec<FeatureVec>, labels: Vec<ClassId>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(invalid(format!(
                "{} features but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            for f in &features {
                check_dims(first.dim(), f.dim())?;
            }
        }
        let mut class_index: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            class_index.entry(l).or_default().push(i);
        }
        Ok(Self {
            features,
            labels,
            class_index,
            means: None,
        })
    }

    /// Attaches the generating class means (used by the Bayes oracle).
    pub fn with_means(mut self, means: BTreeMap<ClassId, FeatureVec>) -> Result<Self> {
        if let Some(dim) = self.dim() {
            for m in means.values() {
                check_dims(dim, m.dim())?;
            }
        }
        self.means = Some(means);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.features.first().map(FeatureVec::dim)
    }

    pub fn features(&self) -> &[FeatureVec] {
        &self.features
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn class_index(&self) -> &BTreeMap<ClassId, Vec<usize>> {
        &self.class_index
    }

    pub fn means(&self) -> Option<&BTreeMap<ClassId, FeatureVec>> {
        self.means.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }
}

/// An N-way K-shot episode with true and observed support labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support_features: Vec<FeatureVec>,
    pub support_true_labels: Vec<usize>,
    pub support_observed_labels: Vec<usize>,
    pub query_features: Vec<FeatureVec>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    /// Builds an uncorrupted episode, checking the K-per-class and label-range invariants.
    pub fn new(
        n_way: usize,
        k_shot: usize,
        support_features: Vec<FeatureVec>,
        support_labels: Vec<usize>,
        query_features: Vec<FeatureVec>,
        query_labels: Vec<usize>,
    ) -> Result<Self> {
        let ep = Self {
            n_way,
            k_shot,
            support_features,
            support_observed_labels: support_labels.clone(),
            support_true_labels: support_labels,
            query_features,
            query_labels,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(invalid("n_way and k_shot must be positive"));
        }
        let n_support = self.n_way * self.k_shot;
        if self.support_features.len() != n_support
            || self.support_true_labels.len() != n_support
            || self.support_observed_labels.len() != n_support
        {
            return Err(invalid(format!(
                "expected {n_support} support entries for {}-way {}-shot",
                self.n_way, self.k_shot
            )));
        }
        if self.query_features.len() != self.query_labels.len() {
            return Err(invalid("query features and labels differ in length"));
        }
        let mut per_class = vec![0usize; self.n_way];
        for &l in &self.support_true_labels {
            *per_class
                .get_mut(l)
                .ok_or_else(|| invalid(format!("support label {l} outside episode")))? += 1;
        }
        if per_class.iter().any(|&c| c != self.k_shot) {
            return Err(invalid(format!(
                "support counts per class {per_class:?}, expected {} each",
                self.k_shot
            )));
        }
        let labels_ok = self
            .support_observed_labels
            .iter()
            .chain(&self.query_labels)
            .all(|&l| l < self.n_way);
        if !labels_ok {
            return Err(invalid("label outside episode classes"));
        }
        let dim = self.dim();
        for f in self.support_features.iter().chain(&self.query_features) {
            check_dims(dim, f.dim())?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.support_features[0].dim()
    }

    pub fn num_support(&self) -> usize {
        self.support_features.len()
    }

    /// Support indices grouped by observed label, each group in index order.
    pub fn observed_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_way];
        for (i, &l) in self.support_observed_labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

/// Label-corruption request: `rate` of each class's supports get a wrong label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub rate: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    /// Number of corrupted supports per class, rejecting rates where `rate * k_shot`
    /// is not an integer.
    pub fn per_class(&self, k_shot: usize) -> Result<usize> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(invalid(format!(
                "corruption rate {} outside [0, 1]",
                self.rate
            )));
        }
        let exact = self.rate * k_shot as f64;
        let rounded = exact.round();
        if (exact - rounded).abs() > 1e-9 {
            return Err(invalid(format!(
                "corruption rate {} gives non-integral {exact} corrupted supports per class at K={k_shot}",
                self.rate
            )));
        }
        Ok(rounded as usize)
    }
}

/// Draws an uncorrupted episode: `n_way` classes without replacement, then
/// `k_shot + queries_per_class` members of each class without replacement.
pub fn sample_episode(
    pool: &EmbeddingSet,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(invalid("n_way and k_shot must be positive"));
    }
    let per_class = k_shot + queries_per_class;
    let eligible: Vec<&Vec<usize>> = pool
        .class_index
        .values()
        .filter(|members| members.len() >= per_class)
        .collect();
    if eligible.len() < n_way {
        return Err(invalid(format!(
            "pool has {} classes with >= {per_class} members, need {n_way}",
            eligible.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, eligible.len(), n_way);

    let mut support_features = Vec::with_capacity(n_way * k_shot);
    let mut support_labels = Vec::with_capacity(n_way * k_shot);
    let mut query_features = Vec::with_capacity(n_way * queries_per_class);
    let mut query_labels = Vec::with_capacity(n_way * queries_per_class);
    for (class, class_pos) in chosen.iter().enumerate() {
        let members = eligible[class_pos];
        let picks = index::sample(&mut rng, members.len(), per_class);
        for (j, m) in picks.iter().enumerate() {
            let f = pool.features[members[m]].clone();
            if j < k_shot {
                support_features.push(f);
                support_labels.push(class);
            } else {
                query_features.push(f);
                query_labels.push(class);
            }
        }
    }
    Episode::new(
        n_way,
        k_shot,
        support_features,
        support_labels,
        query_features,
        query_labels,
    )
}

/// Reassigns exactly `rate * K` supports of every class to a different episode class.
///
/// Slots are chosen by a seeded shuffle of each class's supports; the wrong
/// label is uniform over the other `N - 1` classes. Features, true labels and
/// queries are untouched.
pub fn corrupt_labels(episode: &Episode, spec: &CorruptionSpec) -> Result<Episode> {
    let per_class = spec.per_class(episode.k_shot)?;
    if count_corrupted(episode) != 0 {
        return Err(invalid("episode is already corrupted"));
    }
    let mut out = episode.clone();
    if per_class == 0 {
        return Ok(out);
    }
    let n = episode.n_way;
    if n < 2 {
        return Err(invalid("corruption needs at least two episode classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for class in 0..n {
        let mut slots: Vec<usize> = (0..episode.num_support())
            .filter(|&i| episode.support_true_labels[i] == class)
            .collect();
        slots.shuffle(&mut rng);
        for &i in &slots[..per_class] {
            let draw = rng.gen_range(0..n - 1);
            out.support_observed_labels[i] = if draw >= class { draw + 1 } else { draw };
        }
    }
    Ok(out)
}

/// Number of supports whose observed label differs from the true label.
pub fn count_corrupted(episode: &Episode) -> usize {
    episode
        .support_true_labels
        .iter()
        .zip(&episode.support_observed_labels)
        .filter(|(t, o)| t != o)
        .count()
}
