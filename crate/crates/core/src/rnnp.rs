//! Robust nearest-neighbor-prototype classification.
//!
//! Supports are mixed into unlabeled hybrid features, and then every query
//! gets its own k-means refinement. The pool for that refinement is the
//! supports, the hybrids and that single query, and clustering starts from
//! the observed-label class means. The refined centers replace the class
//! means at classification time. The argmax of each support's final
//! responsibility row gives its rectified label.
//!
//! Other queries never enter a query's refinement.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{invalid, Result};
use crate::nnp::{self, argmax, ClassProbabilities, LabelSource, PrototypeSet};
use crate::vecmath::{check_dims, FeatureVec, Metric, WeightedSum};

/// Centers whose accumulated responsibility falls below this keep their previous position.
pub const EMPTY_CLUSTER_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridSource {
    /// Partners share the support's observed label.
    #[default]
    SameClass,
    /// Partners carry a different observed label.
    DifferentClass,
    /// No mixing: draws from a diagonal Gaussian fitted to the supports.
    GaussianNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridLabeling {
    /// Hybrids join the per-query clustering without labels.
    #[default]
    UnlabeledCluster,
    /// Hybrids inherit their first parent's observed label and are averaged
    /// straight into the class means; no clustering.
    LabeledDirect,
}

/// Hyper-parameters of the refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RnnpConfig {
    /// Weight of the anchor support in each hybrid, strictly inside (0, 1).
    pub alpha: f64,
    /// Hybrids generated per support.
    pub beta: usize,
    /// Number of assign/update rounds.
    pub iterations: usize,
    #[serde(default)]
    pub clustering_mode: ClusteringMode,
    #[serde(default)]
    pub hybrid_source: HybridSource,
    #[serde(default)]
    pub hybrid_labeling: HybridLabeling,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub seed: u64,
}

impl RnnpConfig {
    /// `alpha = 0.8`, `beta = K - 1`, three soft rounds over same-class hybrids.
    pub fn for_k_shot(k_shot: usize) -> Self {
        Self {
            alpha: 0.8,
            beta: k_shot.saturating_sub(1).max(1),
            iterations: 3,
            clustering_mode: ClusteringMode::Soft,
            hybrid_source: HybridSource::SameClass,
            hybrid_labeling: HybridLabeling::UnlabeledCluster,
            metric: Metric::SquaredEuclidean,
            seed: 0,
        }
    }

    pub fn validate(&self, k_shot: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.beta == 0 {
            return Err(invalid("beta must be >= 1"));
        }
        if self.hybrid_source == HybridSource::SameClass && self.beta + 1 > k_shot {
            return Err(invalid(format!(
                "beta = {} exceeds K - 1 = {} for same-class hybrids",
                self.beta,
                k_shot as i64 - 1
            )));
        }
        if self.hybrid_source == HybridSource::GaussianNoise
            && self.hybrid_labeling == HybridLabeling::LabeledDirect
        {
            return Err(invalid(
                "gaussian-noise hybrids have no parent label to inherit",
            ));
        }
        Ok(())
    }
}

/// Soft assignments of a list of features to `n_classes` centers, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    n_classes: usize,
    data: Vec<f64>,
}

impl Responsibilities {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_classes)
    }
}

/// Diagnostics of one refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub initial_prototypes: PrototypeSet,
    pub refined_prototypes: PrototypeSet,
    /// Support responsibilities at the refined prototypes.
    pub support_responsibilities: Responsibilities,
    pub rectified_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnpPrediction {
    pub probabilities: ClassProbabilities,
    pub predicted: usize,
    pub trace: RefinementTrace,
}

struct Hybrid {
    feature: FeatureVec,
    /// Support index of the anchor (`z_i`), absent for noise draws.
    parent: Option<usize>,
}

fn sample_partners(rng: &mut ChaCha8Rng, candidates: &[usize], beta: usize) -> Vec<usize> {
    if candidates.len() <= beta {
        return candidates.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, candidates.len(), beta)
        .into_iter()
        .map(|j| candidates[j])
        .collect();
    picked.sort_unstable();
    picked
}

fn build_hybrids(episode: &Episode, config: &RnnpConfig) -> Result<Vec<Hybrid>> {
    config.validate(episode.k_shot)?;
    let supports = &episode.support_features;
    let observed = &episode.support_observed_labels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(supports.len() * config.beta);

    match config.hybrid_source {
        HybridSource::SameClass | HybridSource::DifferentClass => {
            let same = config.hybrid_source == HybridSource::SameClass;
            for (i, anchor) in supports.iter().enumerate() {
                let candidates: Vec<usize> = (0..supports.len())
                    .filter(|&j| j != i && (observed[j] == observed[i]) == same)
                    .collect();
                for j in sample_partners(&mut rng, &candidates, config.beta) {
                    out.push(Hybrid {
                        feature: anchor.mix(&supports[j], config.alpha),
                        parent: Some(i),
                    });
                }
            }
        }
        HybridSource::GaussianNoise => {
            let dim = episode.dim();
            let n = supports.len() as f64;
            let mut mean = vec![0.0; dim];
            for s in supports {
                for (m, x) in mean.iter_mut().zip(s.as_slice()) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; dim];
            for s in supports {
                for ((v, m), x) in var.iter_mut().zip(&mean).zip(s.as_slice()) {
                    *v += (x - m) * (x - m);
                }
            }
            let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
            for _ in 0..supports.len() * config.beta {
                let v = mean
                    .iter()
                    .zip(&std)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + s * z
                    })
                    .collect();
                out.push(Hybrid {
                    feature: FeatureVec::from_raw(v),
                    parent: None,
                });
            }
        }
    }
    Ok(out)
}

/// Unlabeled hybrid features for an episode, grouped by observed labels.
///
/// Each support `z_i` (in index order) is mixed as `alpha * z_i + (1 - alpha) * z_j`
/// with up to `beta` partners. When a support has more eligible partners than
/// `beta`, a seeded sample is drawn.
pub fn generate_hybrids(episode: &Episode, config: &RnnpConfig) -> Result<Vec<FeatureVec>> {
    Ok(build_hybrids(episode, config)?
        .into_iter()
        .map(|h| h.feature)
        .collect())
}

#[inline]
fn assign_row(
    x: &[f64],
    centers: &[FeatureVec],
    mode: ClusteringMode,
    metric: Metric,
    dist: &mut [f64],
    out: &mut [f64],
) {
    for (d, c) in dist.iter_mut().zip(centers) {
        *d = metric.eval(x, c.as_slice());
    }
    match mode {
        ClusteringMode::Soft => nnp::softmax_neg_into(dist, out),
        ClusteringMode::Hard => {
            let mut best = 0;
            for (c, &d) in dist.iter().enumerate().skip(1) {
                if d < dist[best] {
                    best = c;
                }
            }
            out.fill(0.0);
            out[best] = 1.0;
        }
    }
}

/// Responsibilities of every feature for every center: a softmax over negative
/// distances in soft mode, a one-hot nearest center in hard mode.
pub fn soft_assign(
    features: &[FeatureVec],
    centers: &PrototypeSet,
    mode: ClusteringMode,
    metric: Metric,
) -> Result<Responsibilities> {
    let n = centers.len();
    let mut data = vec![0.0; features.len() * n];
    let mut dist = vec![0.0; n];
    for (f, row) in features.iter().zip(data.chunks_exact_mut(n)) {
        check_dims(centers.dim(), f.dim())?;
        assign_row(
            f.as_slice(),
            centers.as_slice(),
            mode,
            metric,
            &mut dist,
            row,
        );
    }
    Ok(Responsibilities { n_classes: n, data })
}

fn finish_centers(sums: &[WeightedSum], previous: &PrototypeSet) -> PrototypeSet {
    let centers = sums
        .iter()
        .zip(previous.as_slice())
        .map(|(s, prev)| {
            if s.total_weight() < EMPTY_CLUSTER_WEIGHT {
                prev.clone()
            } else {
                s.mean().expect("positive weight")
            }
        })
        .collect();
    PrototypeSet::new(centers).expect("centers share a dimension")
}

/// Responsibility-weighted means. Centers with total responsibility below
/// [`EMPTY_CLUSTER_WEIGHT`] stay where they were in `previous`.
pub fn update_centers(
    features: &[FeatureVec],
    responsibilities: &Responsibilities,
    previous: &PrototypeSet,
) -> Result<PrototypeSet> {
    if responsibilities.n_rows() != features.len() || responsibilities.n_classes() != previous.len()
    {
        return Err(invalid(
            "responsibility matrix does not match features and centers",
        ));
    }
    let mut sums = vec![WeightedSum::new(previous.dim()); previous.len()];
    for (f, row) in features.iter().zip(responsibilities.rows()) {
        check_dims(previous.dim(), f.dim())?;
        for (s, &r) in sums.iter_mut().zip(row) {
            s.add(f.as_slice(), r);
        }
    }
    Ok(finish_centers(&sums, previous))
}

fn finish_trace(
    episode: &Episode,
    initial: PrototypeSet,
    refined: PrototypeSet,
    config: &RnnpConfig,
) -> Result<RefinementTrace> {
    let support_responsibilities = soft_assign(
        &episode.support_features,
        &refined,
        config.clustering_mode,
        config.metric,
    )?;
    let rectified_labels = support_responsibilities.rows().map(argmax).collect();
    Ok(RefinementTrace {
        initial_prototypes: initial,
        refined_prototypes: refined,
        support_responsibilities,
        rectified_labels,
    })
}

fn labeled_prototypes(episode: &Episode, hybrids: &[Hybrid]) -> Result<PrototypeSet> {
    let mut sums = vec![WeightedSum::new(episode.dim()); episode.n_way];
    for (f, &l) in episode
        .support_features
        .iter()
        .zip(&episode.support_observed_labels)
    {
        sums[l].add(f.as_slice(), 1.0);
    }
    for h in hybrids {
        let parent = h
            .parent
            .ok_or_else(|| invalid("hybrid without parent label"))?;
        sums[episode.support_observed_labels[parent]].add(h.feature.as_slice(), 1.0);
    }
    let protos = sums
        .iter()
        .enumerate()
        .map(|(class, s)| {
            s.mean()
                .ok_or(crate::error::RnnpError::DegenerateClass { class })
        })
        .collect::<Result<Vec<_>>>()?;
    PrototypeSet::new(protos)
}

/// Per-query refinement, run literally: the pool is rebuilt for this query
/// and every round reassigns all of it.
pub fn refine_for_query(
    episode: &Episode,
    query: &FeatureVec,
    config: &RnnpConfig,
) -> Result<RefinementTrace> {
    check_dims(episode.dim(), query.dim())?;
    let initial = nnp::compute_prototypes(episode, LabelSource::Observed)?;
    let hybrids = generate_hybrids(episode, config)?;

    let mut pool = episode.support_features.clone();
    pool.extend(hybrids);
    pool.push(query.clone());

    let mut centers = initial.clone();
    for _ in 0..config.iterations {
        let r = soft_assign(&pool, &centers, config.clustering_mode, config.metric)?;
        centers = update_centers(&pool, &r, &centers)?;
    }
    finish_trace(episode, initial, centers, config)
}

/// Classifies one query against its refined prototypes (or, for
/// [`HybridLabeling::LabeledDirect`], against support-plus-hybrid class means).
pub fn classify_rnnp(
    episode: &Episode,
    query: &FeatureVec,
    config: &RnnpConfig,
) -> Result<RnnpPrediction> {
    let trace = match config.hybrid_labeling {
        HybridLabeling::UnlabeledCluster => refine_for_query(episode, query, config)?,
        HybridLabeling::LabeledDirect => {
            check_dims(episode.dim(), query.dim())?;
            let initial = nnp::compute_prototypes(episode, LabelSource::Observed)?;
            let hybrids = build_hybrids(episode, config)?;
            let refined = labeled_prototypes(episode, &hybrids)?;
            finish_trace(episode, initial, refined, config)?
        }
    };
    let (probabilities, predicted) =
        nnp::classify_with(&trace.refined_prototypes, query, config.metric)?;
    Ok(RnnpPrediction {
        probabilities,
        predicted,
        trace,
    })
}

/// `(correct_before, correct_after)`: supports whose observed label, resp.
/// rectified label, matches the true label.
pub fn rectification_delta(episode: &Episode, trace: &RefinementTrace) -> (usize, usize) {
    let truth = &episode.support_true_labels;
    let before = truth
        .iter()
        .zip(&episode.support_observed_labels)
        .filter(|(t, o)| t == o)
        .count();
    let after = truth
        .iter()
        .zip(&trace.rectified_labels)
        .filter(|(t, r)| t == r)
        .count();
    (before, after)
}

/// Query-independent state of an episode, shared by all of its queries.
///
/// The pool responsibilities at the initial centers do not depend on the
/// query, so the first round only needs the query's own row. Every result is
/// bit-identical to [`refine_for_query`] / [`classify_rnnp`].
pub struct PreparedEpisode<'a> {
    episode: &'a Episode,
    config: RnnpConfig,
    initial: PrototypeSet,
    /// Supports followed by hybrids.
    pool: Vec<FeatureVec>,
    mode: Prepared,
}

enum Prepared {
    Cluster { first_round: Vec<WeightedSum> },
    Direct { trace: RefinementTrace },
}

impl<'a> PreparedEpisode<'a> {
    pub fn new(episode: &'a Episode, config: &RnnpConfig) -> Result<Self> {
        let initial = nnp::compute_prototypes(episode, LabelSource::Observed)?;
        let hybrids = build_hybrids(episode, config)?;
        let mode = match config.hybrid_labeling {
            HybridLabeling::LabeledDirect => {
                let refined = labeled_prototypes(episode, &hybrids)?;
                Prepared::Direct {
                    trace: finish_trace(episode, initial.clone(), refined, config)?,
                }
            }
            HybridLabeling::UnlabeledCluster => Prepared::Cluster {
                first_round: Vec::new(),
            },
        };
        let mut pool = episode.support_features.clone();
        pool.extend(hybrids.into_iter().map(|h| h.feature));

        let mut prepared = Self {
            episode,
            config: *config,
            initial,
            pool,
            mode,
        };
        if let Prepared::Cluster { first_round } = &mut prepared.mode {
            *first_round = accumulate(
                prepared.pool.iter().map(FeatureVec::as_slice),
                &prepared.initial,
                &prepared.config,
            );
        }
        Ok(prepared)
    }

    pub fn initial_prototypes(&self) -> &PrototypeSet {
        &self.initial
    }

    pub fn refine(&self, query: &FeatureVec) -> Result<RefinementTrace> {
        check_dims(self.episode.dim(), query.dim())?;
        let first_round = match &self.mode {
            Prepared::Direct { trace } => return Ok(trace.clone()),
            Prepared::Cluster { first_round } => first_round,
        };
        let cfg = &self.config;
        let mut centers = self.initial.clone();
        if cfg.iterations > 0 {
            let n = centers.len();
            let (mut dist, mut row) = (vec![0.0; n], vec![0.0; n]);
            assign_row(
                query.as_slice(),
                centers.as_slice(),
                cfg.clustering_mode,
                cfg.metric,
                &mut dist,
                &mut row,
            );
            let mut sums = first_round.clone();
            for (s, &r) in sums.iter_mut().zip(&row) {
                s.add(query.as_slice(), r);
            }
            centers = finish_centers(&sums, &centers);
        }
        for _ in 1..cfg.iterations {
            let features = self
                .pool
                .iter()
                .map(FeatureVec::as_slice)
                .chain(std::iter::once(query.as_slice()));
            let sums = accumulate(features, &centers, cfg);
            centers = finish_centers(&sums, &centers);
        }
        finish_trace(self.episode, self.initial.clone(), centers, cfg)
    }

    pub fn classify(&self, query: &FeatureVec) -> Result<RnnpPrediction> {
        let trace = self.refine(query)?;
        let (probabilities, predicted) =
            nnp::classify_with(&trace.refined_prototypes, query, self.config.metric)?;
        Ok(RnnpPrediction {
            probabilities,
            predicted,
            trace,
        })
    }
}

/// One assignment pass folded straight into per-center weighted sums.
fn accumulate<'f>(
    features: impl Iterator<Item = &'f [f64]>,
    centers: &PrototypeSet,
    config: &RnnpConfig,
) -> Vec<WeightedSum> {
    let n = centers.len();
    let mut sums = vec![WeightedSum::new(centers.dim()); n];
    let (mut dist, mut row) = (vec![0.0; n], vec![0.0; n]);
    for x in features {
        assign_row(
            x,
            centers.as_slice(),
            config.clustering_mode,
            config.metric,
            &mut dist,
            &mut row,
        );
        for (s, &r) in sums.iter_mut().zip(&row) {
            s.add(x, r);
        }
    }
    sums
}

/// Majority vote of rectified labels across the per-query traces of one episode.
#[derive(Debug, Clone)]
pub struct RectificationTally {
    n_way: usize,
    counts: Vec<u32>,
}

impl RectificationTally {
    pub fn new(n_support: usize, n_way: usize) -> Self {
        Self {
            n_way,
            counts: vec![0; n_support * n_way],
        }
    }

    pub fn add(&mut self, trace: &RefinementTrace) {
        for (i, &l) in trace.rectified_labels.iter().enumerate() {
            self.counts[i * self.n_way + l] += 1;
        }
    }

    /// Most frequent label per support; lowest class index on ties.
    pub fn labels(&self) -> Vec<usize> {
        self.counts
            .chunks_exact(self.n_way)
            .map(|c| {
                let mut best = 0;
                for (j, &v) in c.iter().enumerate() {
                    if v > c[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// `(correct_before, correct_after)` using the consensus labels.
    pub fn delta(&self, episode: &Episode) -> (usize, usize) {
        let labels = self.labels();
        let before = episode
            .support_true_labels
            .iter()
            .zip(&episode.support_observed_labels)
            .filter(|(t, o)| t == o)
            .count();
        let after = episode
            .support_true_labels
            .iter()
            .zip(&labels)
            .filter(|(t, r)| t == r)
            .count();
        (before, after)
    }
}
