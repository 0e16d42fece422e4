//! Aggregation of per-episode results into mean accuracy with a 95% normal
//! confidence interval, plus paired method comparison.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// z-value of the two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

/// Fraction of predictions equal to their label.
pub fn episode_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(invalid("empty query set"));
    }
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// `(mean, 1.96 * s / sqrt(n))` with the `n - 1` sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(invalid(format!("need at least 2 values for a CI, got {n}")));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0);
    Ok((mean, Z_95 * var.sqrt() / nf.sqrt()))
}

/// Paired comparison of two methods over the same episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub mean_delta: f64,
    pub ci95: f64,
    /// Fraction of episodes where the first method is strictly better.
    pub win_rate: f64,
}

impl PairedDelta {
    /// True when the interval `mean_delta ± ci95` lies strictly above zero.
    pub fn significantly_positive(&self) -> bool {
        self.mean_delta - self.ci95 > 0.0
    }
}

/// Paired statistics of `a - b`, element by element.
pub fn paired_values(a: &[f64], b: &[f64]) -> Result<PairedDelta> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "paired lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean_delta, ci95) = mean_ci95(&diffs)?;
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    Ok(PairedDelta {
        mean_delta,
        ci95,
        win_rate: wins as f64 / a.len() as f64,
    })
}

/// Support-label rectification per evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectificationStats {
    pub correct_before: Vec<usize>,
    pub correct_after: Vec<usize>,
    pub mean_before: f64,
    pub mean_after: f64,
    /// CI of the per-episode `after - before` difference.
    pub delta_ci95: f64,
}

impl RectificationStats {
    /// A single pair gets `delta_ci95 = 0`.
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Result<Self> {
        let before: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let after: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let delta_ci95 = match pairs.len() {
            0 => return Err(invalid("no rectification pairs")),
            1 => 0.0,
            _ => paired_values(&after, &before)?.ci95,
        };
        let n = pairs.len() as f64;
        Ok(Self {
            correct_before: pairs.iter().map(|p| p.0).collect(),
            correct_after: pairs.iter().map(|p| p.1).collect(),
            mean_before: before.iter().sum::<f64>() / n,
            mean_after: after.iter().sum::<f64>() / n,
            delta_ci95,
        })
    }

    pub fn delta(&self) -> PairedDelta {
        let n = self.correct_before.len() as f64;
        let wins = self
            .correct_after
            .iter()
            .zip(&self.correct_before)
            .filter(|(a, b)| a > b)
            .count();
        PairedDelta {
            mean_delta: self.mean_after - self.mean_before,
            ci95: self.delta_ci95,
            win_rate: wins as f64 / n,
        }
    }
}

/// Result of one method at one corruption rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub config: serde_json::Value,
    pub corruption_rate: f64,
    pub n_way: usize,
    pub k_shot: usize,
    /// Indices (into the experiment's episode stream) of the evaluated episodes.
    pub episode_indices: Vec<usize>,
    pub per_episode_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub rectification: Option<RectificationStats>,
    pub skipped_episodes: usize,
}

impl EvalReport {
    /// Fills in `mean_accuracy` and `ci95`. A single episode gets `ci95 = 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: impl Into<String>,
        config: serde_json::Value,
        corruption_rate: f64,
        n_way: usize,
        k_shot: usize,
        episode_indices: Vec<usize>,
        per_episode_accuracies: Vec<f64>,
        rectification: Option<RectificationStats>,
        skipped_episodes: usize,
    ) -> Result<Self> {
        let method = method.into();
        let (mean_accuracy, ci95) = match per_episode_accuracies.len() {
            0 => return Err(invalid(format!("{method}: no episode could be evaluated"))),
            1 => (per_episode_accuracies[0], 0.0),
            _ => mean_ci95(&per_episode_accuracies)?,
        };
        if episode_indices.len() != per_episode_accuracies.len() {
            return Err(invalid("episode indices and accuracies differ in length"));
        }
        Ok(Self {
            method,
            config,
            corruption_rate,
            n_way,
            k_shot,
            episode_indices,
            per_episode_accuracies,
            mean_accuracy,
            ci95,
            rectification,
            skipped_episodes,
        })
    }

    pub fn n_episodes(&self) -> usize {
        self.per_episode_accuracies.len()
    }
}

/// Paired comparison `a - b`; both reports must cover the same episodes.
pub fn paired_delta(a: &EvalReport, b: &EvalReport) -> Result<PairedDelta> {
    if a.episode_indices != b.episode_indices {
        return Err(invalid(format!(
            "reports '{}' and '{}' were not evaluated on the same episodes",
            a.method, b.method
        )));
    }
    paired_values(&a.per_episode_accuracies, &b.per_episode_accuracies)
}

/// Flat table: `method,corruption_rate,k_shot,mean,ci95,n_episodes`.
pub fn write_reports_csv<W: Write>(reports: &[EvalReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "corruption_rate",
        "k_shot",
        "mean",
        "ci95",
        "n_episodes",
    ])?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.corruption_rate.to_string(),
            r.k_shot.to_string(),
            r.mean_accuracy.to_string(),
            r.ci95.to_string(),
            r.n_episodes().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn report(name: &str, accs: Vec<f64>) -> EvalReport {
        let idx = (0..accs.len()).collect();
        EvalReport::new(name, serde_json::Value::Null, 0.4, 5, 5, idx, accs, None, 0).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(episode_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(episode_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(
            episode_accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(),
            0.75
        );
        assert!(episode_accuracy(&[], &[]).is_err());
        assert!(episode_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn ci_examples() {
        let (m, ci) = mean_ci95(&[0.7; 10]).unwrap();
        assert_relative_eq!(m, 0.7, epsilon = 1e-15);
        assert!(ci < 1e-15);

        // s = sqrt(((0-.5)^2 + (1-.5)^2) / 1) = sqrt(0.5); ci = 1.96 * s / sqrt(2) = 0.98.
        let (m, ci) = mean_ci95(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert_relative_eq!(ci, 1.96 * 0.5f64.sqrt() / 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(ci, 0.98, epsilon = 1e-12);

        assert!(mean_ci95(&[1.0]).is_err());
    }

    #[test]
    fn ci_shrinks_with_sqrt_n() {
        let base = [0.2, 0.9, 0.4, 0.6];
        let m = base.iter().sum::<f64>() / 4.0;
        // Repeat four times and widen the deviations by sqrt(15/12) so the
        // n - 1 sample variance is unchanged at n = 16.
        let widen = (15.0f64 / 12.0).sqrt();
        let sixteen: Vec<f64> = base
            .iter()
            .cycle()
            .take(16)
            .map(|x| m + (x - m) * widen)
            .collect();
        let (_, a) = mean_ci95(&base).unwrap();
        let (_, b) = mean_ci95(&sixteen).unwrap();
        assert_relative_eq!(a / b, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn paired_examples() {
        let a = report("a", vec![0.5, 0.6, 0.7]);
        let d = paired_delta(&a, &a).unwrap();
        assert_eq!((d.mean_delta, d.ci95, d.win_rate), (0.0, 0.0, 0.0));

        let b = report("b", vec![0.6, 0.7, 0.8]);
        let d = paired_delta(&b, &a).unwrap();
        assert_relative_eq!(d.mean_delta, 0.1, epsilon = 1e-12);
        assert!(d.ci95 < 1e-12);
        assert_eq!(d.win_rate, 1.0);

        let mut c = report("c", vec![0.1, 0.2, 0.3]);
        c.episode_indices = vec![0, 1, 3];
        assert!(paired_delta(&a, &c).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let mut buf = Vec::new();
        write_reports_csv(&[report("nnp", vec![0.5, 1.0])], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "method,corruption_rate,k_shot,mean,ci95,n_episodes"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("nnp,0.4,5,0.75,"));
    }

    #[test]
    fn rectification_stats() {
        let s = RectificationStats::from_pairs(&[(15, 20), (15, 18), (15, 15)]).unwrap();
        assert_eq!(s.mean_before, 15.0);
        assert_relative_eq!(s.mean_after, 53.0 / 3.0);
        let d = s.delta();
        assert_relative_eq!(d.win_rate, 2.0 / 3.0);
    }

    proptest! {
        #[test]
        fn ci_permutation_invariant(v in proptest::collection::vec(0.0f64..1.0, 2..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = v.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (m1, c1) = mean_ci95(&v).unwrap();
            let (m2, c2) = mean_ci95(&shuffled).unwrap();
            prop_assert!((m1 - m2).abs() < 1e-12);
            prop_assert!((c1 - c2).abs() < 1e-12);
            prop_assert!(c1 >= 0.0);
        }
    }
}
