//! Embedding pools: a seeded Gaussian-mixture generator with a Bayes oracle,
//! and CSV / JSONL readers and writers for externally extracted features.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::episodes::{ClassId, EmbeddingSet};
use crate::error::{invalid, Result, RnnpError};
use crate::vecmath::{FeatureVec, Metric};

/// Isotropic unit-variance Gaussian mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Mean pairwise distance between class means, in within-class standard deviations.
    pub separation: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("mixture needs at least two classes"));
        }
        if self.dim == 0 || self.samples_per_class == 0 {
            return Err(invalid("dim and samples_per_class must be positive"));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(invalid(format!(
                "separation must be finite and >= 0, got {}",
                self.separation
            )));
        }
        Ok(())
    }
}

/// Samples a labeled pool, class-major, with labels `0..num_classes`.
///
/// Class means come from a standard Gaussian and are rescaled so their mean
/// pairwise distance equals `separation`. The means are attached to the pool.
pub fn generate_mixture(spec: &MixtureSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut raw: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();

    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..raw.len() {
        for b in a + 1..raw.len() {
            total += Metric::SquaredEuclidean.eval(&raw[a], &raw[b]).sqrt();
            pairs += 1;
        }
    }
    let mean_dist = total / pairs as f64;
    let scale = if mean_dist > 0.0 {
        spec.separation / mean_dist
    } else {
        0.0
    };
    for m in &mut raw {
        m.iter_mut().for_each(|x| *x *= scale);
    }

    let mut features = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(features.capacity());
    for (class, mean) in raw.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let v = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect();
            features.push(FeatureVec::new(v)?);
            labels.push(class as ClassId);
        }
    }
    let means = raw
        .into_iter()
        .enumerate()
        .map(|(c, m)| Ok((c as ClassId, FeatureVec::new(m)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    EmbeddingSet::new(features, labels)?.with_means(means)
}

/// Fraction of `test` samples whose nearest true class mean (taken from
/// `pool`) carries their label.
pub fn bayes_accuracy(pool: &EmbeddingSet, test: &EmbeddingSet) -> Result<f64> {
    let means = pool
        .means()
        .ok_or_else(|| invalid("pool has no known class means"))?;
    if means.is_empty() || test.is_empty() {
        return Err(invalid("bayes_accuracy needs class means and test samples"));
    }
    let mut correct = 0usize;
    for (f, &label) in test.features().iter().zip(test.labels()) {
        let mut best: Option<(ClassId, f64)> = None;
        for (&class, m) in means {
            let d = Metric::SquaredEuclidean.distance(f, m)?;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((class, d));
            }
        }
        if best.map(|(c, _)| c) == Some(label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    #[default]
    Csv,
    Jsonl,
}

impl EmbeddingFormat {
    pub fn extension(self) -> &'static str {
        match self {
            EmbeddingFormat::Csv => "csv",
            EmbeddingFormat::Jsonl => "jsonl",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        path.extension()?.to_str()?.parse().ok()
    }
}

impl FromStr for EmbeddingFormat {
    type Err = RnnpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(EmbeddingFormat::Csv),
            "jsonl" | "ndjson" => Ok(EmbeddingFormat::Jsonl),
            other => Err(invalid(format!("unknown embedding format '{other}'"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    label: ClassId,
    features: Vec<f64>,
}

fn format_err(line: u64, message: impl Into<String>) -> RnnpError {
    RnnpError::Format {
        line,
        message: message.into(),
    }
}

fn check_row(line: u64, dim: &mut Option<usize>, values: Vec<f64>) -> Result<FeatureVec> {
    if values.is_empty() {
        return Err(format_err(line, "row has no features"));
    }
    match *dim {
        Some(d) if d != values.len() => {
            return Err(format_err(
                line,
                format!("expected {d} features, found {}", values.len()),
            ))
        }
        None => *dim = Some(values.len()),
        _ => {}
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(format_err(line, format!("non-finite value in feature {i}")));
    }
    FeatureVec::new(values)
}

pub fn load_embeddings(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    match format {
        EmbeddingFormat::Csv => load_csv(path.as_ref()),
        EmbeddingFormat::Jsonl => load_jsonl(path.as_ref()),
    }
}

fn load_csv(path: &Path) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| format_err(1, "empty file"))??;
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(format_err(1, "header must be label,f0,f1,..."));
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(format_err(
                1,
                format!("header column {} is '{name}', expected 'f{i}'", i + 1),
            ));
        }
    }
    let dim_header = header.len() - 1;

    let mut dim = Some(dim_header);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut fields = record.iter();
        let label: ClassId = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|_| format_err(line, "label is not an integer"))?;
        let values = fields
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .map_err(|_| format_err(line, format!("feature {i} is not a number: '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        features.push(check_row(line, &mut dim, values)?);
        labels.push(label);
    }
    if features.is_empty() {
        return Err(format_err(1, "no data rows"));
    }
    EmbeddingSet::new(features, labels)
}

fn load_jsonl(path: &Path) -> Result<EmbeddingSet> {
    let reader = BufReader::new(File::open(path)?);
    let mut dim = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow =
            serde_json::from_str(&line).map_err(|e| format_err(line_no, e.to_string()))?;
        features.push(check_row(line_no, &mut dim, row.features)?);
        labels.push(row.label);
    }
    if features.is_empty() {
        return Err(format_err(1, "empty file"));
    }
    EmbeddingSet::new(features, labels)
}

/// Writes a pool so that [`load_embeddings`] reproduces it bit-exactly.
pub fn write_embeddings(
    set: &EmbeddingSet,
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
) -> Result<()> {
    let dim = set
        .dim()
        .ok_or_else(|| invalid("refusing to write an empty embedding set"))?;
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        EmbeddingFormat::Csv => {
            let mut w = csv::WriterBuilder::new().from_writer(&mut out);
            let mut header = vec!["label".to_string()];
            header.extend((0..dim).map(|i| format!("f{i}")));
            w.write_record(&header)?;
            for (f, l) in set.features().iter().zip(set.labels()) {
                let mut row = vec![l.to_string()];
                row.extend(f.as_slice().iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        EmbeddingFormat::Jsonl => {
            for (f, &l) in set.features().iter().zip(set.labels()) {
                let row = JsonRow {
                    label: l,
                    features: f.as_slice().to_vec(),
                };
                serde_json::to_writer(&mut out, &row)?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(separation: f64, seed: u64) -> MixtureSpec {
        MixtureSpec {
            num_classes: 20,
            dim: 64,
            separation,
            samples_per_class: 50,
            seed,
        }
    }

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn mixture_cardinality_and_determinism() {
        let set = generate_mixture(&spec(8.0, 7)).unwrap();
        assert_eq!(set.len(), 1000);
        assert_eq!(set.num_classes(), 20);
        assert!(set.class_index().values().all(|m| m.len() == 50));
        assert_eq!(set, generate_mixture(&spec(8.0, 7)).unwrap());
        assert_ne!(set, generate_mixture(&spec(8.0, 8)).unwrap());
    }

    #[test]
    fn mixture_mean_pairwise_distance_matches_separation() {
        let set = generate_mixture(&spec(8.0, 1)).unwrap();
        let means: Vec<_> = set.means().unwrap().values().collect();
        let mut total = 0.0;
        let mut n = 0;
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                total += Metric::SquaredEuclidean
                    .distance(means[a], means[b])
                    .unwrap()
                    .sqrt();
                n += 1;
            }
        }
        assert!((total / n as f64 - 8.0).abs() < 1e-9);
    }

    #[test]
    fn zero_separation_collapses_means() {
        let set = generate_mixture(&spec(0.0, 2)).unwrap();
        assert!(set
            .means()
            .unwrap()
            .values()
            .all(|m| m.as_slice().iter().all(|&x| x == 0.0)));
        let acc = bayes_accuracy(&set, &set).unwrap();
        // All means tie at zero, so the oracle always answers the lowest class.
        assert!((acc - 1.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn large_separation_bayes_near_perfect() {
        let set = generate_mixture(&spec(20.0, 3)).unwrap();
        assert!(bayes_accuracy(&set, &set).unwrap() >= 0.999);
    }

    #[test]
    fn single_class_bayes_is_one() {
        let f = vec![
            FeatureVec::new(vec![0.0, 1.0]).unwrap(),
            FeatureVec::new(vec![5.0, 1.0]).unwrap(),
        ];
        let set = EmbeddingSet::new(f, vec![4, 4])
            .unwrap()
            .with_means(BTreeMap::from([(
                4,
                FeatureVec::new(vec![0.0, 0.0]).unwrap(),
            )]))
            .unwrap();
        assert_eq!(bayes_accuracy(&set, &set).unwrap(), 1.0);
    }

    #[test]
    fn bayes_requires_means() {
        let f = vec![FeatureVec::new(vec![0.0]).unwrap()];
        let set = EmbeddingSet::new(f, vec![0]).unwrap();
        assert!(matches!(
            bayes_accuracy(&set, &set),
            Err(RnnpError::InvalidInput(_))
        ));
    }

    #[test]
    fn per_class_mean_converges() {
        let s = MixtureSpec {
            num_classes: 2,
            dim: 4,
            separation: 3.0,
            samples_per_class: 10_000,
            seed: 99,
        };
        let set = generate_mixture(&s).unwrap();
        for (class, members) in set.class_index() {
            let truth = &set.means().unwrap()[class];
            let n = members.len() as f64;
            for d in 0..4 {
                let m: f64 = members
                    .iter()
                    .map(|&i| set.features()[i].as_slice()[d])
                    .sum::<f64>()
                    / n;
                assert!((m - truth.as_slice()[d]).abs() < 4.0 / n.sqrt());
            }
        }
    }

    #[test]
    fn csv_parse_contract() {
        let f = write_tmp("label,f0,f1\n3,0.5,-1.0\n", ".csv");
        let set = load_embeddings(f.path(), EmbeddingFormat::Csv).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.dim(), Some(2));
        assert_eq!(set.labels(), &[3]);
        assert_eq!(set.features()[0].as_slice(), &[0.5, -1.0]);
    }

    #[test]
    fn csv_errors() {
        let f = write_tmp("", ".csv");
        assert!(matches!(
            load_embeddings(f.path(), EmbeddingFormat::Csv),
            Err(RnnpError::Format { .. })
        ));

        let f = write_tmp("label,f0,f1\n1,0.0,1.0\n2,0.5\n", ".csv");
        match load_embeddings(f.path(), EmbeddingFormat::Csv) {
            Err(RnnpError::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }

        let f = write_tmp("label,f0\n1,NaN\n", ".csv");
        assert!(matches!(
            load_embeddings(f.path(), EmbeddingFormat::Csv),
            Err(RnnpError::Format { line: 2, .. })
        ));

        let f = write_tmp("label,x,y\n1,0,0\n", ".csv");
        assert!(load_embeddings(f.path(), EmbeddingFormat::Csv).is_err());
    }

    #[test]
    fn jsonl_errors() {
        let f = write_tmp(
            "{\"label\":1,\"features\":[1.0]}\n{\"label\":2,\"features\":[]}\n",
            ".jsonl",
        );
        assert!(matches!(
            load_embeddings(f.path(), EmbeddingFormat::Jsonl),
            Err(RnnpError::Format { line: 2, .. })
        ));

        let f = write_tmp("", ".jsonl");
        assert!(matches!(
            load_embeddings(f.path(), EmbeddingFormat::Jsonl),
            Err(RnnpError::Format { .. })
        ));

        let f = write_tmp(
            "{\"label\":1,\"features\":[1.0,2.0]}\n{\"label\":1,\"features\":[1.0]}\n",
            ".jsonl",
        );
        assert!(matches!(
            load_embeddings(f.path(), EmbeddingFormat::Jsonl),
            Err(RnnpError::Format { line: 2, .. })
        ));
    }

    #[test]
    fn round_trip_both_formats() {
        let s = MixtureSpec {
            num_classes: 3,
            dim: 5,
            separation: 2.5,
            samples_per_class: 7,
            seed: 4,
        };
        let set = generate_mixture(&s).unwrap();
        let stripped = EmbeddingSet::new(set.features().to_vec(), set.labels().to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for format in [EmbeddingFormat::Csv, EmbeddingFormat::Jsonl] {
            let path = dir.path().join(format!("pool.{}", format.extension()));
            write_embeddings(&set, &path, format).unwrap();
            assert_eq!(EmbeddingFormat::from_path(&path), Some(format));
            let back = load_embeddings(&path, format).unwrap();
            assert_eq!(back, stripped);
        }
    }
}
