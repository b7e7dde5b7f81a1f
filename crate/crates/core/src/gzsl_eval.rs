//! Seen/unseen splits, ZSL and GZSL metrics, and multi-seed suites.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{per_class_accuracy, ClassifierParams};
use crate::error::{Error, Result};
use crate::generator::AttributeVector;
use crate::numerics::Matrix;

/// Real labelled features plus the class semantics needed to synthesise more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GzslDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Indexed by class id: `attributes[c].class_id() == c`.
    pub attributes: Vec<AttributeVector>,
    /// Attribute→feature map (`attr_dim × feature_dim`) of the benchmark.
    pub projection: Matrix,
}

impl GzslDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, attributes: Vec<AttributeVector>, projection: Matrix) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            attributes,
            projection,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.labels.len() {
            return Err(Error::shape("dataset", self.features.shape(), (self.labels.len(), 1)));
        }
        if self.projection.cols() != self.features.cols() {
            return Err(Error::shape("dataset_projection", self.projection.shape(), self.features.shape()));
        }
        for (c, a) in self.attributes.iter().enumerate() {
            if a.class_id() != c {
                return Err(Error::Input(format!("attribute table entry {c} belongs to class {}", a.class_id())));
            }
            if a.dim() != self.projection.rows() {
                return Err(Error::shape("dataset_attributes", (1, a.dim()), self.projection.shape()));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.attributes.len()) {
            return Err(Error::Input(format!("class {bad} has no attribute vector")));
        }
        if !self.features.is_finite() {
            return Err(Error::Numeric("dataset contains non-finite features".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.attributes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn rows(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub unseen_fraction: f64,
    /// Fractions of each seen class's samples held out for validation and test.
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Classes removed before splitting, e.g. overlaps with a pretraining corpus.
    pub excluded_classes: Vec<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            unseen_fraction: 0.5,
            val_fraction: 0.25,
            test_fraction: 0.25,
            excluded_classes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    /// Seen-class test samples followed by every unseen-class sample.
    pub test_idx: Vec<usize>,
}

impl SplitSpec {
    pub fn test_seen_idx(&self, ds: &GzslDataset) -> Vec<usize> {
        self.test_idx.iter().copied().filter(|&i| self.seen_classes.contains(&ds.labels[i])).collect()
    }

    pub fn test_unseen_idx(&self, ds: &GzslDataset) -> Vec<usize> {
        self.test_idx.iter().copied().filter(|&i| self.unseen_classes.contains(&ds.labels[i])).collect()
    }
}

/// Partitions classes into seen/unseen and samples into train/val/test.
///
/// Unseen-class samples only ever appear in the test split.
pub fn make_split<R: Rng + ?Sized>(ds: &GzslDataset, config: &SplitConfig, rng: &mut R) -> Result<SplitSpec> {
    for (key, v) in [
        ("split.unseen_fraction", config.unseen_fraction),
        ("split.val_fraction", config.val_fraction),
        ("split.test_fraction", config.test_fraction),
    ] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::config(key, "must lie in [0, 1)"));
        }
    }
    if config.val_fraction + config.test_fraction >= 1.0 {
        return Err(Error::config("split.val_fraction", "val and test fractions leave no training data"));
    }
    let excluded: BTreeSet<usize> = config.excluded_classes.iter().copied().collect();
    let mut classes: Vec<usize> = ds
        .labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|c| !excluded.contains(c))
        .collect();
    if classes.len() < 2 {
        return Err(Error::Input("need at least two classes after exclusions".into()));
    }
    classes.shuffle(rng);
    let n_unseen = (classes.len() as f64 * config.unseen_fraction).round() as usize;
    if n_unseen == 0 || n_unseen >= classes.len() {
        return Err(Error::config(
            "split.unseen_fraction",
            format!("yields {n_unseen} unseen of {} classes", classes.len()),
        ));
    }
    let mut unseen_classes = classes[..n_unseen].to_vec();
    let mut seen_classes = classes[n_unseen..].to_vec();
    unseen_classes.sort_unstable();
    seen_classes.sort_unstable();

    let (mut train_idx, mut val_idx, mut test_idx) = (Vec::new(), Vec::new(), Vec::new());
    for &c in &seen_classes {
        let mut idx: Vec<usize> = (0..ds.labels.len()).filter(|&i| ds.labels[i] == c).collect();
        idx.shuffle(rng);
        let n = idx.len();
        let n_val = (n as f64 * config.val_fraction).round() as usize;
        let n_test = (n as f64 * config.test_fraction).round() as usize;
        if n_val + n_test >= n || (config.val_fraction > 0.0 && n_val == 0) {
            return Err(Error::Input(format!("seen class {c} has too few samples ({n}) to split")));
        }
        val_idx.extend_from_slice(&idx[..n_val]);
        test_idx.extend_from_slice(&idx[n_val..n_val + n_test]);
        train_idx.extend_from_slice(&idx[n_val + n_test..]);
    }
    let mut unseen_test: Vec<usize> = (0..ds.labels.len()).filter(|&i| unseen_classes.contains(&ds.labels[i])).collect();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    unseen_test.sort_unstable();
    test_idx.extend(unseen_test);
    Ok(SplitSpec {
        seen_classes,
        unseen_classes,
        train_idx,
        val_idx,
        test_idx,
    })
}

/// `2su/(s+u)`, defined as 0 when both are 0.
pub fn harmonic_mean(s: f64, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&u) {
        return Err(Error::Input(format!("accuracies must lie in [0, 1], got s={s}, u={u}")));
    }
    if s + u == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * s * u / (s + u))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GzslMetrics {
    pub seen: f64,
    pub unseen: f64,
    pub harmonic: f64,
}

/// Mean per-class accuracy over unseen classes, with the label space
/// restricted to those classes.
pub fn evaluate_zsl(params: &ClassifierParams, features: &Matrix, labels: &[usize], unseen: &[usize]) -> Result<f64> {
    let held: BTreeSet<usize> = unseen.iter().copied().collect();
    if params.class_list.iter().copied().collect::<BTreeSet<_>>() != held {
        return Err(Error::Input("zsl classifier must cover exactly the unseen classes".into()));
    }
    let pred = params.predict(features)?;
    Ok(per_class_accuracy(&pred, labels, unseen)?.mean)
}

/// Seen accuracy, unseen accuracy and harmonic mean on a joint label space.
pub fn evaluate_gzsl(
    params: &ClassifierParams,
    features: &Matrix,
    labels: &[usize],
    seen: &[usize],
    unseen: &[usize],
) -> Result<GzslMetrics> {
    let covered: BTreeSet<usize> = params.class_list.iter().copied().collect();
    if seen.iter().chain(unseen).any(|c| !covered.contains(c)) {
        return Err(Error::Input("gzsl classifier must cover seen and unseen classes".into()));
    }
    let pred = params.predict(features)?;
    let s = per_class_accuracy(&pred, labels, seen)?.mean;
    let u = per_class_accuracy(&pred, labels, unseen)?.mean;
    Ok(GzslMetrics {
        seen: s,
        unseen: u,
        harmonic: harmonic_mean(s, u)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single run.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Input("cannot summarise zero runs".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanStd { mean, std })
}

/// Named scalar metrics from one run.
pub type RunMetrics = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub runs: Vec<(u64, RunMetrics)>,
    pub summary: Vec<(String, MeanStd)>,
}

impl SuiteResult {
    pub fn metric(&self, name: &str) -> Option<MeanStd> {
        self.summary.iter().find(|(n, _)| n == name).map(|(_, m)| *m)
    }
}

/// Runs `run` for seeds `base_seed..base_seed + n_runs` and summarises each metric.
///
/// The first failing run aborts the suite, reporting its seed.
pub fn run_experiment_suite<F>(base_seed: u64, n_runs: usize, mut run: F) -> Result<SuiteResult>
where
    F: FnMut(u64) -> Result<RunMetrics>,
{
    if n_runs == 0 {
        return Err(Error::config("run.n_runs", "must be at least 1"));
    }
    let mut runs = Vec::with_capacity(n_runs);
    for i in 0..n_runs as u64 {
        let seed = base_seed.wrapping_add(i);
        let metrics = run(seed).map_err(|e| Error::Suite {
            seed,
            source: Box::new(e),
        })?;
        runs.push((seed, metrics));
    }
    let names: Vec<String> = runs[0].1.iter().map(|(n, _)| n.clone()).collect();
    let mut summary = Vec::with_capacity(names.len());
    for name in names {
        let values = runs
            .iter()
            .map(|(seed, m)| {
                m.iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::Input(format!("run with seed {seed} did not report `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        summary.push((name, mean_std(&values)?));
    }
    Ok(SuiteResult { runs, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(n_classes: usize, per: usize) -> GzslDataset {
        let attrs = (0..n_classes)
            .map(|c| AttributeVector::normalized(c, vec![1.0 + c as f64, 1.0]).unwrap())
            .collect();
        let mut labels = Vec::new();
        for c in 0..n_classes {
            labels.extend(std::iter::repeat(c).take(per));
        }
        let features = Matrix::from_fn(labels.len(), 3, |r, c| (r * 3 + c) as f64);
        GzslDataset::new(features, labels, attrs, Matrix::filled(2, 3, 1.0)).unwrap()
    }

    #[test]
    fn harmonic_examples() {
        assert_abs_diff_eq!(harmonic_mean(0.6, 0.4).unwrap(), 0.48, epsilon = 1e-12);
        assert_eq!(harmonic_mean(1.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(harmonic_mean(0.5, 0.5).unwrap(), 0.5, epsilon = 1e-12);
        assert!(harmonic_mean(1.2, 0.3).is_err());
    }

    #[test]
    fn harmonic_bounded_by_min_and_arithmetic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s: f64 = rng.random();
            let u: f64 = rng.random();
            let h = harmonic_mean(s, u).unwrap();
            assert!(h >= s.min(u) - 1e-12 && h <= (s + u) / 2.0 + 1e-12);
        }
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let ds = toy_dataset(6, 20);
        let split = make_split(&ds, &SplitConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(split.unseen_classes.len(), 3);
        let all: BTreeSet<usize> = split.seen_classes.iter().chain(&split.unseen_classes).copied().collect();
        assert_eq!(all.len(), 6);
        let mut every: Vec<usize> = split.train_idx.iter().chain(&split.val_idx).chain(&split.test_idx).copied().collect();
        every.sort_unstable();
        assert_eq!(every, (0..120).collect::<Vec<_>>());
        for &i in split.train_idx.iter().chain(&split.val_idx) {
            assert!(split.seen_classes.contains(&ds.labels[i]));
        }
        assert_eq!(split.test_unseen_idx(&ds).len(), 60);
        assert_eq!(split.test_seen_idx(&ds).len(), 15);
        let again = make_split(&ds, &SplitConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn split_honours_exclusions_and_rejects_degenerate_fractions() {
        let ds = toy_dataset(6, 20);
        let cfg = SplitConfig {
            excluded_classes: vec![0, 5],
            ..SplitConfig::default()
        };
        let split = make_split(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(!split.seen_classes.contains(&0) && !split.unseen_classes.contains(&5));
        assert!(split.train_idx.iter().chain(&split.test_idx).all(|&i| ds.labels[i] != 0 && ds.labels[i] != 5));
        let bad = SplitConfig {
            unseen_fraction: 0.01,
            ..SplitConfig::default()
        };
        assert!(matches!(make_split(&ds, &bad, &mut ChaCha8Rng::seed_from_u64(3)), Err(Error::Config { .. })));
    }

    #[test]
    fn gzsl_metrics_on_fixed_classifier() {
        // One feature; class 0 scores x, class 1 scores -x, class 2 scores 0.
        let params = ClassifierParams {
            weight: Matrix::from_rows(&[[1.0, -1.0, 0.0]]).unwrap(),
            bias: vec![0.0, 0.0, 0.5],
            class_list: vec![0, 1, 2],
        };
        let x = Matrix::from_rows(&[[2.0], [3.0], [-2.0], [0.1], [0.0]]).unwrap();
        let labels = [0, 0, 1, 2, 2];
        let m = evaluate_gzsl(&params, &x, &labels, &[0, 1], &[2]).unwrap();
        assert_eq!(m.seen, 1.0);
        assert_eq!(m.unseen, 1.0);
        let labels = [0, 0, 1, 1, 2];
        let m = evaluate_gzsl(&params, &x, &labels, &[0, 1], &[2]).unwrap();
        assert_abs_diff_eq!(m.seen, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.harmonic, harmonic_mean(0.75, 1.0).unwrap(), epsilon = 1e-12);
        assert!(evaluate_zsl(&params, &x, &labels, &[2]).is_err());
    }

    #[test]
    fn suite_summary_and_failure_seed() {
        let res = run_experiment_suite(10, 3, |seed| Ok(vec![("h".to_string(), seed as f64)])).unwrap();
        let h = res.metric("h").unwrap();
        assert_abs_diff_eq!(h.mean, 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(h.std, 1.0, epsilon = 1e-12);
        let single = run_experiment_suite(0, 1, |_| Ok(vec![("h".to_string(), 0.3)])).unwrap();
        assert_eq!(single.metric("h").unwrap().std, 0.0);
        let err = run_experiment_suite(5, 4, |seed| {
            if seed == 7 {
                Err(Error::Numeric("boom".into()))
            } else {
                Ok(vec![])
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Suite { seed: 7, .. }));
    }

    #[test]
    fn dataset_validation() {
        let ds = toy_dataset(3, 2);
        let mut bad = ds.clone();
        bad.labels[0] = 9;
        assert!(bad.validate().is_err());
        let mut bad = ds;
        bad.attributes.swap(0, 1);
        assert!(bad.validate().is_err());
    }
}
