//! Synthetic benchmarks, dataset files, checkpoints and metric reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierParams;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::generator::AttributeVector;
use crate::gzsl_eval::{harmonic_mean, GzslDataset, MeanStd, SplitSpec, SuiteResult};
use crate::numerics::{matmul, Matrix};
use crate::orchestrator::{EpisodeLog, StoppingState};
use crate::policy_opt::{Optimizer, RewardTracker};
use crate::selector::SelectorParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub d_attr: usize,
    pub intra_class_noise: f64,
    /// Typical Euclidean distance between two class means.
    pub inter_class_separation: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            samples_per_class: 40,
            feature_dim: 16,
            d_attr: 6,
            intra_class_noise: 1.0,
            inter_class_separation: 6.0,
            seed: 7,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 4 {
            return Err(Error::config("benchmark.n_classes", format!("need at least 4, got {}", self.n_classes)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("benchmark.samples_per_class", "must be at least 1"));
        }
        if self.d_attr == 0 {
            return Err(Error::config("benchmark.d_attr", "must be at least 1"));
        }
        if self.feature_dim < self.d_attr {
            return Err(Error::config("benchmark.feature_dim", "must be at least d_attr"));
        }
        if !(self.intra_class_noise >= 0.0) || !self.intra_class_noise.is_finite() {
            return Err(Error::config("benchmark.intra_class_noise", "must be finite and non-negative"));
        }
        if !(self.inter_class_separation > 0.0) || !self.inter_class_separation.is_finite() {
            return Err(Error::config("benchmark.inter_class_separation", "must be positive"));
        }
        Ok(())
    }
}

/// Unit attribute vectors, a Gaussian projection scaled so class means sit
/// about `inter_class_separation` apart, and Gaussian clusters around them.
pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<GzslDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let attributes = (0..spec.n_classes)
        .map(|c| AttributeVector::normalized(c, (0..spec.d_attr).map(|_| normal()).collect()))
        .collect::<Result<Vec<_>>>()?;
    // Two random unit vectors differ by about √2, so each output coordinate
    // of their projected difference has variance 2·scale².
    let scale = spec.inter_class_separation / (2.0 * spec.feature_dim as f64).sqrt();
    let projection = Matrix::from_fn(spec.d_attr, spec.feature_dim, |_, _| scale * normal());
    let n = spec.n_classes * spec.samples_per_class;
    let mut features = Matrix::zeros(n, spec.feature_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, attr) in attributes.iter().enumerate() {
        let mean = matmul(&Matrix::row_vector(attr.attributes()), &projection)?;
        for s in 0..spec.samples_per_class {
            let r = c * spec.samples_per_class + s;
            for (j, v) in features.row_mut(r).iter_mut().enumerate() {
                *v = mean.get(0, j) + spec.intra_class_noise * normal();
            }
            labels.push(c);
        }
    }
    GzslDataset::new(features, labels, attributes, projection)
}

const FEATURES_FILE: &str = "features.csv";
const ATTRIBUTES_FILE: &str = "attributes.csv";
const PROJECTION_FILE: &str = "projection.csv";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{other:?}"),
        },
    }
}

/// Rows of a numeric table with a leading integer id column:
/// `(id, values)` per data row, checked against the header width.
fn read_table(path: &Path) -> Result<(usize, Vec<(usize, Vec<f64>)>)> {
    if !path.exists() {
        return Err(Error::Input(format!("missing dataset file {}", path.display())));
    }
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(|e| csv_io(path, e))?;
    let header = rdr.headers().map_err(|e| csv_io(path, e))?.clone();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(parse_err(1, "missing header row".into()));
    }
    let width = header.len();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != width {
            return Err(parse_err(line, format!("expected {width} columns, found {}", rec.len())));
        }
        let id = rec[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("bad id `{}`: {e}", &rec[0])))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>().map_err(|e| parse_err(line, format!("bad number `{f}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, values));
    }
    if rows.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    Ok((width - 1, rows))
}

/// Writes `features.csv`, `attributes.csv` and `projection.csv` into `dir`.
pub fn save_dataset(ds: &GzslDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = ds.feature_dim();
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    write_csv(
        &dir.join(FEATURES_FILE),
        header,
        (0..ds.labels.len()).map(|r| {
            let mut row = vec![ds.labels[r].to_string()];
            row.extend(ds.features.row(r).iter().map(|&v| fmt_f64(v)));
            row
        }),
    )?;
    let mut header = vec!["class".to_string()];
    header.extend((0..ds.attr_dim()).map(|j| format!("a{j}")));
    write_csv(
        &dir.join(ATTRIBUTES_FILE),
        header,
        ds.attributes.iter().map(|a| {
            let mut row = vec![a.class_id().to_string()];
            row.extend(a.attributes().iter().map(|&v| fmt_f64(v)));
            row
        }),
    )?;
    let mut header = vec!["row".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    write_csv(
        &dir.join(PROJECTION_FILE),
        header,
        (0..ds.projection.rows()).map(|r| {
            let mut row = vec![r.to_string()];
            row.extend(ds.projection.row(r).iter().map(|&v| fmt_f64(v)));
            row
        }),
    )
}

pub fn load_dataset(dir: &Path) -> Result<GzslDataset> {
    let (d, rows) = read_table(&dir.join(FEATURES_FILE))?;
    let labels: Vec<usize> = rows.iter().map(|(l, _)| *l).collect();
    let features = Matrix::from_vec(rows.len(), d, rows.into_iter().flat_map(|(_, v)| v).collect())?;
    let (_, attr_rows) = read_table(&dir.join(ATTRIBUTES_FILE))?;
    let attributes = attr_rows
        .into_iter()
        .map(|(c, v)| AttributeVector::new(c, v))
        .collect::<Result<Vec<_>>>()?;
    let (pd, proj_rows) = read_table(&dir.join(PROJECTION_FILE))?;
    let projection = Matrix::from_vec(proj_rows.len(), pd, proj_rows.into_iter().flat_map(|(_, v)| v).collect())?;
    GzslDataset::new(features, labels, attributes, projection)
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "SPOTCKPT";

/// Resumable training state of one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub selector: SelectorParams,
    pub classifier: Option<ClassifierParams>,
    pub tracker: RewardTracker,
    pub optimizer: Optimizer,
    pub stopping: StoppingState,
    pub split: SplitSpec,
    pub logs: Vec<EpisodeLog>,
    pub config: ExperimentConfig,
    /// Run seed; with `next_episode` this fixes every later random draw.
    pub seed: u64,
    pub next_episode: usize,
}

/// Header line `SPOTCKPT v<version> sha256=<hex>` followed by a JSON payload.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let payload = serde_json::to_string(ckpt).map_err(|e| Error::Numeric(format!("cannot serialise checkpoint: {e}")))?;
    let digest = hex::encode(Sha256::digest(payload.as_bytes()));
    let text = format!("{CHECKPOINT_MAGIC} v{} sha256={digest}\n{payload}", ckpt.format_version);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = text
        .split_once('\n')
        .ok_or_else(|| Error::Integrity("checkpoint has no header line".into()))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Integrity("unreadable checkpoint version".into()))?;
    if version > CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let digest = parts
        .next()
        .and_then(|d| d.strip_prefix("sha256="))
        .ok_or_else(|| Error::Integrity("checkpoint header lacks a digest".into()))?;
    if hex::encode(Sha256::digest(payload.as_bytes())) != digest {
        return Err(Error::Integrity("checkpoint payload does not match its digest".into()));
    }
    let ckpt: Checkpoint =
        serde_json::from_str(payload).map_err(|e| Error::Integrity(format!("checkpoint payload unreadable: {e}")))?;
    if ckpt.format_version != version {
        return Err(Error::Integrity("header and payload versions disagree".into()));
    }
    Ok(ckpt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Table,
    Records,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "table" => Some(ReportFormat::Table),
            "records" => Some(ReportFormat::Records),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ReportFormat::Table => "table",
            ReportFormat::Records => "records",
        }
    }
}

/// One model's results across seeded runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub suite: SuiteResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
}

/// Metrics shown as percentages, with their column titles.
const PERCENT_COLUMNS: [(&str, &str); 4] = [("zsl", "ZSL"), ("seen", "S"), ("unseen", "U"), ("harmonic", "H")];

/// A harmonic mean disagreeing with its S and U by more than this many
/// percentage points is flagged.
pub const H_TOLERANCE: f64 = 0.05;

fn cell(m: MeanStd, percent: bool, runs: usize) -> String {
    let (mean, std) = if percent { (100.0 * m.mean, 100.0 * m.std) } else { (m.mean, m.std) };
    let digits = if percent { 2 } else { 4 };
    if runs > 1 {
        format!("{mean:.digits$} ± {std:.digits$}")
    } else {
        format!("{mean:.digits$}")
    }
}

impl Report {
    /// Aligned text table: `Model | ZSL | S | U | H | H(S,U) | others…`.
    /// `H(S,U)` recomputes the harmonic mean from the S and U means and
    /// carries a `!` when it disagrees with H beyond [`H_TOLERANCE`].
    pub fn to_table(&self) -> String {
        let mut extra: Vec<String> = Vec::new();
        for row in &self.rows {
            for (name, _) in &row.suite.summary {
                if !PERCENT_COLUMNS.iter().any(|(k, _)| k == name) && !extra.contains(name) {
                    extra.push(name.clone());
                }
            }
        }
        let mut header: Vec<String> = vec!["Model".into()];
        header.extend(PERCENT_COLUMNS.iter().map(|(_, t)| t.to_string()));
        header.push("H(S,U)".into());
        header.extend(extra.iter().cloned());
        let mut table = vec![header];
        for row in &self.rows {
            let runs = row.suite.runs.len();
            let mut cells = vec![row.model.clone()];
            for (key, _) in PERCENT_COLUMNS {
                cells.push(row.suite.metric(key).map(|m| cell(m, true, runs)).unwrap_or_else(|| "-".into()));
            }
            let check = match (row.suite.metric("seen"), row.suite.metric("unseen")) {
                (Some(s), Some(u)) => match harmonic_mean(s.mean, u.mean) {
                    Ok(h) => {
                        let flag = row
                            .suite
                            .metric("harmonic")
                            .is_some_and(|printed| (100.0 * (printed.mean - h)).abs() > H_TOLERANCE);
                        format!("{:.2}{}", 100.0 * h, if flag { " !" } else { "" })
                    }
                    Err(_) => "invalid".into(),
                },
                _ => "-".into(),
            };
            cells.push(check);
            for name in &extra {
                cells.push(row.suite.metric(name).map(|m| cell(m, false, runs)).unwrap_or_else(|| "-".into()));
            }
            table.push(cells);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = writeln!(out, "# config {}", self.config_hash);
        for (i, row) in table.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| {
                    let pad = w - s.chars().count();
                    if c == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join(" | ").trim_end());
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                let _ = writeln!(out, "{}", rule.join("-|-"));
            }
        }
        out
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for row in &self.rows {
            for (seed, metrics) in &row.suite.runs {
                for (metric, value) in metrics {
                    out.push(Record::Run {
                        model: row.model.clone(),
                        metric: metric.clone(),
                        seed: *seed,
                        value: *value,
                        config_hash: self.config_hash.clone(),
                    });
                }
            }
            for (metric, m) in &row.suite.summary {
                out.push(Record::Summary {
                    model: row.model.clone(),
                    metric: metric.clone(),
                    mean: m.mean,
                    std: m.std,
                    n_runs: row.suite.runs.len(),
                    config_hash: self.config_hash.clone(),
                });
            }
        }
        out
    }

    /// Reassembles a report from records written by [`Report::to_records`].
    pub fn from_records(records: &[Record]) -> Result<Report> {
        let mut config_hash: Option<String> = None;
        let mut rows: Vec<ReportRow> = Vec::new();
        for rec in records {
            let (model, hash) = match rec {
                Record::Run { model, config_hash, .. } | Record::Summary { model, config_hash, .. } => (model, config_hash),
            };
            match &config_hash {
                None => config_hash = Some(hash.clone()),
                Some(h) if h != hash => return Err(Error::Input("records mix config hashes".into())),
                _ => {}
            }
            let idx = match rows.iter().position(|r| &r.model == model) {
                Some(i) => i,
                None => {
                    rows.push(ReportRow {
                        model: model.clone(),
                        suite: SuiteResult {
                            runs: Vec::new(),
                            summary: Vec::new(),
                        },
                    });
                    rows.len() - 1
                }
            };
            let suite = &mut rows[idx].suite;
            match rec {
                Record::Run { metric, seed, value, .. } => {
                    match suite.runs.iter_mut().find(|(s, _)| s == seed) {
                        Some((_, m)) => m.push((metric.clone(), *value)),
                        None => suite.runs.push((*seed, vec![(metric.clone(), *value)])),
                    }
                }
                Record::Summary { metric, mean, std, .. } => {
                    suite.summary.push((metric.clone(), MeanStd { mean: *mean, std: *std }))
                }
            }
        }
        Ok(Report {
            config_hash: config_hash.unwrap_or_default(),
            rows,
        })
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Table => self.to_table(),
            ReportFormat::Records => self
                .to_records()
                .iter()
                .map(|r| serde_json::to_string(r).expect("records serialise") + "\n")
                .collect(),
        }
    }
}

/// One line of the records format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Run {
        model: String,
        metric: String,
        seed: u64,
        value: f64,
        config_hash: String,
    },
    Summary {
        model: String,
        metric: String,
        mean: f64,
        std: f64,
        n_runs: usize,
        config_hash: String,
    },
}

pub fn parse_records(text: &str, origin: &Path) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i as u64 + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_report(report: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, report.render(format)).map_err(|e| Error::io(path, e))
}

/// Episode logs as JSON lines.
pub fn write_episode_logs(logs: &[EpisodeLog], path: &Path) -> Result<()> {
    let mut text = String::new();
    for log in logs {
        text.push_str(&serde_json::to_string(log).map_err(|e| Error::Numeric(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Conventional file name for a run's checkpoint inside `dir`.
pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("checkpoint-seed{seed}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{train, ClassifierConfig, Labeled};
    use crate::gzsl_eval::{make_split, run_experiment_suite, SplitConfig};
    use crate::orchestrator::{run_training, ExperimentState};

    fn small_spec() -> BenchmarkSpec {
        BenchmarkSpec {
            n_classes: 4,
            samples_per_class: 10,
            feature_dim: 5,
            d_attr: 3,
            intra_class_noise: 0.7,
            inter_class_separation: 2.0,
            seed: 11,
        }
    }

    #[test]
    fn benchmark_shape_and_balance() {
        let ds = make_benchmark(&small_spec()).unwrap();
        assert_eq!(ds.features.shape(), (40, 5));
        for c in 0..4 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert_eq!(make_benchmark(&small_spec()).unwrap(), ds);
    }

    #[test]
    fn noiseless_benchmark_sits_on_class_means() {
        let spec = BenchmarkSpec {
            intra_class_noise: 0.0,
            ..small_spec()
        };
        let ds = make_benchmark(&spec).unwrap();
        for (r, &c) in ds.labels.iter().enumerate() {
            let mean = matmul(&Matrix::row_vector(ds.attributes[c].attributes()), &ds.projection).unwrap();
            assert_eq!(ds.features.row(r), mean.row(0));
        }
    }

    #[test]
    fn well_separated_benchmark_is_linearly_learnable() {
        let spec = BenchmarkSpec {
            n_classes: 6,
            samples_per_class: 60,
            feature_dim: 10,
            d_attr: 5,
            intra_class_noise: 0.3,
            inter_class_separation: 8.0,
            seed: 4,
        };
        let ds = make_benchmark(&spec).unwrap();
        let split = make_split(
            &ds,
            &SplitConfig {
                unseen_fraction: 0.5,
                ..SplitConfig::default()
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let (x, y) = ds.rows(&split.train_idx);
        let (vx, vy) = ds.rows(&split.val_idx);
        let report = train(
            Labeled::new(&x, &y).unwrap(),
            Some(Labeled::new(&vx, &vy).unwrap()),
            &split.seen_classes,
            &ClassifierConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert!(*report.per_epoch_val_acc.last().unwrap() > 0.95);
    }

    #[test]
    fn invalid_spec_is_a_config_error() {
        let spec = BenchmarkSpec {
            n_classes: 1,
            ..small_spec()
        };
        assert!(matches!(make_benchmark(&spec), Err(Error::Config { .. })));
        let spec = BenchmarkSpec {
            feature_dim: 2,
            ..small_spec()
        };
        assert!(matches!(make_benchmark(&spec), Err(Error::Config { .. })));
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_benchmark(&small_spec()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.features.data().iter().zip(ds.features.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_dataset_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_benchmark(&small_spec()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join(FEATURES_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3].push_str(",1.0");
        fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { .. })));
        fs::write(&path, "label,f0\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { .. })));
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join(PROJECTION_FILE)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Input(_))));
    }

    fn trained_checkpoint() -> Checkpoint {
        let mut cfg = ExperimentConfig::default();
        cfg.benchmark = small_spec();
        cfg.benchmark.samples_per_class = 16;
        cfg.selector.layers = 1;
        cfg.selector.heads = 2;
        cfg.selector.d_model = 8;
        cfg.selector.ff_hidden = 8;
        cfg.generator.per_class = 4;
        let ds = make_benchmark(&cfg.benchmark).unwrap();
        let mut state = ExperimentState::new(cfg, ds, 3).unwrap();
        run_training(&mut state, 2, 5).unwrap();
        state.to_checkpoint()
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ckpt = trained_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

        let newer = Checkpoint {
            format_version: CHECKPOINT_VERSION + 1,
            ..ckpt.clone()
        };
        save_checkpoint(&newer, &path).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Version { found, supported }) if found == CHECKPOINT_VERSION + 1 && supported == CHECKPOINT_VERSION
        ));

        save_checkpoint(&ckpt, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("\"seed\":3", "\"seed\":4", 1);
        assert_ne!(tampered, text);
        fs::write(&path, tampered).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
        fs::write(&path, "garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    fn sample_report() -> Report {
        let suite = run_experiment_suite(0, 2, |seed| {
            Ok(vec![
                ("seen".into(), 0.4 + 0.01 * seed as f64),
                ("unseen".into(), 0.5),
                ("harmonic".into(), harmonic_mean(0.4 + 0.01 * seed as f64, 0.5).unwrap()),
                ("final_q_hat".into(), 0.7),
            ])
        })
        .unwrap();
        Report {
            config_hash: "abc".into(),
            rows: vec![ReportRow {
                model: "SPOT".into(),
                suite,
            }],
        }
    }

    #[test]
    fn table_recomputes_and_flags_harmonic_mean() {
        let row = |h: f64| {
            let suite = run_experiment_suite(0, 1, |_| {
                Ok(vec![("seen".into(), 0.437), ("unseen".into(), 0.577), ("harmonic".into(), h)])
            })
            .unwrap();
            Report {
                config_hash: "h".into(),
                rows: vec![ReportRow {
                    model: "WGAN".into(),
                    suite,
                }],
            }
            .to_table()
        };
        let good = row(0.497);
        assert!(good.contains("49.73") && !good.contains('!'), "{good}");
        let bad = row(0.480);
        assert!(bad.contains('!'), "{bad}");
        let empty = Report {
            config_hash: "e".into(),
            rows: vec![],
        }
        .to_table();
        assert_eq!(empty.lines().count(), 3);
        assert!(empty.contains("Model") && empty.contains("| H |"));
    }

    #[test]
    fn records_round_trip() {
        let report = sample_report();
        let text = report.render(ReportFormat::Records);
        let records = parse_records(&text, Path::new("r")).unwrap();
        assert_eq!(records, report.to_records());
        assert_eq!(Report::from_records(&records).unwrap(), report);
        assert!(matches!(parse_records("{oops}\n", Path::new("r")), Err(Error::Parse { line: 1, .. })));
    }
}
