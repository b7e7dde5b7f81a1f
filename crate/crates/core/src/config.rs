//! Experiment configuration as flat `section.key = value` pairs.
//!
//! Files hold one assignment per line; `#` starts a comment. Every key has a
//! default, unknown keys are rejected, and every error names the key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierConfig;
use crate::data_io::{BenchmarkSpec, ReportFormat};
use crate::error::{Error, Result};
use crate::generator::CorruptionMode;
use crate::gzsl_eval::SplitConfig;
use crate::policy_opt::{Algorithm, OptimizerKind, PpoConfig};
use crate::selector::SelectorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSettings {
    pub noise_scale: f64,
    pub corruption_rate: f64,
    pub corruption_mode: CorruptionMode,
    /// Candidates generated per class in every pool.
    pub per_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorSettings {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_hidden: usize,
    pub ff_depth: usize,
}

impl SelectorSettings {
    pub fn to_config(&self, feature_dim: usize, cond_dim: usize) -> SelectorConfig {
        SelectorConfig {
            feature_dim,
            cond_dim,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ff_hidden: self.ff_hidden,
            ff_depth: self.ff_depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    pub max_episodes: usize,
    pub patience: usize,
    /// Write a checkpoint every this many episodes; 0 disables.
    pub checkpoint_every: usize,
}

/// How the frozen selector acts on final-evaluation pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalSelection {
    /// Keep candidates whose select-probability exceeds one half.
    Greedy,
    /// Sample actions as during training.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSpec,
    pub generator: GeneratorSettings,
    pub selector: SelectorSettings,
    pub ppo: PpoConfig,
    pub classifier: ClassifierConfig,
    pub split: SplitConfig,
    pub training: TrainingSettings,
    pub eval_selection: EvalSelection,
    pub n_runs: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub format: ReportFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkSpec::default(),
            generator: GeneratorSettings {
                noise_scale: 1.0,
                corruption_rate: 0.4,
                corruption_mode: CorruptionMode::WrongClassMean,
                per_class: 20,
            },
            selector: SelectorSettings {
                layers: 8,
                heads: 8,
                d_model: 64,
                ff_hidden: 128,
                ff_depth: 2,
            },
            ppo: PpoConfig::default(),
            classifier: ClassifierConfig::default(),
            split: SplitConfig::default(),
            training: TrainingSettings {
                max_episodes: 60,
                patience: 3,
                checkpoint_every: 0,
            },
            eval_selection: EvalSelection::Greedy,
            n_runs: 1,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            format: ReportFormat::Table,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn optimizer_name(kind: OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam { .. } => "adam",
    }
}

impl ExperimentConfig {
    /// Assigns one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "benchmark.n_classes" => self.benchmark.n_classes = parse_num(key, v)?,
            "benchmark.samples_per_class" => self.benchmark.samples_per_class = parse_num(key, v)?,
            "benchmark.feature_dim" => self.benchmark.feature_dim = parse_num(key, v)?,
            "benchmark.d_attr" => self.benchmark.d_attr = parse_num(key, v)?,
            "benchmark.intra_class_noise" => self.benchmark.intra_class_noise = parse_num(key, v)?,
            "benchmark.inter_class_separation" => self.benchmark.inter_class_separation = parse_num(key, v)?,
            "benchmark.seed" => self.benchmark.seed = parse_num(key, v)?,
            "generator.noise_scale" => self.generator.noise_scale = parse_num(key, v)?,
            "generator.corruption_rate" => self.generator.corruption_rate = parse_num(key, v)?,
            "generator.corruption_mode" => {
                self.generator.corruption_mode = CorruptionMode::parse(v)
                    .ok_or_else(|| Error::config(key, "expected `off-manifold-noise` or `wrong-class-mean`"))?
            }
            "generator.per_class" => self.generator.per_class = parse_num(key, v)?,
            "selector.layers" => self.selector.layers = parse_num(key, v)?,
            "selector.heads" => self.selector.heads = parse_num(key, v)?,
            "selector.d_model" => self.selector.d_model = parse_num(key, v)?,
            "selector.ff_hidden" => self.selector.ff_hidden = parse_num(key, v)?,
            "selector.ff_depth" => self.selector.ff_depth = parse_num(key, v)?,
            "ppo.epsilon" => self.ppo.epsilon = parse_num(key, v)?,
            "ppo.learning_rate" => self.ppo.learning_rate = parse_num(key, v)?,
            "ppo.update_epochs" => self.ppo.update_epochs = parse_num(key, v)?,
            "ppo.reward_window" => self.ppo.reward_window = parse_num(key, v)?,
            "ppo.alpha" => self.ppo.alpha = parse_num(key, v)?,
            "ppo.value_coef" => self.ppo.value_coef = parse_num(key, v)?,
            "ppo.warm_baseline" => self.ppo.warm_baseline = parse_num(key, v)?,
            "ppo.optimizer" => {
                self.ppo.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::adam(),
                    _ => return Err(Error::config(key, "expected `sgd` or `adam`")),
                }
            }
            "ppo.algorithm" => {
                self.ppo.algorithm = match v {
                    "ppo" => Algorithm::Ppo,
                    "reinforce" => Algorithm::Reinforce,
                    _ => return Err(Error::config(key, "expected `ppo` or `reinforce`")),
                }
            }
            "classifier.epochs" => self.classifier.epochs = parse_num(key, v)?,
            "classifier.learning_rate" => self.classifier.learning_rate = parse_num(key, v)?,
            "split.unseen_fraction" => self.split.unseen_fraction = parse_num(key, v)?,
            "split.val_fraction" => self.split.val_fraction = parse_num(key, v)?,
            "split.test_fraction" => self.split.test_fraction = parse_num(key, v)?,
            "split.excluded_classes" => self.split.excluded_classes = parse_list(key, v)?,
            "training.max_episodes" => self.training.max_episodes = parse_num(key, v)?,
            "training.patience" => self.training.patience = parse_num(key, v)?,
            "training.checkpoint_every" => self.training.checkpoint_every = parse_num(key, v)?,
            "eval.selection" => {
                self.eval_selection = match v {
                    "greedy" => EvalSelection::Greedy,
                    "sample" => EvalSelection::Sample,
                    _ => return Err(Error::config(key, "expected `greedy` or `sample`")),
                }
            }
            "run.n_runs" => self.n_runs = parse_num(key, v)?,
            "run.seed" => self.seed = parse_num(key, v)?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "output.dir" => self.out_dir = PathBuf::from(v),
            "output.format" => {
                self.format = ReportFormat::parse(v).ok_or_else(|| Error::config(key, "expected `table` or `records`"))?
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = &self.benchmark;
        let g = &self.generator;
        let s = &self.selector;
        let p = &self.ppo;
        let excluded: Vec<String> = self.split.excluded_classes.iter().map(|c| c.to_string()).collect();
        vec![
            ("benchmark.n_classes", b.n_classes.to_string()),
            ("benchmark.samples_per_class", b.samples_per_class.to_string()),
            ("benchmark.feature_dim", b.feature_dim.to_string()),
            ("benchmark.d_attr", b.d_attr.to_string()),
            ("benchmark.intra_class_noise", b.intra_class_noise.to_string()),
            ("benchmark.inter_class_separation", b.inter_class_separation.to_string()),
            ("benchmark.seed", b.seed.to_string()),
            ("generator.noise_scale", g.noise_scale.to_string()),
            ("generator.corruption_rate", g.corruption_rate.to_string()),
            ("generator.corruption_mode", g.corruption_mode.as_str().to_string()),
            ("generator.per_class", g.per_class.to_string()),
            ("selector.layers", s.layers.to_string()),
            ("selector.heads", s.heads.to_string()),
            ("selector.d_model", s.d_model.to_string()),
            ("selector.ff_hidden", s.ff_hidden.to_string()),
            ("selector.ff_depth", s.ff_depth.to_string()),
            ("ppo.epsilon", p.epsilon.to_string()),
            ("ppo.learning_rate", p.learning_rate.to_string()),
            ("ppo.update_epochs", p.update_epochs.to_string()),
            ("ppo.reward_window", p.reward_window.to_string()),
            ("ppo.alpha", p.alpha.to_string()),
            ("ppo.value_coef", p.value_coef.to_string()),
            ("ppo.warm_baseline", p.warm_baseline.to_string()),
            ("ppo.optimizer", optimizer_name(p.optimizer).to_string()),
            (
                "ppo.algorithm",
                match p.algorithm {
                    Algorithm::Ppo => "ppo",
                    Algorithm::Reinforce => "reinforce",
                }
                .to_string(),
            ),
            ("classifier.epochs", self.classifier.epochs.to_string()),
            ("classifier.learning_rate", self.classifier.learning_rate.to_string()),
            ("split.unseen_fraction", self.split.unseen_fraction.to_string()),
            ("split.val_fraction", self.split.val_fraction.to_string()),
            ("split.test_fraction", self.split.test_fraction.to_string()),
            ("split.excluded_classes", excluded.join(",")),
            ("training.max_episodes", self.training.max_episodes.to_string()),
            ("training.patience", self.training.patience.to_string()),
            ("training.checkpoint_every", self.training.checkpoint_every.to_string()),
            (
                "eval.selection",
                match self.eval_selection {
                    EvalSelection::Greedy => "greedy",
                    EvalSelection::Sample => "sample",
                }
                .to_string(),
            ),
            ("run.n_runs", self.n_runs.to_string()),
            ("run.seed", self.seed.to_string()),
            ("data.dir", self.data_dir.display().to_string()),
            ("output.dir", self.out_dir.display().to_string()),
            ("output.format", self.format.as_str().to_string()),
        ]
    }

    /// Applies `key = value` lines on top of `self`. `origin` names the
    /// source in parse errors.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i as u64 + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults overlaid with the file at `path`, validated.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical `key = value` dump; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical dump, hex encoded. `output.*` keys are left
    /// out: where and how a report is written does not change its numbers.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.entries() {
            if !k.starts_with("output.") {
                hasher.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn selector_config(&self) -> SelectorConfig {
        self.selector.to_config(self.benchmark.feature_dim, self.benchmark.d_attr)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        if !(0.0..=1.0).contains(&self.generator.corruption_rate) {
            return Err(Error::config("generator.corruption_rate", "must lie in [0, 1]"));
        }
        if !(self.generator.noise_scale >= 0.0) || !self.generator.noise_scale.is_finite() {
            return Err(Error::config("generator.noise_scale", "must be finite and non-negative"));
        }
        if self.generator.per_class == 0 {
            return Err(Error::config("generator.per_class", "must be at least 1"));
        }
        self.selector_config().validate()?;
        self.ppo.validate()?;
        self.classifier.validate()?;
        for (key, v) in [
            ("split.unseen_fraction", self.split.unseen_fraction),
            ("split.val_fraction", self.split.val_fraction),
            ("split.test_fraction", self.split.test_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(key, "must lie in (0, 1)"));
            }
        }
        if self.split.val_fraction + self.split.test_fraction >= 1.0 {
            return Err(Error::config("split.test_fraction", "val and test fractions leave no training data"));
        }
        if let Some(&c) = self.split.excluded_classes.iter().find(|&&c| c >= self.benchmark.n_classes) {
            return Err(Error::config("split.excluded_classes", format!("class {c} does not exist")));
        }
        if self.training.max_episodes == 0 {
            return Err(Error::config("training.max_episodes", "must be at least 1"));
        }
        if self.n_runs == 0 {
            return Err(Error::config("run.n_runs", "must be at least 1"));
        }
        Ok(())
    }
}
