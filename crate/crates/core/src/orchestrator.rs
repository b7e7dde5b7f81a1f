//! The training loop (generate, select, train classifier, reward, update the
//! policy) and the final evaluation with a frozen selector.

use std::collections::BTreeSet;

use log::{debug, warn};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierParams, Labeled};
use crate::config::{EvalSelection, ExperimentConfig};
use crate::data_io::Checkpoint;
use crate::error::{Error, Result};
use crate::generator::{AttributeVector, FeatureGenerator, GeneratorSpec, ToyGenerator};
use crate::gzsl_eval::{evaluate_gzsl, evaluate_zsl, make_split, GzslDataset, GzslMetrics, RunMetrics, SplitSpec};
use crate::numerics::Matrix;
use crate::policy_opt::{policy_update, Optimizer, RewardTracker, Trajectory};
use crate::selector::{apply_selection, greedy_actions, sample_actions, ActionVector, CandidatePool, SelectorParams};

/// Independent random streams; each draw site gets its own seed.
mod stream {
    pub const SPLIT: u64 = 1;
    pub const SELECTOR_INIT: u64 = 2;
    pub const POOL: u64 = 3;
    pub const ACTIONS: u64 = 4;
    pub const REWARD_CLASSIFIER: u64 = 5;
    pub const FINAL_SEEN_POOL: u64 = 6;
    pub const FINAL_UNSEEN_POOL: u64 = 7;
    pub const FINAL_ACTIONS: u64 = 8;
    pub const FINAL_RANDOM: u64 = 9;
    pub const ZSL_CLASSIFIER: u64 = 10;
    pub const GZSL_CLASSIFIER: u64 = 11;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for draw site `stream` at position `index` of the run seeded `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ index)
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Action source during training episodes. Everything but `Policy` is a
/// testing hook; the policy is still updated on the forced actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeSelection {
    Policy,
    KeepAll,
    DiscardAll,
    Oracle,
}

/// Candidate selection on the final-evaluation pools.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FinalSelection {
    /// The frozen trained selector.
    Policy,
    /// The selector runs but every candidate is kept.
    KeepAll,
    /// No selector at all: every candidate is used.
    Bypass,
    /// Uniformly random subsets of exactly these sizes.
    Random { seen_keep: usize, unseen_keep: usize },
    /// Discards exactly the corrupted candidates.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingState {
    pub best: Option<f64>,
    pub stale: usize,
    pub stopped: bool,
}

impl StoppingState {
    pub fn new() -> Self {
        Self {
            best: None,
            stale: 0,
            stopped: false,
        }
    }

    /// Records a smoothed reward and reports whether training should stop.
    pub fn observe(&mut self, q_hat: f64, patience: usize) -> bool {
        match self.best {
            Some(best) if q_hat <= best => self.stale += 1,
            _ => {
                self.best = Some(q_hat);
                self.stale = 0;
            }
        }
        self.stopped = self.stale >= patience;
        self.stopped
    }
}

impl Default for StoppingState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub t: usize,
    pub pool_size: usize,
    pub selected: usize,
    pub raw_q: f64,
    pub q_hat: f64,
    /// Policy loss before and after the update.
    pub loss: f64,
    pub loss_after: f64,
    /// Fraction of discarded candidates that were corrupted.
    pub precision: Option<f64>,
    /// Fraction of corrupted candidates that were discarded.
    pub recall: Option<f64>,
}

/// Detection quality of a selection, treating "discard" as "flag as corrupted".
pub fn precision_recall(actions: &[bool], corrupted: &[bool]) -> (Option<f64>, Option<f64>) {
    let discarded = actions.iter().filter(|&&a| !a).count();
    let bad = corrupted.iter().filter(|&&c| c).count();
    let hits = actions.iter().zip(corrupted).filter(|(&a, &c)| !a && c).count();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    (ratio(hits, discarded), ratio(hits, bad))
}

/// Everything one seeded run carries between episodes.
#[derive(Debug, Clone)]
pub struct ExperimentState {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub dataset: GzslDataset,
    pub split: SplitSpec,
    pub selector: SelectorParams,
    pub optimizer: Optimizer,
    pub tracker: RewardTracker,
    pub stopping: StoppingState,
    /// Reward classifier from the latest episode.
    pub classifier: Option<ClassifierParams>,
    pub logs: Vec<EpisodeLog>,
    pub episode_selection: EpisodeSelection,
    generator: ToyGenerator,
}

fn build_generator(config: &ExperimentConfig, dataset: &GzslDataset, seed: u64) -> Result<ToyGenerator> {
    let spec = GeneratorSpec {
        feature_dim: dataset.feature_dim(),
        noise_scale: config.generator.noise_scale,
        corruption_rate: config.generator.corruption_rate,
        corruption_mode: config.generator.corruption_mode,
        seed,
    };
    ToyGenerator::new(spec, dataset.projection.clone(), dataset.attributes.clone())
}

impl ExperimentState {
    pub fn new(config: ExperimentConfig, dataset: GzslDataset, seed: u64) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        if dataset.feature_dim() != config.benchmark.feature_dim || dataset.attr_dim() != config.benchmark.d_attr {
            return Err(Error::Input(format!(
                "dataset has feature_dim {} and d_attr {}, config expects {} and {}",
                dataset.feature_dim(),
                dataset.attr_dim(),
                config.benchmark.feature_dim,
                config.benchmark.d_attr
            )));
        }
        let split = make_split(&dataset, &config.split, &mut rng_for(seed, stream::SPLIT, 0))?;
        let selector = SelectorParams::init(config.selector_config(), &mut rng_for(seed, stream::SELECTOR_INIT, 0))?;
        let generator = build_generator(&config, &dataset, seed)?;
        let mut state = Self {
            optimizer: Optimizer::new(config.ppo.optimizer),
            tracker: RewardTracker::new(config.ppo.alpha, config.ppo.reward_window)?,
            config,
            seed,
            dataset,
            split,
            selector,
            stopping: StoppingState::new(),
            classifier: None,
            logs: Vec::new(),
            episode_selection: EpisodeSelection::Policy,
            generator,
        };
        if state.config.ppo.warm_baseline {
            let q = state.real_only_q()?;
            state.selector.reset_value_head(q);
        }
        Ok(state)
    }

    /// Rebuilds a run from a checkpoint and the dataset it was trained on.
    pub fn from_checkpoint(ckpt: Checkpoint, dataset: GzslDataset) -> Result<Self> {
        dataset.validate()?;
        let generator = build_generator(&ckpt.config, &dataset, ckpt.seed)?;
        if ckpt.next_episode != ckpt.tracker.timesteps() + 1 || ckpt.logs.len() != ckpt.tracker.timesteps() {
            return Err(Error::Integrity("checkpoint episode counters disagree".into()));
        }
        Ok(Self {
            config: ckpt.config,
            seed: ckpt.seed,
            dataset,
            split: ckpt.split,
            selector: ckpt.selector,
            optimizer: ckpt.optimizer,
            tracker: ckpt.tracker,
            stopping: ckpt.stopping,
            classifier: ckpt.classifier,
            logs: ckpt.logs,
            episode_selection: EpisodeSelection::Policy,
            generator,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: crate::data_io::CHECKPOINT_VERSION,
            selector: self.selector.clone(),
            classifier: self.classifier.clone(),
            tracker: self.tracker.clone(),
            optimizer: self.optimizer.clone(),
            stopping: self.stopping,
            split: self.split.clone(),
            logs: self.logs.clone(),
            config: self.config.clone(),
            seed: self.seed,
            next_episode: self.next_episode(),
        }
    }

    pub fn next_episode(&self) -> usize {
        self.tracker.timesteps() + 1
    }

    pub fn generator(&self) -> &ToyGenerator {
        &self.generator
    }

    fn attrs_of(&self, classes: &[usize]) -> Vec<AttributeVector> {
        classes.iter().map(|&c| self.dataset.attributes[c].clone()).collect()
    }

    /// Real seen-class training data, optionally extended with synthetic rows.
    fn training_set(&self, extra: &[&CandidatePool]) -> Result<(Matrix, Vec<usize>)> {
        let (real_x, real_y) = self.dataset.rows(&self.split.train_idx);
        let mut parts = vec![&real_x];
        let mut labels = real_y;
        for pool in extra {
            parts.push(pool.features());
            labels.extend_from_slice(pool.class_labels());
        }
        Ok((Matrix::vstack(&parts, self.dataset.feature_dim())?, labels))
    }

    /// Accuracy of a classifier trained on real seen data alone, as the
    /// reward would score it at episode `t`.
    pub fn real_only_q(&self) -> Result<f64> {
        let (x, y) = self.training_set(&[])?;
        let (vx, vy) = self.dataset.rows(&self.split.val_idx);
        let report = classifier::train(
            Labeled::new(&x, &y)?,
            Some(Labeled::new(&vx, &vy)?),
            &self.split.seen_classes,
            &self.config.classifier,
            &mut rng_for(self.seed, stream::REWARD_CLASSIFIER, 0),
        )?;
        let window = self.config.ppo.reward_window;
        let acc = &report.per_epoch_val_acc;
        Ok(acc[acc.len().saturating_sub(window)..].iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// One episode: fresh seen-class pool, select, train the reward classifier,
/// smooth the reward, update the policy.
pub fn run_episode(state: &mut ExperimentState) -> Result<EpisodeLog> {
    let t = state.next_episode();
    let seed = state.seed;
    let seen_attrs = state.attrs_of(&state.split.seen_classes);
    let pool = state.generator.generate_pool(
        &seen_attrs,
        state.config.generator.per_class,
        &mut rng_for(seed, stream::POOL, t as u64),
    )?;
    let out = state.selector.forward(&pool)?;
    let actions = match state.episode_selection {
        EpisodeSelection::Policy => {
            sample_actions(&out.action_probs, &out.values, &mut rng_for(seed, stream::ACTIONS, t as u64))?
        }
        EpisodeSelection::KeepAll => ActionVector::forced(vec![true; pool.len()], &out.action_probs, &out.values)?,
        EpisodeSelection::DiscardAll => ActionVector::forced(vec![false; pool.len()], &out.action_probs, &out.values)?,
        EpisodeSelection::Oracle => ActionVector::forced(
            pool.corruption_truth().iter().map(|&c| !c).collect(),
            &out.action_probs,
            &out.values,
        )?,
    };
    let selected = apply_selection(&pool, &actions)?;
    let (x, y) = state.training_set(&[&selected])?;
    let (vx, vy) = state.dataset.rows(&state.split.val_idx);
    let report = classifier::train(
        Labeled::new(&x, &y)?,
        Some(Labeled::new(&vx, &vy)?),
        &state.split.seen_classes,
        &state.config.classifier,
        &mut rng_for(seed, stream::REWARD_CLASSIFIER, 0),
    )?;
    let recorded = state.tracker.record_epochs(&report.per_epoch_val_acc)?;
    debug_assert_eq!(recorded, t);
    let raw_q = state.tracker.q_value(t)?;
    let q_hat = state.tracker.ema_reward(t, raw_q)?;
    let traj = Trajectory {
        old_log_probs: actions.log_probs.clone(),
        actions: actions.actions.clone(),
        values: actions.values.clone(),
        reward: q_hat,
    };
    let (updated, stats) = match policy_update(&state.selector, &pool, &traj, &state.config.ppo, &mut state.optimizer) {
        Ok(v) => v,
        Err(e) => {
            log::error!("episode {t}: policy update failed: {e}");
            return Err(e);
        }
    };
    state.selector = updated;
    state.classifier = Some(report.final_params);
    let (precision, recall) = precision_recall(&actions.actions, pool.corruption_truth());
    let log = EpisodeLog {
        t,
        pool_size: pool.len(),
        selected: selected.len(),
        raw_q,
        q_hat,
        loss: stats.initial_loss,
        loss_after: stats.final_loss,
        precision,
        recall,
    };
    debug!(
        "episode {t}: kept {}/{} q={raw_q:.4} q_hat={q_hat:.4} loss={:.5}",
        log.selected, log.pool_size, log.loss
    );
    state.logs.push(log.clone());
    Ok(log)
}

/// Runs episodes until `max_episodes` in total have run or the smoothed
/// reward has failed to improve for `patience` consecutive episodes.
/// `on_episode` sees the state after every episode (e.g. to checkpoint).
pub fn run_training_with<F>(state: &mut ExperimentState, max_episodes: usize, patience: usize, mut on_episode: F) -> Result<()>
where
    F: FnMut(&ExperimentState) -> Result<()>,
{
    if max_episodes == 0 {
        return Err(Error::config("training.max_episodes", "must be at least 1"));
    }
    while !state.stopping.stopped && state.tracker.timesteps() < max_episodes {
        let log = run_episode(state)?;
        state.stopping.observe(log.q_hat, patience);
        on_episode(state)?;
    }
    Ok(())
}

pub fn run_training(state: &mut ExperimentState, max_episodes: usize, patience: usize) -> Result<()> {
    run_training_with(state, max_episodes, patience, |_| Ok(()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub zsl: f64,
    pub gzsl: GzslMetrics,
    pub seen_kept: usize,
    pub seen_pool: usize,
    pub unseen_kept: usize,
    pub unseen_pool: usize,
    /// Unseen classes whose selection was empty and fell back to the full pool.
    pub fallback_classes: Vec<usize>,
    pub unseen_precision: Option<f64>,
    pub unseen_recall: Option<f64>,
    /// Final smoothed reward of training, if any episode ran.
    pub final_q_hat: Option<f64>,
}

impl FinalReport {
    pub fn metrics(&self) -> RunMetrics {
        let mut m = vec![
            ("zsl".to_string(), self.zsl),
            ("seen".to_string(), self.gzsl.seen),
            ("unseen".to_string(), self.gzsl.unseen),
            ("harmonic".to_string(), self.gzsl.harmonic),
            (
                "keep_rate".to_string(),
                (self.seen_kept + self.unseen_kept) as f64 / (self.seen_pool + self.unseen_pool) as f64,
            ),
        ];
        if let Some(q) = self.final_q_hat {
            m.push(("final_q_hat".to_string(), q));
        }
        m
    }
}

fn select_final(
    state: &ExperimentState,
    pool: &CandidatePool,
    mode: FinalSelection,
    random_keep: Option<usize>,
    salt: u64,
) -> Result<Vec<bool>> {
    Ok(match mode {
        FinalSelection::Bypass => vec![true; pool.len()],
        FinalSelection::Oracle => pool.corruption_truth().iter().map(|&c| !c).collect(),
        FinalSelection::Random { .. } => {
            let k = random_keep.unwrap_or(pool.len());
            if k > pool.len() {
                return Err(Error::Input(format!("cannot keep {k} of {} candidates", pool.len())));
            }
            let mut keep = vec![false; pool.len()];
            for i in sample_indices(&mut rng_for(state.seed, stream::FINAL_RANDOM, salt), pool.len(), k) {
                keep[i] = true;
            }
            keep
        }
        FinalSelection::KeepAll => {
            state.selector.forward(pool)?;
            vec![true; pool.len()]
        }
        FinalSelection::Policy => {
            let out = state.selector.forward(pool)?;
            let actions = match state.config.eval_selection {
                EvalSelection::Greedy => greedy_actions(&out.action_probs, &out.values)?,
                EvalSelection::Sample => {
                    sample_actions(&out.action_probs, &out.values, &mut rng_for(state.seed, stream::FINAL_ACTIONS, salt))?
                }
            };
            actions.actions
        }
    })
}

/// Freezes the selector, selects from fresh seen and unseen pools, and
/// scores an unseen-only (ZSL) and a joint (GZSL) classifier.
pub fn final_evaluation(state: &ExperimentState, mode: FinalSelection) -> Result<FinalReport> {
    let seed = state.seed;
    let per_class = state.config.generator.per_class;
    let seen_pool = state.generator.generate_pool(
        &state.attrs_of(&state.split.seen_classes),
        per_class,
        &mut rng_for(seed, stream::FINAL_SEEN_POOL, 0),
    )?;
    let unseen_pool = state.generator.generate_pool(
        &state.attrs_of(&state.split.unseen_classes),
        per_class,
        &mut rng_for(seed, stream::FINAL_UNSEEN_POOL, 0),
    )?;
    let (seen_k, unseen_k) = match mode {
        FinalSelection::Random { seen_keep, unseen_keep } => (Some(seen_keep), Some(unseen_keep)),
        _ => (None, None),
    };
    let seen_keep = select_final(state, &seen_pool, mode, seen_k, 0)?;
    let mut unseen_keep = select_final(state, &unseen_pool, mode, unseen_k, 1)?;
    let (unseen_precision, unseen_recall) = precision_recall(&unseen_keep, unseen_pool.corruption_truth());

    let mut fallback_classes = Vec::new();
    for &c in &state.split.unseen_classes {
        let rows: Vec<usize> = (0..unseen_pool.len()).filter(|&i| unseen_pool.class_labels()[i] == c).collect();
        if rows.iter().all(|&i| !unseen_keep[i]) {
            warn!("unseen class {c}: selector kept no candidates, using the full pool");
            for i in rows {
                unseen_keep[i] = true;
            }
            fallback_classes.push(c);
        }
    }
    let seen_sel = seen_pool.subset(&seen_keep)?;
    let unseen_sel = unseen_pool.subset(&unseen_keep)?;

    let test_unseen = state.split.test_unseen_idx(&state.dataset);
    let (ux, uy) = state.dataset.rows(&test_unseen);
    let zsl_clf = classifier::train(
        Labeled::new(unseen_sel.features(), unseen_sel.class_labels())?,
        None,
        &state.split.unseen_classes,
        &state.config.classifier,
        &mut rng_for(seed, stream::ZSL_CLASSIFIER, 0),
    )?;
    let zsl = evaluate_zsl(&zsl_clf.final_params, &ux, &uy, &state.split.unseen_classes)?;

    let (x, y) = state.training_set(&[&seen_sel, &unseen_sel])?;
    let all_classes: Vec<usize> = state
        .split
        .seen_classes
        .iter()
        .chain(&state.split.unseen_classes)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let gzsl_clf = classifier::train(
        Labeled::new(&x, &y)?,
        None,
        &all_classes,
        &state.config.classifier,
        &mut rng_for(seed, stream::GZSL_CLASSIFIER, 0),
    )?;
    let (tx, ty) = state.dataset.rows(&state.split.test_idx);
    let gzsl = evaluate_gzsl(
        &gzsl_clf.final_params,
        &tx,
        &ty,
        &state.split.seen_classes,
        &state.split.unseen_classes,
    )?;
    Ok(FinalReport {
        zsl,
        gzsl,
        seen_kept: seen_sel.len(),
        seen_pool: seen_pool.len(),
        unseen_kept: unseen_sel.len(),
        unseen_pool: unseen_pool.len(),
        fallback_classes,
        unseen_precision,
        unseen_recall,
        final_q_hat: state.tracker.latest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{make_benchmark, BenchmarkSpec};

    pub(crate) fn smoke_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.benchmark = BenchmarkSpec {
            n_classes: 4,
            samples_per_class: 24,
            feature_dim: 8,
            d_attr: 4,
            intra_class_noise: 1.0,
            inter_class_separation: 3.0,
            seed: 3,
        };
        cfg.selector.layers = 2;
        cfg.selector.heads = 2;
        cfg.selector.d_model = 16;
        cfg.selector.ff_hidden = 32;
        cfg.generator.per_class = 6;
        cfg.training.max_episodes = 4;
        cfg
    }

    fn smoke_state(seed: u64) -> ExperimentState {
        let cfg = smoke_config();
        let ds = make_benchmark(&cfg.benchmark).unwrap();
        ExperimentState::new(cfg, ds, seed).unwrap()
    }

    #[test]
    fn seeds_derive_independently() {
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 2, 0));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 1, 1));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(5, 3, 9), derive_seed(5, 3, 9));
    }

    #[test]
    fn stopping_rule() {
        let mut s = StoppingState::new();
        assert!(s.observe(0.5, 0));
        let mut s = StoppingState::new();
        for q in [0.1, 0.2, 0.3, 0.4] {
            assert!(!s.observe(q, 2));
        }
        assert!(!s.observe(0.4, 2));
        assert!(s.observe(0.35, 2));
    }

    #[test]
    fn precision_recall_counts() {
        let (p, r) = precision_recall(&[true, false, false, true], &[false, true, false, true]);
        assert_eq!((p, r), (Some(0.5), Some(0.5)));
        assert_eq!(precision_recall(&[true, true], &[false, false]), (None, None));
    }

    #[test]
    fn episodes_are_deterministic_and_sequential() {
        let mut a = smoke_state(1);
        let mut b = smoke_state(1);
        run_training(&mut a, 3, 10).unwrap();
        run_training(&mut b, 3, 10).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.logs.iter().map(|l| l.t).collect::<Vec<_>>(), vec![1, 2, 3]);
        for l in &a.logs {
            assert!(l.selected <= l.pool_size);
            assert!((0.0..=1.0).contains(&l.raw_q) && (0.0..=1.0).contains(&l.q_hat));
        }
    }

    #[test]
    fn smoothed_log_matches_recomputation() {
        let mut s = smoke_state(2);
        run_training(&mut s, 4, 10).unwrap();
        let mut prev: Option<f64> = None;
        for l in &s.logs {
            let expect = match prev {
                None => l.raw_q,
                Some(p) => 0.5 * p + 0.5 * l.raw_q,
            };
            assert_eq!(l.q_hat, expect);
            prev = Some(expect);
        }
    }

    #[test]
    fn patience_zero_runs_one_episode() {
        let mut s = smoke_state(3);
        run_training(&mut s, 4, 0).unwrap();
        assert_eq!(s.logs.len(), 1);
    }

    #[test]
    fn all_discard_reward_equals_real_only() {
        let mut s = smoke_state(4);
        s.episode_selection = EpisodeSelection::DiscardAll;
        let log = run_episode(&mut s).unwrap();
        assert_eq!(log.selected, 0);
        assert_eq!(log.raw_q, s.real_only_q().unwrap());
        assert_eq!(log.q_hat, log.raw_q);
    }

    #[test]
    fn keep_all_matches_bypass_bitwise() {
        let mut s = smoke_state(5);
        run_training(&mut s, 2, 10).unwrap();
        let keep = final_evaluation(&s, FinalSelection::KeepAll).unwrap();
        let bypass = final_evaluation(&s, FinalSelection::Bypass).unwrap();
        assert_eq!(keep, bypass);
        assert_eq!(keep.seen_kept, keep.seen_pool);
    }

    #[test]
    fn harmonic_is_consistent_and_random_keeps_requested_counts() {
        let s = smoke_state(6);
        let r = final_evaluation(
            &s,
            FinalSelection::Random {
                seen_keep: 5,
                unseen_keep: 7,
            },
        )
        .unwrap();
        assert_eq!(r.seen_kept, 5);
        assert!(r.unseen_kept >= 7);
        assert_eq!(
            r.gzsl.harmonic,
            crate::gzsl_eval::harmonic_mean(r.gzsl.seen, r.gzsl.unseen).unwrap()
        );
        let oracle = final_evaluation(&s, FinalSelection::Oracle).unwrap();
        assert_eq!(oracle.unseen_precision, Some(1.0));
    }

    #[test]
    fn empty_unseen_selection_falls_back() {
        let s = smoke_state(7);
        let r = final_evaluation(
            &s,
            FinalSelection::Random {
                seen_keep: 0,
                unseen_keep: 0,
            },
        )
        .unwrap();
        assert_eq!(r.fallback_classes, s.split.unseen_classes);
        assert_eq!(r.unseen_kept, r.unseen_pool);
    }
}
