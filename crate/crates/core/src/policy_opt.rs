//! Policy-gradient updates for the selector: the clipped PPO surrogate with
//! an EMA-smoothed validation-accuracy reward, and a REINFORCE baseline.
//!
//! Per policy timestep `t` the raw reward `Q_t` is the best validation
//! accuracy among the classifier's last `reward_window` epochs, and the
//! smoothed reward is `Q̂_1 = Q_1`, `Q̂_t = α·Q̂_{t−1} + (1−α)·Q_t`.
//! Candidate `i` gets advantage `A_i = Q̂_t − V_i` and the surrogate is
//! `mean_i min(γ_i A_i, clip(γ_i, 1−ε, 1+ε) A_i)` with
//! `γ_i = π_new(a_i) / π_old(a_i)` evaluated on the stored actions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grads, Matrix, ParamStore, Tape, Var};
use crate::selector::{CandidatePool, ForwardVars, SelectorParams};

/// Validation-accuracy history and EMA state, indexed by policy timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTracker {
    alpha: f64,
    window: usize,
    /// `history[t-1]` holds the per-epoch validation accuracies of timestep `t`.
    history: Vec<Vec<f64>>,
    raw_q: Vec<f64>,
    ema: Vec<f64>,
}

impl RewardTracker {
    pub fn new(alpha: f64, window: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("ppo.alpha", format!("must lie in [0, 1], got {alpha}")));
        }
        if window == 0 {
            return Err(Error::config("ppo.reward_window", "must be at least 1"));
        }
        Ok(Self {
            alpha,
            window,
            history: Vec::new(),
            raw_q: Vec::new(),
            ema: Vec::new(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Number of timesteps with recorded accuracies.
    pub fn timesteps(&self) -> usize {
        self.history.len()
    }

    /// Stores the classifier's per-epoch validation accuracies for the next
    /// timestep and returns that timestep (1-based).
    pub fn record_epochs(&mut self, accuracies: &[f64]) -> Result<usize> {
        if accuracies.is_empty() {
            return Err(Error::State("no validation accuracies to record".into()));
        }
        if let Some(bad) = accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Numeric(format!("validation accuracy {bad} outside [0, 1]")));
        }
        self.history.push(accuracies.to_vec());
        Ok(self.history.len())
    }

    /// Raw `Q_t`: maximum of the last `min(window, available)` accuracies at `t`.
    pub fn q_value(&self, t: usize) -> Result<f64> {
        let epochs = t
            .checked_sub(1)
            .and_then(|i| self.history.get(i))
            .ok_or_else(|| Error::State(format!("no validation accuracies recorded for timestep {t}")))?;
        let start = epochs.len().saturating_sub(self.window);
        Ok(epochs[start..].iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Smoothed `Q̂_t`, stored for use by timestep `t + 1`.
    pub fn ema_reward(&mut self, t: usize, q_t: f64) -> Result<f64> {
        if t == 0 {
            return Err(Error::State("timesteps start at 1".into()));
        }
        if self.ema.len() != t - 1 {
            return Err(Error::State(format!(
                "smoothed reward for timestep {t} needs exactly {} predecessors, have {}",
                t - 1,
                self.ema.len()
            )));
        }
        let q_hat = match self.ema.last() {
            None => q_t,
            Some(&prev) => self.alpha * prev + (1.0 - self.alpha) * q_t,
        };
        self.raw_q.push(q_t);
        self.ema.push(q_hat);
        Ok(q_hat)
    }

    pub fn raw_q_log(&self) -> &[f64] {
        &self.raw_q
    }

    pub fn ema_log(&self) -> &[f64] {
        &self.ema
    }

    pub fn latest(&self) -> Option<f64> {
        self.ema.last().copied()
    }
}

/// What the selector did on one pool, and the reward it earned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub old_log_probs: Vec<f64>,
    pub actions: Vec<bool>,
    pub values: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.old_log_probs.len() != n || self.actions.len() != n || self.values.len() != n {
            return Err(Error::shape(
                "trajectory",
                (n, 1),
                (self.old_log_probs.len(), self.actions.len().max(self.values.len())),
            ));
        }
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(Error::Numeric(format!("reward {} outside [0, 1]", self.reward)));
        }
        Ok(())
    }

    fn action_columns(&self) -> Vec<usize> {
        self.actions.iter().map(|&a| usize::from(a)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Algorithm {
    Ppo,
    Reinforce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub epsilon: f64,
    pub learning_rate: f64,
    pub update_epochs: usize,
    pub reward_window: usize,
    pub alpha: f64,
    pub value_coef: f64,
    pub optimizer: OptimizerKind,
    pub algorithm: Algorithm,
    /// Start the value head at the real-data-only reward instead of a random init.
    pub warm_baseline: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.15,
            learning_rate: 2e-4,
            update_epochs: 4,
            reward_window: 5,
            alpha: 0.5,
            value_coef: 0.5,
            optimizer: OptimizerKind::adam(),
            algorithm: Algorithm::Ppo,
            warm_baseline: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("ppo.epsilon", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("ppo.learning_rate", "must be positive"));
        }
        if self.update_epochs == 0 {
            return Err(Error::config("ppo.update_epochs", "must be at least 1"));
        }
        if self.reward_window == 0 {
            return Err(Error::config("ppo.reward_window", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("ppo.alpha", "must lie in [0, 1]"));
        }
        if !(self.value_coef >= 0.0) {
            return Err(Error::config("ppo.value_coef", "must be non-negative"));
        }
        Ok(())
    }
}

/// `A_i = q_hat − values_i`.
pub fn advantage(q_hat: f64, values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| q_hat - v).collect()
}

/// `γ_i = exp(new_i − old_i)`.
pub fn prob_ratio(new_log_probs: &[f64], old_log_probs: &[f64]) -> Result<Vec<f64>> {
    if new_log_probs.len() != old_log_probs.len() {
        return Err(Error::shape("prob_ratio", (new_log_probs.len(), 1), (old_log_probs.len(), 1)));
    }
    new_log_probs
        .iter()
        .zip(old_log_probs)
        .map(|(n, o)| {
            let r = (n - o).exp();
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::Numeric(format!("probability ratio overflowed ({n} vs {o})")))
            }
        })
        .collect()
}

/// Negated mean clipped surrogate, `−mean_i min(γ_i A_i, clip(γ_i, 1−ε, 1+ε) A_i)`.
pub fn ppo_loss(ratios: &[f64], advantages: &[f64], epsilon: f64) -> Result<f64> {
    if ratios.len() != advantages.len() || ratios.is_empty() {
        return Err(Error::shape("ppo_loss", (ratios.len(), 1), (advantages.len(), 1)));
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| {
            let unclipped = r * a;
            let clipped = r.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
            if clipped < unclipped {
                clipped
            } else {
                unclipped
            }
        })
        .sum();
    Ok(-total / ratios.len() as f64)
}

/// Tape handles for the pieces of a training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
}

fn value_term(tape: &mut Tape, values: Var, target: f64, coef: f64) -> Result<Var> {
    let n = tape.value(values).rows();
    let diff = tape.add_const(values, &Matrix::filled(n, 1, -target))?;
    let sq = tape.square(diff);
    let mean = tape.mean(sq);
    Ok(tape.scale(mean, coef))
}

/// PPO training objective on the tape: negated clipped surrogate plus
/// `value_coef · mean_i (Q̂ − V_i)²`.
pub fn ppo_objective_on_tape(
    tape: &mut Tape,
    vars: &ForwardVars,
    traj: &Trajectory,
    epsilon: f64,
    value_coef: f64,
) -> Result<LossVars> {
    let n = traj.actions.len();
    let new_lp = tape.gather(vars.log_probs, &traj.action_columns())?;
    let neg_old = Matrix::column_vector(&traj.old_log_probs.iter().map(|v| -v).collect::<Vec<_>>());
    let log_ratio = tape.add_const(new_lp, &neg_old)?;
    let ratio = tape.exp(log_ratio);
    let adv = Matrix::column_vector(&advantage(traj.reward, &traj.values));
    let unclipped = tape.mul_const(ratio, adv.clone())?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
    let clipped = tape.mul_const(clipped_ratio, adv)?;
    let surrogate = tape.min(unclipped, clipped)?;
    let mean = tape.mean(surrogate);
    let policy = tape.scale(mean, -1.0);
    let value = value_term(tape, vars.values, traj.reward, value_coef)?;
    let total = tape.add(policy, value)?;
    debug_assert_eq!(tape.value(new_lp).rows(), n);
    Ok(LossVars { total, policy, value })
}

/// REINFORCE objective: `−mean_i log π(a_i) · (Q̂ − b)` with `b` the mean of
/// the stored values, plus the same value regression as PPO.
pub fn reinforce_objective_on_tape(
    tape: &mut Tape,
    vars: &ForwardVars,
    traj: &Trajectory,
    value_coef: f64,
) -> Result<LossVars> {
    let lp = tape.gather(vars.log_probs, &traj.action_columns())?;
    let baseline = traj.values.iter().sum::<f64>() / traj.values.len() as f64;
    let weighted = tape.scale(lp, traj.reward - baseline);
    let mean = tape.mean(weighted);
    let policy = tape.scale(mean, -1.0);
    let value = value_term(tape, vars.values, traj.reward, value_coef)?;
    let total = tape.add(policy, value)?;
    Ok(LossVars { total, policy, value })
}

/// First-order optimiser state over a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    first: Option<Grads>,
    second: Option<Grads>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: None,
            second: None,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one descent step in place.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric("gradient contains non-finite entries".into()));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for id in store.ids().collect::<Vec<_>>() {
                    store.get_mut(id).axpy(-lr, grads.get(id));
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let m = self.first.get_or_insert_with(|| store.zeros_like());
                let v = self.second.get_or_insert_with(|| store.zeros_like());
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for id in store.ids().collect::<Vec<_>>() {
                    let g = grads.get(id).data();
                    let md = m.get_mut(id).data_mut();
                    let vd = v.get_mut(id).data_mut();
                    let p = store.get_mut(id).data_mut();
                    for k in 0..g.len() {
                        md[k] = beta1 * md[k] + (1.0 - beta1) * g[k];
                        vd[k] = beta2 * vd[k] + (1.0 - beta2) * g[k] * g[k];
                        let mhat = md[k] / bc1;
                        let vhat = vd[k] / bc2;
                        p[k] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Diagnostics from one update call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Objective before the first step.
    pub initial_loss: f64,
    /// Objective before the last step.
    pub final_loss: f64,
}

/// Loss and gradient of the configured objective at the given parameters.
pub fn objective_and_grad(
    params: &SelectorParams,
    store: &ParamStore,
    pool: &CandidatePool,
    traj: &Trajectory,
    cfg: &PpoConfig,
) -> Result<(f64, Grads)> {
    let mut tape = Tape::new(store);
    let vars = params.forward_on_tape(&mut tape, pool, None)?;
    let loss = match cfg.algorithm {
        Algorithm::Ppo => ppo_objective_on_tape(&mut tape, &vars, traj, cfg.epsilon, cfg.value_coef)?,
        Algorithm::Reinforce => reinforce_objective_on_tape(&mut tape, &vars, traj, cfg.value_coef)?,
    };
    let grads = tape.backward(loss.total)?;
    Ok((tape.scalar(loss.total), grads))
}

fn run_updates(
    params: &SelectorParams,
    pool: &CandidatePool,
    traj: &Trajectory,
    cfg: &PpoConfig,
    passes: usize,
    opt: &mut Optimizer,
) -> Result<(SelectorParams, UpdateStats)> {
    traj.validate(pool.len())?;
    let mut store = params.store().clone();
    let mut stats = UpdateStats {
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
    };
    for pass in 0..passes {
        let (loss, grads) = objective_and_grad(params, &store, pool, traj, cfg)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite: {loss}")));
        }
        if pass == 0 {
            stats.initial_loss = loss;
        }
        stats.final_loss = loss;
        opt.step(&mut store, &grads, cfg.learning_rate)?;
    }
    Ok((params.with_store(store)?, stats))
}

/// `update_epochs` passes of: forward on the pool, clipped-surrogate loss on
/// the stored actions, one optimiser step.
pub fn ppo_update(
    params: &SelectorParams,
    pool: &CandidatePool,
    traj: &Trajectory,
    cfg: &PpoConfig,
    opt: &mut Optimizer,
) -> Result<(SelectorParams, UpdateStats)> {
    let cfg = PpoConfig {
        algorithm: Algorithm::Ppo,
        ..*cfg
    };
    run_updates(params, pool, traj, &cfg, cfg.update_epochs, opt)
}

/// A single REINFORCE step at `cfg.learning_rate`.
pub fn reinforce_update(
    params: &SelectorParams,
    pool: &CandidatePool,
    traj: &Trajectory,
    cfg: &PpoConfig,
    opt: &mut Optimizer,
) -> Result<(SelectorParams, UpdateStats)> {
    let cfg = PpoConfig {
        algorithm: Algorithm::Reinforce,
        ..*cfg
    };
    run_updates(params, pool, traj, &cfg, 1, opt)
}

/// Dispatches on `cfg.algorithm`.
pub fn policy_update(
    params: &SelectorParams,
    pool: &CandidatePool,
    traj: &Trajectory,
    cfg: &PpoConfig,
    opt: &mut Optimizer,
) -> Result<(SelectorParams, UpdateStats)> {
    match cfg.algorithm {
        Algorithm::Ppo => ppo_update(params, pool, traj, cfg, opt),
        Algorithm::Reinforce => reinforce_update(params, pool, traj, cfg, opt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::selector::{sample_actions, SelectorConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SelectorConfig {
        SelectorConfig {
            feature_dim: 3,
            cond_dim: 2,
            d_model: 8,
            layers: 2,
            heads: 2,
            ff_hidden: 8,
            ff_depth: 2,
        }
    }

    fn fixture(seed: u64) -> (SelectorParams, CandidatePool, Trajectory) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SelectorParams::init(tiny(), &mut rng).unwrap();
        let n = 4;
        let pool = CandidatePool::new(
            Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0)),
            Matrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0)),
            vec![0, 1, 0, 1],
            vec![2, 0, 3, 1],
            vec![false; n],
        )
        .unwrap();
        let out = params.forward(&pool).unwrap();
        let acts = sample_actions(&out.action_probs, &out.values, &mut rng).unwrap();
        let traj = Trajectory {
            old_log_probs: acts.log_probs,
            actions: acts.actions,
            values: acts.values,
            reward: 0.7,
        };
        (params, pool, traj)
    }

    #[test]
    fn q_value_examples() {
        let mut t = RewardTracker::new(0.5, 5).unwrap();
        t.record_epochs(&[0.6]).unwrap();
        assert_eq!(t.q_value(1).unwrap(), 0.6);
        t.record_epochs(&[0.5, 0.7, 0.6, 0.4, 0.65, 0.62]).unwrap();
        // last five are [0.7, 0.6, 0.4, 0.65, 0.62]
        assert_eq!(t.q_value(2).unwrap(), 0.7);
        t.record_epochs(&[0.8; 9]).unwrap();
        assert_eq!(t.q_value(3).unwrap(), 0.8);
        assert!(matches!(t.q_value(4), Err(Error::State(_))));
        assert!(matches!(
            RewardTracker::new(0.5, 5).unwrap().q_value(1),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn window_excludes_older_epochs() {
        let mut t = RewardTracker::new(0.5, 5).unwrap();
        t.record_epochs(&[0.9, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(t.q_value(1).unwrap(), 0.5);
    }

    #[test]
    fn ema_examples() {
        let mut t = RewardTracker::new(0.5, 5).unwrap();
        assert_eq!(t.ema_reward(1, 0.8).unwrap(), 0.8);
        assert_abs_diff_eq!(t.ema_reward(2, 0.6).unwrap(), 0.7, epsilon = 1e-15);
        assert!(matches!(t.ema_reward(4, 0.6), Err(Error::State(_))));
        let mut c = RewardTracker::new(0.5, 5).unwrap();
        for step in 1..=20 {
            assert_eq!(c.ema_reward(step, 0.37).unwrap(), 0.37);
        }
        assert!(RewardTracker::new(1.5, 5).is_err());
    }

    #[test]
    fn advantage_and_ratio_examples() {
        assert_eq!(advantage(0.4, &[0.4, 0.4]), vec![0.0, 0.0]);
        assert_abs_diff_eq!(advantage(0.7, &[0.5])[0], 0.2, epsilon = 1e-15);
        let values = [0.1, -0.3, 0.9, 0.55];
        let v = advantage(0.6, &values);
        for (i, &val) in values.iter().enumerate() {
            assert_eq!(v[i], 0.6 - val);
        }
        let old = [-0.3, -1.2, -0.01];
        assert_eq!(prob_ratio(&old, &old).unwrap(), vec![1.0; 3]);
        let new: Vec<f64> = old.iter().map(|o| o + 2f64.ln()).collect();
        for r in prob_ratio(&new, &old).unwrap() {
            assert_abs_diff_eq!(r, 2.0, epsilon = 1e-12);
        }
        assert!(matches!(prob_ratio(&[1000.0], &[-1000.0]), Err(Error::Numeric(_))));
        assert!(prob_ratio(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn ppo_loss_examples() {
        let adv = [0.3, -0.2, 0.5];
        assert_abs_diff_eq!(ppo_loss(&[1.0; 3], &adv, 0.15).unwrap(), -0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(ppo_loss(&[1.3], &[1.0], 0.15).unwrap(), -1.15, epsilon = 1e-15);
        assert_abs_diff_eq!(ppo_loss(&[0.5], &[-1.0], 0.15).unwrap(), 0.85, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn ema_stays_within_observed_range(qs in prop::collection::vec(0.0f64..=1.0, 1..40), alpha in 0.0f64..=1.0) {
            let mut t = RewardTracker::new(alpha, 5).unwrap();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (i, &q) in qs.iter().enumerate() {
                lo = lo.min(q);
                hi = hi.max(q);
                let v = t.ema_reward(i + 1, q).unwrap();
                prop_assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn surrogate_terms_match_branch_oracle() {
        for gi in 0..=10 {
            let g = 0.5 + gi as f64 * 0.1;
            for a in [-1.0, 0.0, 1.0] {
                for eps in [0.15, 0.3] {
                    let clip = if g < 1.0 - eps { 1.0 - eps } else if g > 1.0 + eps { 1.0 + eps } else { g };
                    let want = -f64::min(g * a, clip * a);
                    assert_eq!(ppo_loss(&[g], &[a], eps).unwrap(), want);
                }
            }
        }
    }

    #[test]
    fn tape_objective_matches_scalar_loss() {
        let (params, pool, mut traj) = fixture(21);
        traj.old_log_probs = traj.old_log_probs.iter().enumerate().map(|(i, l)| l + 0.1 * i as f64 - 0.12).collect();
        let cfg = PpoConfig::default();
        let mut tape = Tape::new(params.store());
        let vars = params.forward_on_tape(&mut tape, &pool, None).unwrap();
        let loss = ppo_objective_on_tape(&mut tape, &vars, &traj, cfg.epsilon, cfg.value_coef).unwrap();
        let new_lp: Vec<f64> = (0..pool.len())
            .map(|i| tape.value(vars.log_probs).get(i, usize::from(traj.actions[i])))
            .collect();
        let ratios = prob_ratio(&new_lp, &traj.old_log_probs).unwrap();
        let want = ppo_loss(&ratios, &advantage(traj.reward, &traj.values), cfg.epsilon).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss.policy), want, epsilon = 1e-14);
    }

    fn check_gradient(cfg: PpoConfig, seed: u64) {
        let (params, pool, mut traj) = fixture(seed);
        traj.old_log_probs = traj.old_log_probs.iter().enumerate().map(|(i, l)| l + 0.07 * i as f64 - 0.1).collect();
        let err = grad_check(params.store(), 1e-4, |s| objective_and_grad(&params, s, &pool, &traj, &cfg)).unwrap();
        assert!(err < 1e-4, "{:?}: relative error {err}", cfg.algorithm);
    }

    #[test]
    fn ppo_gradient_matches_finite_differences() {
        check_gradient(PpoConfig::default(), 31);
    }

    #[test]
    fn reinforce_gradient_matches_finite_differences() {
        check_gradient(PpoConfig { algorithm: Algorithm::Reinforce, ..PpoConfig::default() }, 32);
    }

    /// Zeroes the value head and sets its bias so every V_i equals `target`.
    fn pin_values(params: &SelectorParams, target: f64) -> SelectorParams {
        let mut p = params.clone();
        let (w, b) = p.value_head();
        *p.store_mut().get_mut(w) = Matrix::zeros(8, 1);
        *p.store_mut().get_mut(b) = Matrix::filled(1, 1, target);
        p
    }

    #[test]
    fn zero_advantage_leaves_params_unchanged() {
        let (params, pool, mut traj) = fixture(41);
        let params = pin_values(&params, 0.7);
        traj.values = vec![0.7; pool.len()];
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let cfg = PpoConfig { optimizer: kind, learning_rate: 0.5, ..PpoConfig::default() };
            let mut opt = Optimizer::new(kind);
            let (next, _) = ppo_update(&params, &pool, &traj, &cfg, &mut opt).unwrap();
            for (id, p) in params.store().iter() {
                for (a, b) in p.value.data().iter().zip(next.store().get(id).data()) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
            let mut opt = Optimizer::new(kind);
            let (next, _) = reinforce_update(&params, &pool, &traj, &cfg, &mut opt).unwrap();
            assert_eq!(next, params);
        }
    }

    #[test]
    fn reward_at_baseline_gives_zero_gradient() {
        let (params, pool, mut traj) = fixture(42);
        let params = pin_values(&params, 0.55);
        traj.values = vec![0.4, 0.7, 0.5, 0.6];
        traj.reward = 0.55;
        let cfg = PpoConfig { algorithm: Algorithm::Reinforce, ..PpoConfig::default() };
        let (_, grads) = objective_and_grad(&params, params.store(), &pool, &traj, &cfg).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn one_step_decreases_loss() {
        let (params, pool, traj) = fixture(43);
        let cfg = PpoConfig { optimizer: OptimizerKind::Sgd, learning_rate: 1e-2, update_epochs: 1, ..PpoConfig::default() };
        let mut opt = Optimizer::new(cfg.optimizer);
        let (next, stats) = ppo_update(&params, &pool, &traj, &cfg, &mut opt).unwrap();
        let (after, _) = objective_and_grad(&next, next.store(), &pool, &traj, &cfg).unwrap();
        assert!(after < stats.initial_loss, "{after} !< {}", stats.initial_loss);
    }

    #[test]
    fn clipped_branch_has_zero_ratio_gradient() {
        let (params, pool, mut traj) = fixture(44);
        // Positive advantages with every ratio above 1 + ε: min picks the
        // constant clipped branch, so only the value term carries gradient.
        let params = pin_values(&params, 0.9);
        traj.reward = 0.9;
        traj.values = vec![0.2; pool.len()];
        traj.old_log_probs = traj.old_log_probs.iter().map(|l| l - 0.5).collect();
        for eps in [0.0, 0.15] {
            let mut tape = Tape::new(params.store());
            let vars = params.forward_on_tape(&mut tape, &pool, None).unwrap();
            let loss = ppo_objective_on_tape(&mut tape, &vars, &traj, eps, 0.5).unwrap();
            let g = tape.backward(loss.policy).unwrap();
            assert_eq!(g.max_abs(), 0.0, "eps {eps}");
        }
        // Below 1 − ε with negative advantages: again clipped and constant.
        traj.reward = 0.1;
        traj.values = vec![0.6; pool.len()];
        traj.old_log_probs = traj.old_log_probs.iter().map(|l| l + 1.0).collect();
        let mut tape = Tape::new(params.store());
        let vars = params.forward_on_tape(&mut tape, &pool, None).unwrap();
        let loss = ppo_objective_on_tape(&mut tape, &vars, &traj, 0.15, 0.5).unwrap();
        assert_eq!(tape.backward(loss.policy).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn updates_are_deterministic() {
        let (params, pool, traj) = fixture(45);
        let cfg = PpoConfig::default();
        let run = |f: fn(&SelectorParams, &CandidatePool, &Trajectory, &PpoConfig, &mut Optimizer) -> Result<(SelectorParams, UpdateStats)>| {
            let mut opt = Optimizer::new(cfg.optimizer);
            f(&params, &pool, &traj, &cfg, &mut opt).unwrap().0
        };
        assert_eq!(run(ppo_update), run(ppo_update));
        assert_eq!(run(reinforce_update), run(reinforce_update));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = ParamStore::new();
        let id = store.register("w", Matrix::zeros(1, 1));
        let mut grads = store.zeros_like();
        grads.get_mut(id).data_mut()[0] = f64::NAN;
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        assert!(matches!(opt.step(&mut store, &grads, 0.1), Err(Error::Numeric(_))));
    }
}
