//! Learned learning-rate control: observation features, REINFORCE training
//! of the recurrent policy across fine-tuning runs, and frozen application.

use crate::error::{Error, Result};
use crate::nets::{ActionMode, ActionVector, DualHeadModel, PolicyNetwork, DEFAULT_ACTIONS, DEFAULT_HIDDEN};
use crate::rng;
use crate::tensor::{global_norm, no_grad, Tensor};
use crate::training::{fine_tune, fine_tune_with, Controller, FineTuneConfig, RunRecord, StepSignals, TaskData};
use crate::coord_sgd::OptState;

/// Observation length for `coordinates` scale entries.
pub fn observation_dim(coordinates: usize) -> usize {
    5 + coordinates
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2OConfig {
    /// Rewards per policy update (U).
    pub unroll: usize,
    pub policy_lr: f32,
    pub policy_epochs: usize,
    /// Global-norm gradient clip.
    pub clip_norm: f64,
    /// Subtract a moving average of past rewards.
    pub baseline: bool,
    pub baseline_decay: f64,
    /// Standardize the loss entries of the observation.
    pub normalize_obs: bool,
    pub hidden: usize,
    pub categories: usize,
    pub seed: u64,
}

impl Default for L2OConfig {
    fn default() -> Self {
        L2OConfig {
            unroll: 5,
            policy_lr: 0.5,
            policy_epochs: 50,
            clip_norm: 5.0,
            baseline: false,
            baseline_decay: 0.9,
            normalize_obs: true,
            hidden: DEFAULT_HIDDEN,
            categories: DEFAULT_ACTIONS,
            seed: 0,
        }
    }
}

impl L2OConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unroll == 0 || self.policy_epochs == 0 || self.hidden == 0 {
            return Err(Error::arg("unroll, policy_epochs and hidden must be at least 1"));
        }
        if !(self.policy_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::arg("policy_lr and clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::arg("baseline_decay must lie in [0, 1)"));
        }
        if self.categories < 2 {
            return Err(Error::arg("policy needs at least two action categories"));
        }
        Ok(())
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub const EPS: f64 = 1e-8;

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean) / (self.variance().sqrt() + Self::EPS)
    }
}

/// Builds `[xe, kl, t/T, head mean, head std, a_{t−1}…]`.
#[derive(Debug, Clone)]
pub struct ObservationBuilder {
    pub normalize: bool,
    xe: Welford,
    kl: Welford,
    prev_scales: Vec<f32>,
}

impl ObservationBuilder {
    /// The "previous action" before the first step is all ones.
    pub fn new(coordinates: usize, normalize: bool) -> Self {
        ObservationBuilder {
            normalize,
            xe: Welford::default(),
            kl: Welford::default(),
            prev_scales: vec![1.0; coordinates],
        }
    }

    pub fn build(&mut self, s: &StepSignals) -> Vec<f32> {
        let (xe, kl) = if self.normalize {
            self.xe.push(s.xe);
            self.kl.push(s.kl);
            (self.xe.standardize(s.xe), self.kl.standardize(s.kl))
        } else {
            (s.xe, s.kl)
        };
        let mut v = vec![xe as f32, kl as f32, s.progress as f32, s.head_mean as f32, s.head_std as f32];
        v.extend_from_slice(&self.prev_scales);
        v
    }

    pub fn record_action(&mut self, action: &ActionVector) {
        self.prev_scales = action.scales();
    }
}

/// `r_t = L_{t−1} − L_t`.
pub fn compute_reward(prev_loss: f64, loss: f64) -> Result<f64> {
    if !prev_loss.is_finite() || !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "compute_reward",
            what: format!("losses {prev_loss} and {loss}"),
        });
    }
    Ok(prev_loss - loss)
}

/// Log-probabilities and rewards gathered since the last policy update.
#[derive(Default)]
pub struct RolloutStorage {
    pub log_probs: Vec<Tensor>,
    pub rewards: Vec<f64>,
}

impl RolloutStorage {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn clear(&mut self) {
        self.log_probs.clear();
        self.rewards.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_reward: f64,
}

/// One REINFORCE step on `L_π = −(1/U) Σ (r − b) log π(a)`, plain gradient
/// descent with global-norm clipping. Flushes the storage and cuts the
/// recurrent state from the graph.
pub fn reinforce_update(
    policy: &mut PolicyNetwork,
    storage: &mut RolloutStorage,
    cfg: &L2OConfig,
    baseline: &mut Option<f64>,
) -> Result<UpdateStats> {
    if storage.log_probs.len() != cfg.unroll || storage.rewards.len() != cfg.unroll {
        return Err(Error::Training(format!(
            "rollout has {} log-probs and {} rewards, expected exactly {}",
            storage.log_probs.len(),
            storage.rewards.len(),
            cfg.unroll
        )));
    }
    let u = storage.len() as f32;
    let b = if cfg.baseline { baseline.unwrap_or(0.0) } else { 0.0 };
    let mut loss: Option<Tensor> = None;
    for (lp, &r) in storage.log_probs.iter().zip(&storage.rewards) {
        let term = lp.scalar_mul(-((r - b) as f32) / u)?;
        loss = Some(match loss {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let loss = loss.expect("non-empty storage");
    let params = policy.parameters();
    for (_, p) in &params {
        p.zero_grad();
    }
    let loss_value = loss.item() as f64;
    loss.backward()?;
    let grads: Vec<Vec<f32>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let norm = global_norm(grads.iter().map(|g| g.as_slice()));
    let clip = if norm > cfg.clip_norm { (cfg.clip_norm / norm) as f32 } else { 1.0 };
    for ((_, p), g) in params.iter().zip(&grads) {
        p.update_values(|v| {
            for (v, g) in v.iter_mut().zip(g) {
                *v -= cfg.policy_lr * clip * g;
            }
        });
    }
    let mean_reward = storage.rewards.iter().sum::<f64>() / storage.len() as f64;
    if cfg.baseline {
        *baseline = Some(match *baseline {
            None => mean_reward,
            Some(prev) => cfg.baseline_decay * prev + (1.0 - cfg.baseline_decay) * mean_reward,
        });
    }
    storage.clear();
    policy.detach_state();
    Ok(UpdateStats {
        loss: loss_value,
        grad_norm: norm,
        mean_reward,
    })
}

/// Drives fine-tuning with a policy network, optionally learning from the
/// rewards as they arrive.
pub struct PolicyController<'a> {
    policy: &'a mut PolicyNetwork,
    obs: ObservationBuilder,
    mode: ActionMode,
    rng: rng::Rng,
    learner: Option<Learner<'a>>,
}

struct Learner<'a> {
    cfg: &'a L2OConfig,
    storage: RolloutStorage,
    baseline: Option<f64>,
    updates: Vec<UpdateStats>,
}

impl<'a> PolicyController<'a> {
    /// Frozen policy: no graph is recorded and weights never change.
    pub fn frozen(policy: &'a mut PolicyNetwork, mode: ActionMode, normalize_obs: bool, seed: u64) -> Self {
        let coords = policy.coordinates();
        policy.reset_state();
        PolicyController {
            policy,
            obs: ObservationBuilder::new(coords, normalize_obs),
            mode,
            rng: rng::stream(seed, "policy-actions", 0),
            learner: None,
        }
    }

    /// Sampling policy updated every `cfg.unroll` rewards.
    pub fn learning(policy: &'a mut PolicyNetwork, cfg: &'a L2OConfig, seed: u64, baseline: Option<f64>) -> Self {
        let coords = policy.coordinates();
        policy.reset_state();
        PolicyController {
            policy,
            obs: ObservationBuilder::new(coords, cfg.normalize_obs),
            mode: ActionMode::Sampled,
            rng: rng::stream(seed, "policy-actions", 0),
            learner: Some(Learner {
                cfg,
                storage: RolloutStorage::default(),
                baseline,
                updates: Vec::new(),
            }),
        }
    }

    pub fn updates(&self) -> &[UpdateStats] {
        self.learner.as_ref().map(|l| l.updates.as_slice()).unwrap_or(&[])
    }

    pub fn baseline(&self) -> Option<f64> {
        self.learner.as_ref().and_then(|l| l.baseline)
    }
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, signals: &StepSignals) -> Result<ActionVector> {
        let obs = self.obs.build(signals);
        let step = match self.learner {
            Some(ref mut l) => {
                let step = self.policy.step(&obs, self.mode, &mut self.rng)?;
                l.storage.log_probs.push(step.log_prob.clone());
                step
            }
            None => no_grad(|| self.policy.step(&obs, self.mode, &mut self.rng))?,
        };
        self.obs.record_action(&step.action);
        Ok(step.action)
    }

    fn reward(&mut self, r: f64) -> Result<()> {
        let Some(l) = self.learner.as_mut() else {
            return Ok(());
        };
        l.storage.rewards.push(r);
        if l.storage.len() == l.cfg.unroll {
            let stats = reinforce_update(self.policy, &mut l.storage, l.cfg, &mut l.baseline)?;
            l.updates.push(stats);
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(l) = self.learner.as_mut() {
            // a partial window never produces an update
            l.storage.clear();
            self.policy.detach_state();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEpochLog {
    pub epoch: usize,
    pub updates: usize,
    pub mean_reward: f64,
    pub final_target: f64,
}

pub fn new_policy(cfg: &L2OConfig, coordinates: usize) -> Result<PolicyNetwork> {
    PolicyNetwork::new(
        observation_dim(coordinates),
        coordinates,
        cfg.hidden,
        cfg.categories,
        rng::derive_seed(cfg.seed, "policy-init", 0),
    )
}

/// Train `policy` over `cfg.policy_epochs` fine-tuning runs, each on a fresh
/// model from `factory(epoch)`. Every run of T steps yields ⌊T/U⌋ updates.
pub fn train_policy(
    policy: &mut PolicyNetwork,
    cfg: &L2OConfig,
    ft: &FineTuneConfig,
    data: &TaskData,
    mut factory: impl FnMut(usize) -> Result<DualHeadModel>,
) -> Result<Vec<PolicyEpochLog>> {
    cfg.validate()?;
    let total = ft.total_steps(data.train.len());
    if total < cfg.unroll {
        return Err(Error::arg(format!("run has {total} steps, fewer than the unroll length {}", cfg.unroll)));
    }
    let mut logs = Vec::with_capacity(cfg.policy_epochs);
    let mut baseline = None;
    for epoch in 0..cfg.policy_epochs {
        let model = factory(epoch)?;
        let coords = model.coordinate_map().len();
        if policy.coordinates() != coords || policy.obs_dim != observation_dim(coords) {
            return Err(Error::arg(format!(
                "policy controls {} coordinates, model has {coords}",
                policy.coordinates()
            )));
        }
        let run_cfg = FineTuneConfig {
            seed: rng::derive_seed(ft.seed, "policy-epoch", epoch as u64),
            ..ft.clone()
        };
        let action_seed = rng::derive_seed(cfg.seed, "policy-epoch-actions", epoch as u64);
        let mut ctl = PolicyController::learning(policy, cfg, action_seed, baseline);
        let (rec, _) = fine_tune(&model, data, &run_cfg, &mut ctl)?;
        let updates = ctl.updates().len();
        baseline = ctl.baseline();
        logs.push(PolicyEpochLog {
            epoch,
            updates,
            mean_reward: rec.rewards.iter().sum::<f64>() / rec.rewards.len() as f64,
            final_target: rec.final_target(),
        });
    }
    Ok(logs)
}

/// Fine-tune with a frozen policy choosing every action.
pub fn apply_policy(
    policy: &mut PolicyNetwork,
    mode: ActionMode,
    model: &DualHeadModel,
    data: &TaskData,
    ft: &FineTuneConfig,
    cfg: &L2OConfig,
    seed: u64,
) -> Result<(RunRecord, OptState)> {
    apply_policy_with(policy, mode, model, data, ft, cfg, seed, &mut |_| Ok(()))
}

/// [`apply_policy`] with a per-epoch hook, as in [`fine_tune_with`].
#[allow(clippy::too_many_arguments)]
pub fn apply_policy_with(
    policy: &mut PolicyNetwork,
    mode: ActionMode,
    model: &DualHeadModel,
    data: &TaskData,
    ft: &FineTuneConfig,
    cfg: &L2OConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<(RunRecord, OptState)> {
    let coords = model.coordinate_map().len();
    if policy.coordinates() != coords || policy.obs_dim != observation_dim(coords) {
        return Err(Error::arg(format!(
            "policy controls {} coordinates, model has {coords}",
            policy.coordinates()
        )));
    }
    let before = policy.digest();
    let mut ctl = PolicyController::frozen(policy, mode, cfg.normalize_obs, seed);
    let out = fine_tune_with(model, data, ft, &mut ctl, on_epoch)?;
    debug_assert_eq!(before, policy.digest());
    Ok(out)
}

/// Two-armed bandit with deterministic rewards 1 (arm 1) and 0 (arm 0).
/// Returns p(arm 1) after each of `updates` policy updates.
pub fn bandit_trajectory(cfg: &L2OConfig, updates: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut policy = PolicyNetwork::new(1, 1, cfg.hidden, 2, rng::derive_seed(cfg.seed, "bandit-policy", 0))?;
    let mut r = rng::stream(cfg.seed, "bandit", 0);
    let mut storage = RolloutStorage::default();
    let mut baseline = None;
    let mut out = Vec::with_capacity(updates);
    let obs = [1.0f32];
    for _ in 0..updates {
        for _ in 0..cfg.unroll {
            let step = policy.step(&obs, ActionMode::Sampled, &mut r)?;
            storage.log_probs.push(step.log_prob);
            storage.rewards.push(if step.action.indices[0] == 1 { 1.0 } else { 0.0 });
        }
        reinforce_update(&mut policy, &mut storage, cfg, &mut baseline)?;
        let probe = no_grad(|| {
            let mut p = policy.clone();
            p.step(&obs, ActionMode::Greedy, &mut r).map(|s| s.probs[0][1] as f64)
        })?;
        out.push(probe);
    }
    Ok(out)
}
