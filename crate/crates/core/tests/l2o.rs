use asg_core::benchmark::{generate, generate_range, DomainKind, DomainSpec};
use asg_core::l2o::{
    apply_policy, compute_reward, new_policy, observation_dim, reinforce_update, train_policy, L2OConfig,
    ObservationBuilder, RolloutStorage,
};
use asg_core::nets::{ActionMode, ActionVector, DualHeadModel, PolicyNetwork};
use asg_core::rng;
use asg_core::training::{fine_tune, Controller, FineTuneConfig, StepSignals, TaskData};
use asg_core::Tensor;

fn data(train: usize) -> TaskData {
    TaskData {
        train: generate(&DomainSpec::new(DomainKind::SyntheticSource, 4), train).unwrap(),
        target_val: generate(&DomainSpec::new(DomainKind::RealTarget, 4), 8).unwrap(),
        base_val: generate_range(&DomainSpec::new(DomainKind::Base, 4), 500, 508).unwrap(),
    }
}

fn ft(epochs: usize, batch: usize) -> FineTuneConfig {
    let mut c = FineTuneConfig { epochs, batch_size: batch, ..Default::default() };
    c.sgd.eta_base = 0.01;
    c
}

fn snapshot(m: &DualHeadModel) -> Vec<Vec<u32>> {
    m.named_tensors().iter().map(|(_, t)| t.to_vec().iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn reinforce_objective_value() {
    let cfg = L2OConfig { unroll: 1, ..Default::default() };
    let mut policy = new_policy(&cfg, 1).unwrap();
    let before = policy.digest();
    let mut storage = RolloutStorage {
        log_probs: vec![Tensor::param(&[1], vec![-2.0]).unwrap().sum().unwrap()],
        rewards: vec![1.0],
    };
    let stats = reinforce_update(&mut policy, &mut storage, &cfg, &mut None).unwrap();
    // −(1/U)·r·log π = −1·(−2)
    assert!((stats.loss - 2.0).abs() < 1e-9);
    assert!(storage.is_empty());
    // the log-prob was not produced by the policy, so nothing moves
    assert_eq!(policy.digest(), before);
}

#[test]
fn zero_rewards_leave_policy_unchanged() {
    let cfg = L2OConfig { unroll: 3, ..Default::default() };
    let mut policy = new_policy(&cfg, 2).unwrap();
    let before = policy.digest();
    let mut r = rng::stream(1, "test", 0);
    let mut storage = RolloutStorage::default();
    for _ in 0..3 {
        let s = policy.step(&[0.5; 7], ActionMode::Sampled, &mut r).unwrap();
        storage.log_probs.push(s.log_prob);
        storage.rewards.push(0.0);
    }
    reinforce_update(&mut policy, &mut storage, &cfg, &mut None).unwrap();
    assert_eq!(policy.digest(), before);
}

/// Σ_i r_i Σ_c log p_c(a_ic) recomputed from detached probabilities.
fn weighted_log_lik(policy: &PolicyNetwork, obs: &[Vec<f32>], actions: &[Vec<usize>], rewards: &[f64]) -> f64 {
    let mut p = policy.clone();
    p.reset_state();
    let mut r = rng::stream(0, "unused", 0);
    let mut total = 0.0;
    for ((o, a), rw) in obs.iter().zip(actions).zip(rewards) {
        let s = p.step(o, ActionMode::Greedy, &mut r).unwrap();
        let lp: f64 = a.iter().enumerate().map(|(c, &i)| (s.probs[c][i] as f64).ln()).sum();
        total += rw * lp;
    }
    total
}

#[test]
fn reinforce_gradient_matches_finite_differences() {
    let cfg = L2OConfig { unroll: 4, hidden: 6, clip_norm: 1e9, policy_lr: 1e-3, ..Default::default() };
    let mut policy = PolicyNetwork::new(3, 2, 6, 4, 9).unwrap();
    // non-zero heads so every parameter has a gradient
    for (w, b) in &policy.heads {
        let n = w.numel();
        w.set_values(&rng::normal_vec(&mut rng::stream(2, "head", 0), n, 0.5)).unwrap();
        b.set_values(&[0.1, -0.2, 0.3, 0.0]).unwrap();
    }
    let obs: Vec<Vec<f32>> = (0..4).map(|i| vec![0.3 * i as f32, -0.5, 1.0 - 0.2 * i as f32]).collect();
    let rewards = vec![0.7, -0.4, 1.1, 0.2];
    let reference = policy.clone();
    let mut r = rng::stream(5, "fd", 0);
    let mut storage = RolloutStorage::default();
    let mut actions = Vec::new();
    policy.reset_state();
    for (o, &rw) in obs.iter().zip(&rewards) {
        let s = policy.step(o, ActionMode::Sampled, &mut r).unwrap();
        actions.push(s.action.indices.clone());
        storage.log_probs.push(s.log_prob);
        storage.rewards.push(rw);
    }
    reinforce_update(&mut policy, &mut storage, &cfg, &mut None).unwrap();
    let u = rewards.len() as f64;
    let h = 1e-2f32;
    let mut checked = 0;
    for ((name, p), (_, live)) in reference.parameters().iter().zip(policy.parameters()) {
        let grad = live.grad().unwrap();
        let base = p.to_vec();
        for i in (0..base.len()).step_by(7) {
            let eval = |delta: f32| {
                let mut v = base.clone();
                v[i] += delta;
                p.set_values(&v).unwrap();
                -weighted_log_lik(&reference, &obs, &actions, &rewards) / u
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
            p.set_values(&base).unwrap();
            let g = grad[i] as f64;
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-2);
            assert!(err < 1e-3, "{name}[{i}]: analytic {g} vs numeric {fd}");
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn rollout_length_must_equal_unroll() {
    let cfg = L2OConfig { unroll: 5, ..Default::default() };
    let mut policy = new_policy(&cfg, 1).unwrap();
    let mut storage = RolloutStorage::default();
    let mut r = rng::stream(0, "t", 0);
    for _ in 0..4 {
        let s = policy.step(&[0.0; 6], ActionMode::Sampled, &mut r).unwrap();
        storage.log_probs.push(s.log_prob);
        storage.rewards.push(1.0);
    }
    assert!(reinforce_update(&mut policy, &mut storage, &cfg, &mut None).is_err());
}

#[test]
fn rewards_must_be_finite() {
    assert_eq!(compute_reward(2.5, 2.0).unwrap(), 0.5);
    assert!(compute_reward(f64::NAN, 1.0).is_err());
    assert!(compute_reward(1.0, f64::INFINITY).is_err());
}

#[test]
fn updates_per_run_is_floor_of_steps_over_unroll() {
    let d = data(20);
    for (batch, want) in [(2, 2), (3, 1)] {
        // 20/2 = 10 steps → 2 updates; ⌈20/3⌉ = 7 steps → 1 update
        let cfg = L2OConfig { unroll: 5, policy_epochs: 1, ..Default::default() };
        let probe = DualHeadModel::build("toy_cnn", 1).unwrap();
        let mut policy = new_policy(&cfg, probe.coordinate_map().len()).unwrap();
        let logs = train_policy(&mut policy, &cfg, &ft(1, batch), &d, |e| DualHeadModel::build("toy_cnn", e as u64)).unwrap();
        assert_eq!(logs[0].updates, want);
    }
}

#[test]
fn too_short_runs_are_rejected() {
    let cfg = L2OConfig { unroll: 5, policy_epochs: 1, ..Default::default() };
    let mut policy = new_policy(&cfg, 5).unwrap();
    let err = train_policy(&mut policy, &cfg, &ft(1, 4), &data(8), |_| DualHeadModel::build("toy_cnn", 0));
    assert!(err.is_err());
}

#[test]
fn policy_fixed_on_zero_scale_freezes_the_model() {
    let d = data(12);
    let model = DualHeadModel::build("toy_cnn", 2).unwrap();
    let coords = model.coordinate_map().len();
    let cfg = L2OConfig::default();
    let mut policy = new_policy(&cfg, coords).unwrap();
    for (_, b) in &policy.heads {
        let mut v = vec![0.0; cfg.categories];
        v[0] = 100.0;
        b.set_values(&v).unwrap();
    }
    let before = snapshot(&model);
    let (rec, _) = apply_policy(&mut policy, ActionMode::Sampled, &model, &d, &ft(2, 4), &cfg, 3).unwrap();
    assert!(rec.steps.iter().all(|s| s.action.indices.iter().all(|&i| i == 0)));
    assert_eq!(snapshot(&model), before);
}

#[test]
fn greedy_application_is_deterministic_and_leaves_policy_intact() {
    let d = data(12);
    let cfg = L2OConfig { seed: 4, ..Default::default() };
    let run = || {
        let model = DualHeadModel::build("toy_cnn", 2).unwrap();
        let mut policy = new_policy(&cfg, model.coordinate_map().len()).unwrap();
        let before = policy.digest();
        let (rec, _) = apply_policy(&mut policy, ActionMode::Greedy, &model, &d, &ft(2, 4), &cfg, 3).unwrap();
        assert_eq!(policy.digest(), before);
        (rec.losses, rec.steps.iter().map(|s| s.action.indices.clone()).collect::<Vec<_>>())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.1.iter().flatten().all(|&i| i <= 10));
}

#[test]
fn policy_must_match_model_coordinates() {
    let model = DualHeadModel::build("toy_cnn", 2).unwrap();
    let cfg = L2OConfig::default();
    let mut policy = new_policy(&cfg, model.coordinate_map().len() + 1).unwrap();
    assert!(apply_policy(&mut policy, ActionMode::Greedy, &model, &data(4), &ft(1, 4), &cfg, 0).is_err());
}

struct Recorder(Vec<StepSignals>);

impl Controller for Recorder {
    fn act(&mut self, s: &StepSignals) -> asg_core::Result<ActionVector> {
        self.0.push(s.clone());
        ActionVector::new(vec![10; 5], 11)
    }
}

#[test]
fn observation_reports_head_statistics_and_progress() {
    let model = DualHeadModel::build("toy_cnn", 2).unwrap();
    for t in model.new_head_tensors() {
        t.set_values(&vec![0.3; t.numel()]).unwrap();
    }
    let mut rec = Recorder(Vec::new());
    fine_tune(&model, &data(8), &ft(1, 4), &mut rec).unwrap();
    let first = &rec.0[0];
    assert!((first.head_mean - 0.3).abs() < 1e-6);
    assert!(first.head_std.abs() < 1e-6);
    assert_eq!(first.progress, 0.0);
    assert_eq!(rec.0[1].progress, 0.5);

    let mut obs = ObservationBuilder::new(5, false);
    let v = obs.build(first);
    assert_eq!(v.len(), observation_dim(5));
    assert_eq!(&v[5..], &[1.0; 5]);
    obs.record_action(&ActionVector::new(vec![0, 1, 2, 3, 10], 11).unwrap());
    assert_eq!(&obs.build(first)[5..], &[0.0, 0.1, 0.2, 0.3, 1.0]);
}
