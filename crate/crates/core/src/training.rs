//! The fine-tuning loop shared by every learning-rate strategy.
//!
//! Step t forwards batch t, reports `r_t = L_{t−1} − L_t` for the previous
//! action, asks the controller for this step's scales, then backpropagates
//! the same forward and updates. One extra forward after the last update
//! (on the next batch in sequence) closes the reward sequence, so a run of T
//! updates records T + 1 losses and T rewards.

use rand::Rng as _;

use crate::benchmark::{accuracy_with, shuffled, Dataset};
use crate::coord_sgd::{OptState, SgdConfig};
use crate::error::{Error, Result};
use crate::l2o::compute_reward;
use crate::nets::{argmax, ActionVector, ArchKind, DualHeadModel, DEFAULT_ACTIONS};
use crate::proxy::{guided_loss, LossConfig};
use crate::rng;
use crate::tensor::{no_grad, Tensor};

/// Datasets of one transfer experiment.
#[derive(Debug, Clone)]
pub struct TaskData {
    /// Labelled synthetic source images.
    pub train: Dataset,
    /// Real target validation split for the new task.
    pub target_val: Dataset,
    /// Base validation split for old-task retention.
    pub base_val: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    /// Seeds the batch order.
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 10,
            batch_size: 32,
            loss: LossConfig::default(),
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("epochs and batch size must be at least 1"));
        }
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(train_len)
    }
}

/// Raw per-step signals handed to a controller.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSignals {
    pub xe: f64,
    pub kl: f64,
    /// t / T.
    pub progress: f64,
    pub head_mean: f64,
    pub head_std: f64,
}

/// Chooses per-coordinate learning-rate actions during fine-tuning.
pub trait Controller {
    fn act(&mut self, signals: &StepSignals) -> Result<ActionVector>;

    /// Reward for the most recent action.
    fn reward(&mut self, _r: f64) -> Result<()> {
        Ok(())
    }

    /// Called once after the closing reward.
    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Constant scales, expressed as the nearest action indices.
pub struct FixedController {
    action: ActionVector,
}

impl FixedController {
    pub fn new(scales: &[f32]) -> Result<Self> {
        let top = (DEFAULT_ACTIONS - 1) as f32;
        let indices = scales
            .iter()
            .map(|&s| {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::arg(format!("scale {s} outside [0, 1]")));
                }
                let i = (s * top).round();
                if (i / top - s).abs() > 1e-6 {
                    return Err(Error::arg(format!("scale {s} is not a multiple of 1/{top}")));
                }
                Ok(i as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FixedController {
            action: ActionVector::new(indices, DEFAULT_ACTIONS)?,
        })
    }
}

impl Controller for FixedController {
    fn act(&mut self, _: &StepSignals) -> Result<ActionVector> {
        Ok(self.action.clone())
    }
}

/// Independent uniform action per coordinate at every step.
pub struct RandomController {
    rng: rng::Rng,
    coordinates: usize,
}

impl RandomController {
    pub fn new(coordinates: usize, seed: u64) -> Self {
        RandomController {
            rng: rng::stream(seed, "random-policy", 0),
            coordinates,
        }
    }
}

impl Controller for RandomController {
    fn act(&mut self, _: &StepSignals) -> Result<ActionVector> {
        let idx = (0..self.coordinates)
            .map(|_| self.rng.random_range(0..DEFAULT_ACTIONS))
            .collect();
        ActionVector::new(idx, DEFAULT_ACTIONS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss_total: f64,
    pub loss_xe: f64,
    /// Divergence in kl_proper form, regardless of the optimized form.
    pub loss_kl: f64,
    /// L_{t−1} − L_t; zero at t = 0.
    pub reward: f64,
    pub batch_accuracy: f64,
    pub action: ActionVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub target_accuracy: f64,
    pub retention: f64,
    /// Seconds since the run started.
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub coordinate_names: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// L_0 … L_T.
    pub losses: Vec<f64>,
    /// r_1 … r_T.
    pub rewards: Vec<f64>,
}

impl RunRecord {
    pub fn final_target(&self) -> f64 {
        self.epochs.last().map(|e| e.target_accuracy).unwrap_or(f64::NAN)
    }

    pub fn best_target(&self) -> f64 {
        self.epochs.iter().map(|e| e.target_accuracy).fold(f64::NAN, f64::max)
    }

    pub fn final_retention(&self) -> f64 {
        self.epochs.last().map(|e| e.retention).unwrap_or(f64::NAN)
    }
}

/// Supervision for the new head: class ids, or block-reduced masks for the
/// per-position head.
pub fn task_labels(model: &DualHeadModel, data: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    match model.arch.kind {
        ArchKind::ToyCnn => Ok(data.class_labels(indices)),
        ArchKind::ToyDenseNet => data.mask_labels(indices, model.arch.dense_output_size(data.image_size)),
    }
}

/// Fraction of supervised positions whose argmax matches the label.
pub fn logits_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let v = logits.values();
    let mut correct = 0usize;
    let mut scores = vec![0.0f32; k];
    for i in 0..n {
        for p in 0..inner {
            for (c, sc) in scores.iter_mut().enumerate() {
                *sc = v[(i * k + c) * inner + p];
            }
            correct += (argmax(&scores) == labels[i * inner + p]) as usize;
        }
    }
    correct as f64 / (n * inner) as f64
}

/// New-task accuracy of the live model (per pixel for the dense task).
pub fn new_task_accuracy(model: &DualHeadModel, data: &Dataset) -> Result<f64> {
    if model.arch.kind == ArchKind::ToyCnn {
        return accuracy_with(data, |x| model.forward_new(x));
    }
    if data.is_empty() {
        return Err(Error::arg("cannot measure accuracy on an empty dataset"));
    }
    no_grad(|| {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut weighted = 0.0;
        for chunk in idx.chunks(256) {
            let logits = model.forward_new(&data.images_tensor(chunk)?)?;
            weighted += logits_accuracy(&logits, &task_labels(model, data, chunk)?) * chunk.len() as f64;
        }
        Ok(weighted / data.len() as f64)
    })
}

fn head_stats(model: &DualHeadModel) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for t in model.new_head_tensors() {
        for &v in t.values().iter() {
            n += 1;
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
    }
    let mean = sum / n as f64;
    (mean, (sq / n as f64 - mean * mean).max(0.0).sqrt())
}

/// Fine-tune `model` in place, with `ctl` choosing the scales of every
/// update. Returns the run log and the final optimizer state.
pub fn fine_tune(
    model: &DualHeadModel,
    data: &TaskData,
    cfg: &FineTuneConfig,
    ctl: &mut dyn Controller,
) -> Result<(RunRecord, OptState)> {
    fine_tune_with(model, data, cfg, ctl, &mut |_| Ok(()))
}

/// [`fine_tune`] with `on_epoch` called on the partial record after every
/// epoch's evaluation.
pub fn fine_tune_with(
    model: &DualHeadModel,
    data: &TaskData,
    cfg: &FineTuneConfig,
    ctl: &mut dyn Controller,
    on_epoch: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<(RunRecord, OptState)> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    if data.train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let map = model.coordinate_map();
    let mut opt = OptState::new(cfg.sgd.clone(), &map)?;
    let steps_per_epoch = cfg.steps_per_epoch(data.train.len());
    let total = cfg.total_steps(data.train.len());
    let mut order_rng = rng::stream(cfg.seed, "batch-order", 0);

    let mut rec = RunRecord {
        coordinate_names: map.names().iter().map(|s| s.to_string()).collect(),
        steps: Vec::with_capacity(total),
        epochs: Vec::with_capacity(cfg.epochs),
        losses: Vec::with_capacity(total + 1),
        rewards: Vec::with_capacity(total),
    };

    let mut t = 0usize;
    for epoch in 0..cfg.epochs {
        let order = shuffled(data.train.len(), &mut order_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.train.images_tensor(batch)?;
            let labels = task_labels(model, &data.train, batch)?;
            let terms = guided_loss(model, &x, &labels, &cfg.loss)?;
            let loss = terms.total.item() as f64;
            let reward = match rec.losses.last() {
                Some(&prev) => {
                    let r = compute_reward(prev, loss)?;
                    rec.rewards.push(r);
                    ctl.reward(r)?;
                    r
                }
                None => 0.0,
            };
            rec.losses.push(loss);

            let (head_mean, head_std) = head_stats(model);
            let signals = StepSignals {
                xe: terms.xe.item() as f64,
                kl: terms.kl.item() as f64,
                progress: t as f64 / total as f64,
                head_mean,
                head_std,
            };
            let action = ctl.act(&signals)?;
            opt.apply_scales(&action)?;

            model.zero_grad();
            terms.total.backward()?;
            opt.step(&map)?;

            rec.steps.push(StepRecord {
                step: t,
                epoch,
                batch: b,
                loss_total: loss,
                loss_xe: signals.xe,
                loss_kl: terms.kl_proper as f64,
                reward,
                batch_accuracy: logits_accuracy(&terms.new_logits, &labels),
                action,
            });
            loss_sum += loss;
            t += 1;
        }
        rec.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            target_accuracy: new_task_accuracy(model, &data.target_val)?,
            retention: crate::benchmark::measure_retention(model, &data.base_val)?,
            elapsed_s: started.elapsed().as_secs_f64(),
        });
        on_epoch(&rec)?;
    }

    // closing forward on the batch that would come next
    let next = shuffled(data.train.len(), &mut order_rng);
    let batch = &next[..cfg.batch_size.min(next.len())];
    let closing = no_grad(|| -> Result<f64> {
        let x = data.train.images_tensor(batch)?;
        let labels = task_labels(model, &data.train, batch)?;
        Ok(guided_loss(model, &x, &labels, &cfg.loss)?.total.item() as f64)
    })?;
    let r = compute_reward(*rec.losses.last().expect("at least one step"), closing)?;
    rec.rewards.push(r);
    rec.losses.push(closing);
    ctl.reward(r)?;
    ctl.finish()?;
    Ok((rec, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{generate, generate_range, DomainKind, DomainSpec};

    fn tiny(arch: &str) -> (DualHeadModel, TaskData) {
        let model = DualHeadModel::build(arch, 3).unwrap();
        let data = TaskData {
            train: generate(&DomainSpec::new(DomainKind::SyntheticSource, 1), 10).unwrap(),
            target_val: generate(&DomainSpec::new(DomainKind::RealTarget, 1), 8).unwrap(),
            base_val: generate_range(&DomainSpec::new(DomainKind::Base, 1), 100, 108).unwrap(),
        };
        (model, data)
    }

    #[test]
    fn row_count_and_reward_telescoping() {
        let (model, data) = tiny("toy_cnn");
        let cfg = FineTuneConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let mut ctl = FixedController::new(&[1.0; 5]).unwrap();
        let (rec, _) = fine_tune(&model, &data, &cfg, &mut ctl).unwrap();
        assert_eq!(rec.steps.len(), 2 * 3);
        assert_eq!(rec.losses.len(), 7);
        assert_eq!(rec.rewards.len(), 6);
        let sum: f64 = rec.rewards.iter().sum();
        assert!((sum - (rec.losses[0] - rec.losses[6])).abs() < 1e-9);
        assert_eq!(rec.steps[0].reward, 0.0);
        assert_eq!(rec.epochs.len(), 2);
    }

    #[test]
    fn fixed_controller_rejects_off_grid_scales() {
        assert!(FixedController::new(&[0.15]).is_err());
        assert!(FixedController::new(&[1.5]).is_err());
        assert!(FixedController::new(&[0.1, 0.0, 1.0]).is_ok());
    }

    #[test]
    fn dense_task_runs() {
        let (model, data) = tiny("toy_dense_net");
        let cfg = FineTuneConfig {
            epochs: 1,
            batch_size: 5,
            loss: LossConfig {
                dense_mode: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut ctl = RandomController::new(5, 0);
        let (rec, _) = fine_tune(&model, &data, &cfg, &mut ctl).unwrap();
        assert_eq!(rec.steps.len(), 2);
        assert!((0.0..=1.0).contains(&rec.final_target()));
    }
}
