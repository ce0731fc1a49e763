use rand::Rng as _;

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{lstm_cell, LstmWeights, Tensor};

pub const DEFAULT_HIDDEN: usize = 20;
pub const DEFAULT_ACTIONS: usize = 11;

/// One categorical choice per coordinate. Index `k` of `n` categories maps to
/// the scale `k / (n - 1)`; with 11 categories that is {0.0, 0.1, …, 1.0}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionVector {
    pub indices: Vec<usize>,
    pub categories: usize,
}

impl ActionVector {
    pub fn new(indices: Vec<usize>, categories: usize) -> Result<Self> {
        if categories < 2 {
            return Err(Error::arg("an action needs at least two categories"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= categories) {
            return Err(Error::arg(format!("action index {bad} outside 0..{categories}")));
        }
        Ok(ActionVector { indices, categories })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn scale(&self, c: usize) -> f32 {
        index_to_scale(self.indices[c], self.categories)
    }

    pub fn scales(&self) -> Vec<f32> {
        (0..self.len()).map(|c| self.scale(c)).collect()
    }
}

pub fn index_to_scale(index: usize, categories: usize) -> f32 {
    // exact for the 11-way grid: 7 / 10 rather than 7 * 0.1
    index as f32 / (categories - 1) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sampled,
    Greedy,
}

impl ActionMode {
    pub fn name(self) -> &'static str {
        match self {
            ActionMode::Sampled => "sampled",
            ActionMode::Greedy => "greedy",
        }
    }
}

impl std::str::FromStr for ActionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(ActionMode::Sampled),
            "greedy" => Ok(ActionMode::Greedy),
            other => Err(Error::arg(format!("unknown action mode {other:?}; expected sampled or greedy"))),
        }
    }
}

/// Result of one policy step.
pub struct PolicyStep {
    pub action: ActionVector,
    /// Σ_c log p(a_c), differentiable w.r.t. the policy weights.
    pub log_prob: Tensor,
    /// Per-coordinate action probabilities (detached).
    pub probs: Vec<Vec<f32>>,
}

/// observation → linear embedding → tanh → LSTM cell → one linear head of
/// `categories` logits per coordinate.
#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    pub obs_dim: usize,
    pub hidden: usize,
    pub categories: usize,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub cell: LstmWeights,
    pub heads: Vec<(Tensor, Tensor)>,
    h: Tensor,
    c: Tensor,
}

impl PolicyNetwork {
    /// Heads start at zero so the initial policy is uniform.
    pub fn new(obs_dim: usize, coordinates: usize, hidden: usize, categories: usize, seed: u64) -> Result<Self> {
        if obs_dim == 0 || coordinates == 0 || hidden == 0 || categories < 2 {
            return Err(Error::arg("policy dimensions must be positive with at least two categories"));
        }
        let mut r = rng::stream(seed, "policy", 0);
        let param = |r: &mut Rng, shape: &[usize], std: f32| {
            let n = shape.iter().product();
            Tensor::param(shape, rng::normal_vec(r, n, std)).expect("policy shape")
        };
        let embed_w = param(&mut r, &[obs_dim, hidden], (1.0 / obs_dim as f32).sqrt());
        let cell = LstmWeights {
            w_ih: param(&mut r, &[hidden, 4 * hidden], (1.0 / hidden as f32).sqrt()),
            w_hh: param(&mut r, &[hidden, 4 * hidden], (1.0 / hidden as f32).sqrt()),
            bias: Tensor::param(&[4 * hidden], vec![0.0; 4 * hidden])?,
        };
        let heads = (0..coordinates)
            .map(|_| {
                (
                    Tensor::param(&[hidden, categories], vec![0.0; hidden * categories]).expect("head shape"),
                    Tensor::param(&[categories], vec![0.0; categories]).expect("head bias"),
                )
            })
            .collect();
        Ok(PolicyNetwork {
            obs_dim,
            hidden,
            categories,
            embed_w,
            embed_b: Tensor::param(&[hidden], vec![0.0; hidden])?,
            cell,
            heads,
            h: Tensor::zeros(&[1, hidden]),
            c: Tensor::zeros(&[1, hidden]),
        })
    }

    pub fn coordinates(&self) -> usize {
        self.heads.len()
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut v = vec![
            ("policy/embed.w".to_string(), self.embed_w.clone()),
            ("policy/embed.b".to_string(), self.embed_b.clone()),
            ("policy/lstm.w_ih".to_string(), self.cell.w_ih.clone()),
            ("policy/lstm.w_hh".to_string(), self.cell.w_hh.clone()),
            ("policy/lstm.b".to_string(), self.cell.bias.clone()),
        ];
        for (i, (w, b)) in self.heads.iter().enumerate() {
            v.push((format!("policy/head{i}.w"), w.clone()));
            v.push((format!("policy/head{i}.b"), b.clone()));
        }
        v
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self.parameters();
        Checkpoint::from_tensors(params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Rebuild a policy from [`to_checkpoint`](Self::to_checkpoint) output;
    /// dimensions are read off the stored shapes.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let shape = |name: &str| {
            ck.get(name)
                .map(|e| e.shape.clone())
                .ok_or_else(|| Error::Format(format!("policy checkpoint has no tensor {name:?}")))
        };
        let embed = shape("policy/embed.w")?;
        let head = shape("policy/head0.w")?;
        if embed.len() != 2 || head.len() != 2 {
            return Err(Error::Format("policy checkpoint has malformed weight ranks".into()));
        }
        let coordinates = (0..).take_while(|i| ck.get(&format!("policy/head{i}.w")).is_some()).count();
        let policy = PolicyNetwork::new(embed[0], coordinates, embed[1], head[1], 0)?;
        let params = policy.parameters();
        ck.restore(params.iter().map(|(n, t)| (n.as_str(), t)))?;
        let expected = params.len();
        if ck.entries.len() != expected {
            return Err(Error::Format(format!(
                "policy checkpoint has {} tensors, expected {expected}",
                ck.entries.len()
            )));
        }
        Ok(policy)
    }

    /// h = c = 0.
    pub fn reset_state(&mut self) {
        self.h = Tensor::zeros(&[1, self.hidden]);
        self.c = Tensor::zeros(&[1, self.hidden]);
    }

    /// Cut the recurrent state from the graph, keeping its values.
    pub fn detach_state(&mut self) {
        self.h = self.h.detach();
        self.c = self.c.detach();
    }

    pub fn hidden_state(&self) -> (&Tensor, &Tensor) {
        (&self.h, &self.c)
    }

    /// Per-coordinate logits for `obs` from state (h, c), and the next state.
    fn logits(&self, obs: &[f32]) -> Result<(Vec<Tensor>, Tensor, Tensor)> {
        if obs.len() != self.obs_dim {
            return Err(Error::shape("policy observation", &[obs.len()], &[self.obs_dim]));
        }
        let x = Tensor::new(&[1, self.obs_dim], obs.to_vec())?;
        let e = x.linear(&self.embed_w, Some(&self.embed_b))?.tanh()?;
        let (h, c) = lstm_cell(&e, &self.h, &self.c, &self.cell)?;
        let logits = self
            .heads
            .iter()
            .map(|(w, b)| h.linear(w, Some(b)))
            .collect::<Result<Vec<_>>>()?;
        Ok((logits, h, c))
    }

    /// Pick one category per coordinate (sampled independently, or argmax),
    /// advance the recurrent state and return the joint log-probability.
    pub fn step(&mut self, obs: &[f32], mode: ActionMode, rng: &mut Rng) -> Result<PolicyStep> {
        let (logits, h, c) = self.logits(obs)?;
        let mut indices = Vec::with_capacity(logits.len());
        let mut probs = Vec::with_capacity(logits.len());
        let mut log_prob: Option<Tensor> = None;
        for l in &logits {
            let lp = l.log_softmax(1)?;
            let p: Vec<f32> = lp.values().iter().map(|&v| (v as f64).exp() as f32).collect();
            let idx = match mode {
                ActionMode::Sampled => sample_categorical(&p, rng),
                ActionMode::Greedy => argmax(&p),
            };
            let term = lp.slice(1, idx, idx + 1)?;
            log_prob = Some(match log_prob {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
            indices.push(idx);
            probs.push(p);
        }
        self.h = h;
        self.c = c;
        Ok(PolicyStep {
            action: ActionVector::new(indices, self.categories)?,
            log_prob: log_prob.expect("at least one coordinate").sum()?,
            probs,
        })
    }

    pub fn digest(&self) -> [u8; 32] {
        let params = self.parameters();
        super::model::digest(params.iter().map(|(_, t)| t))
    }
}

/// Inverse-CDF draw with one uniform variate.
pub fn sample_categorical(probs: &[f32], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().map(|&p| p as f64).sum();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p as f64 / total;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// First index of the maximum.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_scales_follow_tenths() {
        let a = ActionVector::new(vec![0, 5, 10], 11).unwrap();
        assert_eq!(a.scales(), vec![0.0, 0.5, 1.0]);
        assert_eq!(ActionVector::new(vec![7], 11).unwrap().scale(0), 0.7);
        assert!(ActionVector::new(vec![11], 11).is_err());
    }

    #[test]
    fn initial_policy_is_uniform_and_log_prob_nonpositive() {
        let mut pi = PolicyNetwork::new(8, 3, DEFAULT_HIDDEN, DEFAULT_ACTIONS, 0).unwrap();
        let mut r = rng::stream(0, "t", 0);
        let step = pi.step(&[0.1; 8], ActionMode::Sampled, &mut r).unwrap();
        for p in &step.probs {
            let s: f32 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| (v - 1.0 / 11.0).abs() < 1e-6));
        }
        assert!(step.log_prob.item() <= 0.0);
        assert!((step.log_prob.item() - 3.0 * (1.0f32 / 11.0).ln()).abs() < 1e-5);
    }

    #[test]
    fn hidden_state_starts_at_zero_and_keeps_shape() {
        let mut pi = PolicyNetwork::new(4, 2, DEFAULT_HIDDEN, DEFAULT_ACTIONS, 1).unwrap();
        assert!(pi.hidden_state().0.to_vec().iter().all(|&v| v == 0.0));
        let mut r = rng::stream(0, "t", 0);
        for _ in 0..3 {
            pi.step(&[0.5, -0.5, 1.0, 0.0], ActionMode::Sampled, &mut r).unwrap();
            assert_eq!(pi.hidden_state().0.shape(), &[1, DEFAULT_HIDDEN]);
        }
        pi.reset_state();
        assert!(pi.hidden_state().1.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn observation_dimension_checked() {
        let mut pi = PolicyNetwork::new(4, 2, 5, 3, 1).unwrap();
        let mut r = rng::stream(0, "t", 0);
        assert!(pi.step(&[0.0; 3], ActionMode::Greedy, &mut r).is_err());
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }
}
