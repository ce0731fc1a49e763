//! Self-check suite behind `asg verify`: gradient checks for every op kind,
//! loss identities, optimizer contracts, the REINFORCE bandit, checkpoint
//! round trips and a short end-to-end run.

use rand::Rng as _;

use crate::benchmark::{generate, generate_range, DomainKind, DomainSpec};
use crate::coord_sgd::{OptState, SgdConfig};
use crate::error::{Error, Result};
use crate::gradcheck::check_gradients;
use crate::l2o::{bandit_trajectory, L2OConfig};
use crate::nets::{Checkpoint, Coordinate, CoordinateMap, DualHeadModel, PolicyNetwork};
use crate::proxy::{dense_proxy_loss, mean_entropy, proxy_loss, DivergenceForm, LossConfig};
use crate::rng::{self, Rng};
use crate::tensor::{lstm_cell, LstmWeights, OpKind, Padding, Tensor};
use crate::training::{fine_tune, FineTuneConfig, RandomController, TaskData};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Vec<f32> {
    (0..shape.iter().product::<usize>()).map(|_| r.random_range(lo..hi)).collect()
}

fn param(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::param(shape, uniform(r, shape, -1.0, 1.0)).expect("valid shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn param_off_zero(r: &mut Rng, shape: &[usize]) -> Tensor {
    let v = uniform(r, shape, 0.1, 1.0)
        .into_iter()
        .map(|x| if r.random_bool(0.5) { x } else { -x })
        .collect();
    Tensor::param(shape, v).expect("valid shape")
}

type Instance = (Vec<Tensor>, Box<dyn Fn() -> Result<Tensor>>);

/// A random instance of `kind`: leaves and a scalar loss
/// `Σ op(leaves) ⊙ w` with a fixed random weighting `w`.
pub fn op_instance(kind: OpKind, r: &mut Rng) -> Instance {
    let weighted = |out_shape: &[usize], r: &mut Rng| Tensor::new(out_shape, uniform(r, out_shape, -1.0, 1.0)).expect("shape");
    macro_rules! unary {
        ($x:expr, $shape:expr, $f:expr) => {{
            let x = $x;
            let w = weighted(&$shape, r);
            let xc = x.clone();
            let f: Box<dyn Fn() -> Result<Tensor>> = Box::new(move || ($f)(&xc)?.mul(&w)?.sum());
            (vec![x], f)
        }};
    }
    match kind {
        OpKind::MatMul => {
            let (a, b) = (param(r, &[3, 4]), param(r, &[4, 2]));
            let w = weighted(&[3, 2], r);
            let (ac, bc) = (a.clone(), b.clone());
            (vec![a, b], Box::new(move || ac.matmul(&bc)?.mul(&w)?.sum()))
        }
        OpKind::Conv2d => {
            let stride = r.random_range(1..=2);
            let (x, k, b) = (param(r, &[2, 2, 5, 5]), param(r, &[3, 2, 3, 3]), param(r, &[3]));
            let pad = if r.random_bool(0.5) { Padding::Same } else { Padding::Valid };
            let probe = x.conv2d(&k, Some(&b), stride, pad).expect("conv shape");
            let w = weighted(probe.shape(), r);
            let (xc, kc, bc) = (x.clone(), k.clone(), b.clone());
            (
                vec![x, k, b],
                Box::new(move || xc.conv2d(&kc, Some(&bc), stride, pad)?.mul(&w)?.sum()),
            )
        }
        OpKind::Add => {
            // a scalar broadcast over a matrix
            let (a, b) = (param(r, &[3, 4]), param(r, &[1]));
            let w = weighted(&[3, 4], r);
            let (ac, bc) = (a.clone(), b.clone());
            (vec![a, b], Box::new(move || ac.add(&bc)?.mul(&w)?.sum()))
        }
        OpKind::Mul => {
            let (a, b) = (param(r, &[3, 4]), param(r, &[3, 4]));
            let w = weighted(&[3, 4], r);
            let (ac, bc) = (a.clone(), b.clone());
            (vec![a, b], Box::new(move || ac.mul(&bc)?.mul(&w)?.sum()))
        }
        OpKind::Relu => unary!(param_off_zero(r, &[3, 5]), [3, 5], |x: &Tensor| x.relu()),
        OpKind::Sigmoid => unary!(param(r, &[3, 5]), [3, 5], |x: &Tensor| x.sigmoid()),
        OpKind::Tanh => unary!(param(r, &[3, 5]), [3, 5], |x: &Tensor| x.tanh()),
        OpKind::MeanPool2d => unary!(param(r, &[2, 3, 4, 4]), [2, 3, 2, 2], |x: &Tensor| x.mean_pool2d(2)),
        OpKind::Flatten => unary!(param(r, &[2, 3, 2, 2]), [2, 12], |x: &Tensor| x.flatten()),
        OpKind::Concat => {
            let (a, b) = (param(r, &[2, 3]), param(r, &[2, 2]));
            let w = weighted(&[2, 5], r);
            let (ac, bc) = (a.clone(), b.clone());
            (vec![a, b], Box::new(move || Tensor::concat(&[&ac, &bc], 1)?.mul(&w)?.sum()))
        }
        OpKind::Slice => unary!(param(r, &[2, 3, 4, 4]), [2, 3, 2, 4], |x: &Tensor| x.slice(2, 1, 3)),
        OpKind::LogSoftmax => unary!(param(r, &[3, 5]), [3, 5], |x: &Tensor| x.log_softmax(1)),
        OpKind::Softmax => unary!(param(r, &[3, 5]), [3, 5], |x: &Tensor| x.softmax(1)),
        OpKind::Sum => {
            let x = param(r, &[3, 4]);
            let xc = x.clone();
            (vec![x], Box::new(move || xc.mul(&xc)?.sum()))
        }
        OpKind::Mean => {
            let x = param(r, &[3, 4]);
            let xc = x.clone();
            (vec![x], Box::new(move || xc.mul(&xc)?.mean()))
        }
        OpKind::ScalarMul => {
            let c = r.random_range(-2.0..2.0);
            unary!(param(r, &[3, 4]), [3, 4], move |x: &Tensor| x.scalar_mul(c))
        }
    }
}

/// Random LSTM-cell instance; the loss weights both outputs.
pub fn lstm_instance(r: &mut Rng) -> Instance {
    let (i, h) = (3, 4);
    let w = LstmWeights {
        w_ih: param(r, &[i, 4 * h]),
        w_hh: param(r, &[h, 4 * h]),
        bias: param(r, &[4 * h]),
    };
    let (x, h0, c0) = (param(r, &[1, i]), param(r, &[1, h]), param(r, &[1, h]));
    let (wh, wc) = (
        Tensor::new(&[1, h], uniform(r, &[h], -1.0, 1.0)).expect("shape"),
        Tensor::new(&[1, h], uniform(r, &[h], -1.0, 1.0)).expect("shape"),
    );
    let leaves = vec![
        x.clone(),
        h0.clone(),
        c0.clone(),
        w.w_ih.clone(),
        w.w_hh.clone(),
        w.bias.clone(),
    ];
    let f: Box<dyn Fn() -> Result<Tensor>> = Box::new(move || {
        let (h1, c1) = lstm_cell(&x, &h0, &c0, &w)?;
        h1.mul(&wh)?.sum()?.add(&c1.mul(&wc)?.sum()?)
    });
    (leaves, f)
}

fn check(name: &str, f: impl FnOnce() -> Result<String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult {
            name: name.into(),
            passed: true,
            detail,
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn fail(msg: String) -> Error {
    Error::Training(msg)
}

const GRAD_TOL: f64 = 1e-3;
const GRAD_H: f32 = 1e-2;

fn gradient_checks(seed: u64, out: &mut Vec<CheckResult>) {
    for kind in OpKind::ALL {
        out.push(check(&format!("gradcheck/{}", kind.name()), || {
            let mut r = rng::stream(seed, "verify-op", kind as u64);
            let mut worst = 0.0f64;
            for _ in 0..10 {
                let (leaves, f) = op_instance(kind, &mut r);
                worst = worst.max(check_gradients(&leaves, &f, GRAD_H, None)?.max_rel_error);
            }
            if worst < GRAD_TOL {
                Ok(format!("max rel error {worst:.2e} over 10 instances"))
            } else {
                Err(fail(format!("max rel error {worst:.2e}")))
            }
        }));
    }
    out.push(check("gradcheck/lstm_cell", || {
        let mut r = rng::stream(seed, "verify-lstm", 0);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let (leaves, f) = lstm_instance(&mut r);
            worst = worst.max(check_gradients(&leaves, &f, GRAD_H, None)?.max_rel_error);
        }
        if worst < GRAD_TOL {
            Ok(format!("max rel error {worst:.2e} over 10 instances"))
        } else {
            Err(fail(format!("max rel error {worst:.2e}")))
        }
    }));
}

fn loss_checks(seed: u64, out: &mut Vec<CheckResult>) {
    out.push(check("loss/divergence_identities", || {
        let mut r = rng::stream(seed, "verify-loss", 0);
        let p = Tensor::new(&[4, 5], uniform(&mut r, &[4, 5], -2.0, 2.0))?;
        let same = proxy_loss(&p, &p, DivergenceForm::KlProper)?.item() as f64;
        if same.abs() > 1e-6 {
            return Err(fail(format!("kl_proper(p, p) = {same}")));
        }
        let q = Tensor::new(&[4, 5], uniform(&mut r, &[4, 5], -2.0, 2.0))?;
        let kl = proxy_loss(&p, &q, DivergenceForm::KlProper)?.item() as f64;
        let ce = proxy_loss(&p, &q, DivergenceForm::CrossEntropy)?.item() as f64;
        let h = mean_entropy(&p)?;
        if kl <= 0.0 || ((ce - kl) - h).abs() > 1e-6 {
            return Err(fail(format!("kl {kl}, ce − kl − H = {}", ce - kl - h)));
        }
        Ok(format!("kl(p,q) = {kl:.4}, |ce − kl − H| = {:.1e}", ((ce - kl) - h).abs()))
    }));
    out.push(check("loss/dense_single_patch", || {
        let model = DualHeadModel::build("toy_cnn", seed)?;
        let x = generate(&DomainSpec::new(DomainKind::SyntheticSource, seed), 3)?.images_tensor(&[0, 1, 2])?;
        let perturb = model.coordinate_map();
        for (_, _, t) in perturb.iter_params() {
            t.update_values(|v| v.iter_mut().for_each(|x| *x *= 1.1));
        }
        let cfg = LossConfig {
            dense_mode: true,
            patch_grid: 1,
            ..Default::default()
        };
        let dense = dense_proxy_loss(&model, &x, &cfg)?.item() as f64;
        let image = proxy_loss(&model.forward_old_ref(&x)?, &model.forward_old_live(&x)?, cfg.form)?.item() as f64;
        if (dense - image).abs() > 1e-6 {
            return Err(fail(format!("dense {dense} vs image-level {image}")));
        }
        Ok(format!("{dense:.6}"))
    }));
}

fn single(values: Vec<f32>) -> Result<(CoordinateMap, Tensor)> {
    let p = Tensor::param(&[values.len()], values)?;
    let map = CoordinateMap {
        groups: vec![Coordinate {
            name: "all".into(),
            params: vec![("p".into(), p.clone())],
        }],
    };
    Ok((map, p))
}

fn optimizer_checks(seed: u64, out: &mut Vec<CheckResult>) {
    out.push(check("optim/exact_freeze", || {
        let mut r = rng::stream(seed, "verify-freeze", 0);
        let (map, p) = single(uniform(&mut r, &[6], -1.0, 1.0))?;
        let before: Vec<u32> = p.to_vec().iter().map(|v| v.to_bits()).collect();
        let mut opt = OptState::new(SgdConfig::default(), &map)?;
        opt.set_scales(&[0.0])?;
        for _ in 0..100 {
            p.zero_grad();
            p.mul(&p)?.sum()?.backward()?;
            opt.step(&map)?;
        }
        let after: Vec<u32> = p.to_vec().iter().map(|v| v.to_bits()).collect();
        if before != after {
            return Err(fail("parameters moved under a zero scale".into()));
        }
        Ok("100 steps bitwise unchanged".into())
    }));
    out.push(check("optim/momentum_closed_form", || {
        let (map, p) = single(vec![1.0])?;
        let cfg = SgdConfig {
            eta_base: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut opt = OptState::new(cfg, &map)?;
        // loss p² ⇒ grad 2p
        for _ in 0..2 {
            p.zero_grad();
            p.mul(&p)?.sum()?.backward()?;
            opt.step(&map)?;
        }
        let (eta, mu, wd) = (0.1f64, 0.9f64, 0.01f64);
        let g1 = 2.0 + wd;
        let p1 = 1.0 - eta * g1;
        let g2 = 2.0 * p1 + wd * p1;
        let p2 = p1 - eta * (mu * g1 + g2);
        let got = p.item() as f64;
        if (got - p2).abs() > 1e-6 {
            return Err(fail(format!("p₂ = {got}, closed form {p2}")));
        }
        Ok(format!("p₂ = {got:.7}"))
    }));
}

fn l2o_checks(seed: u64, out: &mut Vec<CheckResult>) {
    out.push(check("l2o/bandit", || {
        let cfg = L2OConfig {
            seed,
            ..Default::default()
        };
        let traj = bandit_trajectory(&cfg, 500)?;
        let reached = traj.iter().position(|&p| p > 0.95);
        match reached {
            Some(n) => Ok(format!("p(better arm) > 0.95 after {} updates", n + 1)),
            None => Err(fail(format!("p(better arm) = {:.3} after 500 updates", traj[499]))),
        }
    }));
    out.push(check("checkpoint/policy_round_trip", || {
        let p = PolicyNetwork::new(10, 5, 8, 11, seed)?;
        let ck = Checkpoint::from_bytes(&p.to_checkpoint().to_bytes())?;
        let q = PolicyNetwork::from_checkpoint(&ck)?;
        if p.digest() != q.digest() {
            return Err(fail("policy digest changed across save/load".into()));
        }
        Ok("digest preserved".into())
    }));
}

fn run_checks(seed: u64, out: &mut Vec<CheckResult>) {
    out.push(check("run/telescoping_and_determinism", || {
        let data = TaskData {
            train: generate(&DomainSpec::new(DomainKind::SyntheticSource, seed), 24)?,
            target_val: generate(&DomainSpec::new(DomainKind::RealTarget, seed), 16)?,
            base_val: generate_range(&DomainSpec::new(DomainKind::Base, seed), 1000, 1016)?,
        };
        let cfg = FineTuneConfig {
            epochs: 2,
            batch_size: 8,
            seed,
            sgd: SgdConfig {
                eta_base: 0.01,
                ..Default::default()
            },
            ..Default::default()
        };
        let go = || -> Result<_> {
            let model = DualHeadModel::build("toy_cnn", seed)?;
            let digest = model.reference_digest();
            let mut ctl = RandomController::new(5, seed);
            let (rec, _) = fine_tune(&model, &data, &cfg, &mut ctl)?;
            if model.reference_digest() != digest {
                return Err(fail("reference weights changed during fine-tuning".into()));
            }
            Ok(rec)
        };
        let (a, b) = (go()?, go()?);
        let sum: f64 = a.rewards.iter().sum();
        let span = a.losses[0] - a.losses[a.losses.len() - 1];
        if (sum - span).abs() > 1e-4 {
            return Err(fail(format!("Σr = {sum}, L₀ − L_T = {span}")));
        }
        if a.losses != b.losses || a.steps != b.steps {
            return Err(fail("identical runs diverged".into()));
        }
        Ok(format!("{} steps, |Σr − (L₀ − L_T)| = {:.1e}", a.steps.len(), (sum - span).abs()))
    }));
}

/// Run every check.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    gradient_checks(seed, &mut out);
    loss_checks(seed, &mut out);
    optimizer_checks(seed, &mut out);
    l2o_checks(seed, &mut out);
    run_checks(seed, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_has_a_passing_instance() {
        let mut r = rng::stream(1, "t", 0);
        for kind in OpKind::ALL {
            let (leaves, f) = op_instance(kind, &mut r);
            let rep = check_gradients(&leaves, &f, GRAD_H, None).unwrap();
            assert!(rep.passes(GRAD_TOL), "{}: {rep:?}", kind.name());
        }
    }
}
