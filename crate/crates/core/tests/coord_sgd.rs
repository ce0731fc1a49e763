use asg_core::benchmark::{generate, DomainKind, DomainSpec};
use asg_core::coord_sgd::{FixedStrategy, OptState, SgdConfig};
use asg_core::nets::{Coordinate, CoordinateMap, DualHeadModel};
use asg_core::proxy::{guided_loss, LossConfig};
use asg_core::Tensor;
use proptest::prelude::*;

fn batch() -> (Tensor, Vec<usize>) {
    let d = generate(&DomainSpec::new(DomainKind::SyntheticSource, 3), 8).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    (d.images_tensor(&idx).unwrap(), d.class_labels(&idx))
}

fn backward(m: &DualHeadModel, x: &Tensor, y: &[usize]) {
    m.zero_grad();
    guided_loss(m, x, y, &LossConfig::default()).unwrap().total.backward().unwrap();
}

fn snapshot(map: &CoordinateMap) -> Vec<Vec<f32>> {
    map.iter_params().map(|(_, _, t)| t.to_vec()).collect()
}

/// Textbook heavy-ball SGD with L2 decay folded into the gradient.
struct PlainSgd {
    lr: f32,
    mu: f32,
    wd: f32,
    buf: Vec<Vec<f32>>,
}

impl PlainSgd {
    fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>]) {
        if self.buf.is_empty() {
            self.buf = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), b) in params.iter_mut().zip(grads).zip(&mut self.buf) {
            for i in 0..p.len() {
                let d = g[i] + self.wd * p[i];
                b[i] = self.mu * b[i] + d;
                p[i] -= self.lr * b[i];
            }
        }
    }
}

#[test]
fn unit_scales_reproduce_plain_momentum_sgd_bitwise() {
    let m = DualHeadModel::build("toy_cnn", 11).unwrap();
    let map = m.coordinate_map();
    let cfg = SgdConfig { eta_base: 0.05, momentum: 0.9, weight_decay: 5e-4 };
    let mut opt = OptState::new(cfg, &map).unwrap();
    let mut plain = PlainSgd { lr: 0.05, mu: 0.9, wd: 5e-4, buf: Vec::new() };
    let mut shadow = snapshot(&map);
    let (x, y) = batch();
    for _ in 0..5 {
        backward(&m, &x, &y);
        let grads: Vec<Vec<f32>> = map.iter_params().map(|(_, _, t)| t.grad().unwrap()).collect();
        opt.step(&map).unwrap();
        plain.step(&mut shadow, &grads);
        let live = snapshot(&map);
        for (a, b) in live.iter().zip(&shadow) {
            assert!(a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}

#[test]
fn zero_scale_freezes_backbone_for_100_steps() {
    let m = DualHeadModel::build("toy_cnn", 12).unwrap();
    let map = m.coordinate_map();
    let mut opt = OptState::new(SgdConfig { eta_base: 0.05, ..Default::default() }, &map).unwrap();
    opt.set_scales(&FixedStrategy::HeadOnly.scales(map.len())).unwrap();
    let before = snapshot(&map);
    let reference = m.reference_digest();
    let (x, y) = batch();
    for _ in 0..100 {
        backward(&m, &x, &y);
        opt.step(&map).unwrap();
    }
    let after = snapshot(&map);
    let head = map.len() - 1;
    for ((c, name, _), (b, a)) in map.iter_params().zip(before.iter().zip(&after)) {
        let same = a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits());
        if c == head {
            assert!(!same, "{name} should move");
        } else {
            assert!(same, "{name} moved under a zero scale");
        }
    }
    assert_eq!(m.reference_digest(), reference);
    // velocities keep accumulating under a zero scale
    assert!(opt.velocities[0].iter().any(|&v| v != 0.0));
}

fn scalar_map(p: &Tensor) -> CoordinateMap {
    CoordinateMap {
        groups: vec![Coordinate { name: "p".into(), params: vec![("p".into(), p.clone())] }],
    }
}

#[test]
fn two_steps_on_a_quadratic_match_closed_form() {
    let (eta, mu, wd, p0) = (0.1f64, 0.9f64, 0.01f64, 1.5f64);
    let p = Tensor::param(&[1], vec![p0 as f32]).unwrap();
    let map = scalar_map(&p);
    let mut opt = OptState::new(SgdConfig { eta_base: eta as f32, momentum: mu as f32, weight_decay: wd as f32 }, &map).unwrap();
    for _ in 0..2 {
        p.zero_grad();
        p.mul(&p).unwrap().sum().unwrap().backward().unwrap();
        opt.step(&map).unwrap();
    }
    // d/dp p² = 2p, plus decay wd·p
    let v1 = (2.0 + wd) * p0;
    let p1 = p0 - eta * v1;
    let v2 = mu * v1 + (2.0 + wd) * p1;
    let p2 = p1 - eta * v2;
    assert!((p.item() as f64 - p2).abs() < 1e-6, "{} vs {p2}", p.item());
    assert!((opt.velocities[0][0] as f64 - v2).abs() < 1e-6);
}

#[test]
fn invalid_scales_are_rejected() {
    let p = Tensor::param(&[1], vec![1.0]).unwrap();
    let mut opt = OptState::new(SgdConfig::default(), &scalar_map(&p)).unwrap();
    assert!(opt.set_scales(&[1.5]).is_err());
    assert!(opt.set_scales(&[-0.1]).is_err());
    assert!(opt.set_scales(&[0.5, 0.5]).is_err());
    assert!(OptState::new(SgdConfig { eta_base: 0.0, ..Default::default() }, &scalar_map(&p)).is_err());
}

#[test]
fn missing_gradient_is_an_error() {
    let p = Tensor::param(&[1], vec![1.0]).unwrap();
    let map = scalar_map(&p);
    let mut opt = OptState::new(SgdConfig::default(), &map).unwrap();
    assert!(opt.step(&map).is_err());
}

#[test]
fn fixed_strategy_shapes() {
    assert_eq!(FixedStrategy::AllLarge.scales(3), vec![1.0, 1.0, 1.0]);
    assert_eq!(FixedStrategy::SmallBackboneLargeHead.scales(3), vec![0.1, 0.1, 1.0]);
    assert_eq!(FixedStrategy::HeadOnly.scales(3), vec![0.0, 0.0, 1.0]);
    assert!("sideways".parse::<FixedStrategy>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn single_step_displacement_is_proportional_to_scale(p0 in -2.0f32..2.0, scale_idx in 0usize..11) {
        let scale = scale_idx as f32 / 10.0;
        let p = Tensor::param(&[1], vec![p0]).unwrap();
        let map = scalar_map(&p);
        let mut opt = OptState::new(SgdConfig { eta_base: 0.1, momentum: 0.9, weight_decay: 0.0 }, &map).unwrap();
        opt.set_scales(&[scale]).unwrap();
        p.mul(&p).unwrap().sum().unwrap().backward().unwrap();
        opt.step(&map).unwrap();
        let want = p0 as f64 - 0.1 * scale as f64 * 2.0 * p0 as f64;
        prop_assert!((p.item() as f64 - want).abs() < 1e-5);
        if scale == 0.0 {
            prop_assert_eq!(p.item().to_bits(), p0.to_bits());
        }
    }
}
