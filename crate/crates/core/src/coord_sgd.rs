//! Momentum SGD with coupled weight decay and one learning-rate scale per
//! optimization coordinate.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nets::{ActionVector, CoordinateMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub eta_base: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            eta_base: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Optimizer state: hyperparameters, one velocity buffer per trainable
/// parameter (in coordinate-map order) and the current scale vector.
#[derive(Debug, Clone)]
pub struct OptState {
    pub cfg: SgdConfig,
    pub velocities: Vec<Vec<f32>>,
    pub scales: Vec<f32>,
    shapes: Vec<Vec<usize>>,
}

impl OptState {
    /// Zero velocities and all-ones scales.
    pub fn new(cfg: SgdConfig, map: &CoordinateMap) -> Result<Self> {
        if !(cfg.eta_base > 0.0) || !cfg.eta_base.is_finite() {
            return Err(Error::arg(format!("eta_base must be positive, got {}", cfg.eta_base)));
        }
        let shapes: Vec<Vec<usize>> = map.iter_params().map(|(_, _, t)| t.shape().to_vec()).collect();
        Ok(OptState {
            cfg,
            velocities: shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect(),
            scales: vec![1.0; map.len()],
            shapes,
        })
    }

    pub fn coordinates(&self) -> usize {
        self.scales.len()
    }

    /// Replace the scale vector from a categorical action.
    pub fn apply_scales(&mut self, action: &ActionVector) -> Result<()> {
        self.set_scales(&action.scales())
    }

    pub fn set_scales(&mut self, scales: &[f32]) -> Result<()> {
        if scales.len() != self.scales.len() {
            return Err(Error::arg(format!(
                "scale vector has {} entries, optimizer has {} coordinates",
                scales.len(),
                self.scales.len()
            )));
        }
        if let Some(bad) = scales.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::arg(format!("scale {bad} outside [0, 1]")));
        }
        self.scales.copy_from_slice(scales);
        Ok(())
    }

    /// One update of every parameter in `map` from its accumulated gradient:
    ///
    /// ```text
    /// g ← grad + wd·p;  v ← μ·v + g;  p ← p − (η_base·a_c)·v
    /// ```
    ///
    /// Velocities advance even when a_c = 0, in which case p is untouched.
    pub fn step(&mut self, map: &CoordinateMap) -> Result<()> {
        let grads: Vec<(usize, &str, &Tensor, Vec<f32>)> = map
            .iter_params()
            .map(|(c, name, t)| {
                t.grad()
                    .map(|g| (c, name, t, g))
                    .ok_or_else(|| Error::Training(format!("parameter {name} has no gradient")))
            })
            .collect::<Result<_>>()?;
        if grads.len() != self.velocities.len() {
            return Err(Error::arg("coordinate map does not match optimizer state"));
        }
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (i, (c, name, param, grad)) in grads.into_iter().enumerate() {
            if param.shape() != self.shapes[i].as_slice() {
                return Err(Error::shape("sgd step", param.shape(), &self.shapes[i]));
            }
            let lr = self.cfg.eta_base * self.scales[c];
            let vel = &mut self.velocities[i];
            let mut finite = true;
            param.update_values(|p| {
                for ((p, v), g) in p.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                    let g = g + wd * *p;
                    *v = mu * *v + g;
                    if lr != 0.0 {
                        *p -= lr * *v;
                    }
                    finite &= p.is_finite() && v.is_finite();
                }
            });
            if !finite {
                return Err(Error::NonFinite {
                    op: "sgd step",
                    what: format!("parameter {name}"),
                });
            }
        }
        Ok(())
    }

    /// (name, shape, velocity) for checkpointing.
    pub fn velocity_entries<'a>(&'a self, map: &'a CoordinateMap) -> Vec<(String, Vec<usize>, &'a [f32])> {
        map.iter_params()
            .zip(&self.velocities)
            .map(|((_, name, t), v)| (format!("velocity/{name}"), t.shape().to_vec(), v.as_slice()))
            .collect()
    }
}

/// Constant per-coordinate scale schedules. The last coordinate is the new
/// head; every other coordinate belongs to the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedStrategy {
    AllLarge,
    SmallBackboneLargeHead,
    HeadOnly,
}

impl FixedStrategy {
    pub const ALL: [FixedStrategy; 3] = [
        FixedStrategy::AllLarge,
        FixedStrategy::SmallBackboneLargeHead,
        FixedStrategy::HeadOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FixedStrategy::AllLarge => "all_large",
            FixedStrategy::SmallBackboneLargeHead => "small_backbone_large_head",
            FixedStrategy::HeadOnly => "head_only",
        }
    }

    /// Scale vector for `coordinates` groups.
    pub fn scales(self, coordinates: usize) -> Vec<f32> {
        let backbone = match self {
            FixedStrategy::AllLarge => 1.0,
            FixedStrategy::SmallBackboneLargeHead => 0.1,
            FixedStrategy::HeadOnly => 0.0,
        };
        let mut v = vec![backbone; coordinates];
        if let Some(last) = v.last_mut() {
            *last = 1.0;
        }
        v
    }
}

impl FromStr for FixedStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FixedStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::arg(format!(
                    "unknown fixed strategy {s:?}; expected one of all_large, small_backbone_large_head, head_only"
                ))
            })
    }
}

impl fmt::Display for FixedStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Resolve a fixed strategy by name into its scale vector.
pub fn fixed_strategy(name: &str, coordinates: usize) -> Result<Vec<f32>> {
    Ok(name.parse::<FixedStrategy>()?.scales(coordinates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Coordinate, DualHeadModel};

    fn single(p0: f32) -> (CoordinateMap, Tensor) {
        let p = Tensor::param(&[1], vec![p0]).unwrap();
        let map = CoordinateMap {
            groups: vec![Coordinate {
                name: "only".into(),
                params: vec![("p".into(), p.clone())],
            }],
        };
        (map, p)
    }

    fn set_grad(p: &Tensor, g: f32) {
        p.zero_grad();
        p.scalar_mul(g).unwrap().sum().unwrap().backward().unwrap();
    }

    fn cfg(eta: f32) -> SgdConfig {
        SgdConfig {
            eta_base: eta,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn first_step_moves_by_gradient() {
        let (map, p) = single(1.0);
        let mut opt = OptState::new(cfg(0.1), &map).unwrap();
        set_grad(&p, 0.5);
        opt.step(&map).unwrap();
        assert_eq!(opt.velocities[0], vec![0.5]);
        assert!((p.item() - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_scale_freezes_but_accumulates_velocity() {
        let (map, p) = single(1.0);
        let mut opt = OptState::new(cfg(0.1), &map).unwrap();
        opt.set_scales(&[0.0]).unwrap();
        set_grad(&p, 0.5);
        opt.step(&map).unwrap();
        assert_eq!(opt.velocities[0], vec![0.5]);
        assert_eq!(p.item().to_bits(), 1.0f32.to_bits());
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let (map, _p) = single(1.0);
        let mut opt = OptState::new(cfg(0.1), &map).unwrap();
        let err = opt.step(&map).unwrap_err().to_string();
        assert!(err.contains("p"), "{err}");
    }

    #[test]
    fn apply_scales_maps_indices_to_tenths() {
        let m = DualHeadModel::build("toy_cnn", 0).unwrap();
        let map = m.coordinate_map();
        let mut opt = OptState::new(SgdConfig::default(), &map).unwrap();
        let a = ActionVector::new(vec![0, 5, 10, 3, 7], 11).unwrap();
        opt.apply_scales(&a).unwrap();
        assert_eq!(opt.scales, vec![0.0, 0.5, 1.0, 0.3, 0.7]);
        let snapshot = opt.scales.clone();
        opt.apply_scales(&a).unwrap();
        assert_eq!(opt.scales, snapshot);
        let short = ActionVector::new(vec![0, 5, 10], 11).unwrap();
        assert!(opt.apply_scales(&short).is_err());
    }

    #[test]
    fn fixed_strategies() {
        assert_eq!(fixed_strategy("head_only", 5).unwrap(), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            fixed_strategy("small_backbone_large_head", 3).unwrap(),
            vec![0.1, 0.1, 1.0]
        );
        assert_eq!(fixed_strategy("all_large", 4).unwrap(), vec![1.0; 4]);
        assert!(fixed_strategy("warmup", 4).is_err());
    }
}
