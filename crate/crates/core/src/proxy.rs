//! Task cross-entropy, proxy guidance towards the frozen reference model,
//! its patch-wise dense variant, and the weighted total.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nets::DualHeadModel;
use crate::tensor::Tensor;

/// How the divergence between reference and live old-head outputs is
/// reported. Both have identical gradients w.r.t. the live logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivergenceForm {
    /// −Σ p log q, zero-free at p = q (it equals H(p) there).
    #[default]
    CrossEntropy,
    /// −Σ p log q − H(p), zero iff p = q.
    KlProper,
}

impl FromStr for DivergenceForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(DivergenceForm::CrossEntropy),
            "kl_proper" => Ok(DivergenceForm::KlProper),
            other => Err(Error::Config(format!(
                "unknown divergence form {other:?} (expected cross_entropy or kl_proper)"
            ))),
        }
    }
}

impl fmt::Display for DivergenceForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceForm::CrossEntropy => "cross_entropy",
            DivergenceForm::KlProper => "kl_proper",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda: f32,
    /// Use the patch-wise proxy loss.
    pub dense_mode: bool,
    /// g for a g×g grid of non-overlapping patches.
    pub patch_grid: usize,
    pub form: DivergenceForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            dense_mode: false,
            patch_grid: 2,
            form: DivergenceForm::CrossEntropy,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::arg(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.patch_grid == 0 {
            return Err(Error::arg("patch grid must be at least 1"));
        }
        Ok(())
    }
}

fn one_hot(shape: &[usize], labels: &[usize]) -> Result<Tensor> {
    // logits (N, K) or (N, K, H, W); labels N or N·H·W
    let (n, k) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    if labels.len() != n * inner {
        return Err(Error::shape("xe_loss labels", &[labels.len()], &[n * inner]));
    }
    let mut data = vec![0.0f32; n * k * inner];
    for (pos, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::arg(format!("label {y} out of range for {k} classes")));
        }
        let (i, s) = (pos / inner, pos % inner);
        data[(i * k + y) * inner + s] = 1.0;
    }
    Tensor::new(shape, data)
}

/// Mean negative log-likelihood over every supervised position. `logits` is
/// (N, K) with N labels, or (N, K, H, W) with N·H·W labels in row-major
/// order.
pub fn xe_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 && s.len() != 4 {
        return Err(Error::invalid_shape("xe_loss", s, "expected (N, K) or (N, K, H, W)"));
    }
    let positions = s[0] * s[2..].iter().product::<usize>();
    let target = one_hot(s, labels)?;
    logits
        .log_softmax(1)?
        .mul(&target)?
        .sum()?
        .scalar_mul(-1.0 / positions as f32)
}

/// Mean entropy H(softmax(logits)) over rows, in f64.
pub fn mean_entropy(logits: &Tensor) -> Result<f64> {
    let lp = logits.detach().log_softmax(1)?;
    let v = lp.values();
    let n = logits.shape()[0];
    Ok(-v.iter().map(|&l| (l as f64).exp() * l as f64).sum::<f64>() / n as f64)
}

/// Divergence of the live old-head outputs from the frozen reference
/// outputs, averaged over the batch. `old_logits_ref` is treated as a
/// constant.
pub fn proxy_loss(old_logits_ref: &Tensor, old_logits_live: &Tensor, form: DivergenceForm) -> Result<Tensor> {
    let (sr, sl) = (old_logits_ref.shape(), old_logits_live.shape());
    if sr != sl || sr.len() != 2 {
        return Err(Error::shape("proxy_loss", sr, sl));
    }
    let p = old_logits_ref.detach().softmax(1)?;
    let ce = old_logits_live
        .log_softmax(1)?
        .mul(&p)?
        .sum()?
        .scalar_mul(-1.0 / sr[0] as f32)?;
    match form {
        DivergenceForm::CrossEntropy => Ok(ce),
        DivergenceForm::KlProper => {
            let h = mean_entropy(old_logits_ref)?;
            ce.add(&Tensor::scalar(-h as f32))
        }
    }
}

/// Split (N, C, H, W) inputs into a g×g grid of non-overlapping patches.
pub fn crop_patches(x: &Tensor, grid: usize) -> Result<Vec<Tensor>> {
    let s = x.shape();
    if s.len() != 4 || grid == 0 || !s[2].is_multiple_of(grid) || !s[3].is_multiple_of(grid) {
        return Err(Error::invalid_shape(
            "dense_proxy_loss",
            s,
            format!("patch grid {grid} must divide the spatial extents"),
        ));
    }
    let (ph, pw) = (s[2] / grid, s[3] / grid);
    let mut out = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            out.push(x.slice(2, r * ph, (r + 1) * ph)?.slice(3, c * pw, (c + 1) * pw)?);
        }
    }
    Ok(out)
}

/// Proxy loss averaged over the N_B · g² input patches, each forwarded
/// through both the live and the reference backbone with the old head.
pub fn dense_proxy_loss(model: &DualHeadModel, inputs: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    if !cfg.dense_mode {
        return Err(Error::arg("dense_proxy_loss requires dense_mode"));
    }
    let patches = crop_patches(inputs, cfg.patch_grid)?;
    let count = patches.len();
    let mut acc: Option<Tensor> = None;
    for patch in &patches {
        let live = model.forward_old_live(patch)?;
        let reference = model.forward_old_ref(patch)?;
        let term = proxy_loss(&reference, &live, cfg.form)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    acc.expect("grid >= 1").scalar_mul(1.0 / count as f32)
}

/// `xe + λ·kl`.
pub fn total_loss(xe: &Tensor, kl: &Tensor, lambda: f32) -> Result<Tensor> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::arg(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if xe.numel() != 1 || kl.numel() != 1 {
        return Err(Error::shape("total_loss", xe.shape(), kl.shape()));
    }
    xe.add(&kl.scalar_mul(lambda)?)
}

/// All loss terms of one training forward pass.
pub struct LossTerms {
    pub xe: Tensor,
    pub kl: Tensor,
    pub total: Tensor,
    /// The divergence in kl_proper form, for logging.
    pub kl_proper: f32,
    pub new_logits: Tensor,
}

/// Forward a labelled batch and assemble every loss term.
///
/// With λ = 0 the divergence is evaluated on detached logits, so the value
/// is still reported but contributes no graph.
pub fn guided_loss(model: &DualHeadModel, inputs: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let (new_logits, old_live) = model.forward_live(inputs)?;
    let xe = xe_loss(&new_logits, labels)?;
    let track = cfg.lambda > 0.0;

    let (kl, entropy) = if cfg.dense_mode {
        let kl = if track {
            dense_proxy_loss(model, inputs, cfg)?
        } else {
            dense_proxy_loss(model, &inputs.detach(), cfg)?.detach()
        };
        let entropy = if cfg.form == DivergenceForm::CrossEntropy {
            let mut h = 0.0;
            let patches = crop_patches(inputs, cfg.patch_grid)?;
            for p in &patches {
                h += mean_entropy(&model.forward_old_ref(p)?)?;
            }
            h / patches.len() as f64
        } else {
            0.0
        };
        (kl, entropy)
    } else {
        let reference = model.forward_old_ref(inputs)?;
        let live = if track { old_live } else { old_live.detach() };
        let entropy = if cfg.form == DivergenceForm::CrossEntropy {
            mean_entropy(&reference)?
        } else {
            0.0
        };
        (proxy_loss(&reference, &live, cfg.form)?, entropy)
    };
    let total = total_loss(&xe, &kl, cfg.lambda)?;
    let kl_proper = (kl.item() as f64 - entropy) as f32;
    Ok(LossTerms {
        xe,
        kl,
        total,
        kl_proper,
        new_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let l = xe_loss(&t(&[1, 2], &[1e6, 0.0]), &[0]).unwrap();
        assert!(l.item().abs() < 1e-6);
    }

    #[test]
    fn uniform_two_class_is_ln2() {
        let l = xe_loss(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((l.item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(xe_loss(&t(&[1, 2], &[0.0, 0.0]), &[2]).is_err());
        assert!(xe_loss(&t(&[2, 2], &[0.0; 4]), &[0]).is_err());
    }

    #[test]
    fn identical_logits_kl_is_zero() {
        let a = t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.5]);
        let kl = proxy_loss(&a, &a, DivergenceForm::KlProper).unwrap();
        assert!(kl.item().abs() < 1e-6);
    }

    #[test]
    fn single_term_cross_entropy() {
        // p = [1, 0] (approximately, via a large logit gap), q = [0.5, 0.5]
        let p = t(&[1, 2], &[100.0, 0.0]);
        let q = t(&[1, 2], &[0.0, 0.0]);
        let ce = proxy_loss(&p, &q, DivergenceForm::CrossEntropy).unwrap();
        assert!((ce.item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = t(&[1, 2], &[0.0, 0.0]);
        let b = t(&[1, 3], &[0.0, 0.0, 0.0]);
        assert!(proxy_loss(&a, &b, DivergenceForm::CrossEntropy).is_err());
    }

    #[test]
    fn total_loss_formula() {
        let xe = Tensor::scalar(1.0);
        let kl = Tensor::scalar(0.5);
        assert!((total_loss(&xe, &kl, 0.1).unwrap().item() - 1.05).abs() < 1e-6);
        assert_eq!(total_loss(&xe, &kl, 0.0).unwrap().item(), 1.0);
        assert!(total_loss(&xe, &kl, -0.1).is_err());
        let seg = total_loss(&Tensor::scalar(2.0), &Tensor::scalar(0.02), 75.0).unwrap();
        assert!((seg.item() - 3.5).abs() < 1e-6);
    }

    #[test]
    fn indivisible_grid_rejected() {
        let m = DualHeadModel::build("toy_dense_net", 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        let cfg = LossConfig {
            dense_mode: true,
            patch_grid: 3,
            ..Default::default()
        };
        assert!(dense_proxy_loss(&m, &x, &cfg).is_err());
    }

    #[test]
    fn divergence_form_parses() {
        assert_eq!("kl_proper".parse::<DivergenceForm>().unwrap(), DivergenceForm::KlProper);
        assert!("kl".parse::<DivergenceForm>().is_err());
    }
}
