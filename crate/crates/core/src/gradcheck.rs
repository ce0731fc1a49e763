//! Central finite-difference checking of analytic gradients.

use crate::error::Result;
use crate::tensor::Tensor;

/// Relative error with a unit floor on the denominator, so gradients much
/// smaller than one are compared absolutely. f32 round-off in the loss makes
/// pure relative error meaningless for near-zero components.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (leaf index, element index) of the worst component.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compare `backward` gradients of `loss_fn` against central differences on
/// every element of `leaves` (at most `max_per_leaf` evenly spaced elements
/// per leaf when set).
pub fn check_gradients(
    leaves: &[Tensor],
    loss_fn: impl Fn() -> Result<Tensor>,
    h: f32,
    max_per_leaf: Option<usize>,
) -> Result<GradCheckReport> {
    for leaf in leaves {
        leaf.zero_grad();
    }
    loss_fn()?.backward()?;
    let analytic: Vec<Vec<f32>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let stride = match max_per_leaf {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let orig = leaf.values()[idx];
            let (up, down) = (orig + h, orig - h);
            leaf.update_values(|v| v[idx] = up);
            let f_up = loss_fn()?.item() as f64;
            leaf.update_values(|v| v[idx] = down);
            let f_down = loss_fn()?.item() as f64;
            leaf.update_values(|v| v[idx] = orig);
            let numeric = (f_up - f_down) / (up as f64 - down as f64);
            let err = rel_error(analytic[li][idx] as f64, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (li, idx);
            }
        }
    }
    for leaf in leaves {
        leaf.zero_grad();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let x = Tensor::param(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = check_gradients(std::slice::from_ref(&x), || x.mul(&x)?.sum(), 1e-3, None).unwrap();
        assert!(ok.passes(1e-3), "{ok:?}");
        assert_eq!(ok.checked, 3);

        // a loss whose recorded graph ignores the true dependence on x
        let y = Tensor::param(&[1], vec![1.5]).unwrap();
        let wrong = check_gradients(
            std::slice::from_ref(&y),
            || {
                let frozen = y.detach();
                y.scalar_mul(0.0)?.add(&frozen.mul(&frozen)?)?.sum()
            },
            1e-3,
            None,
        )
        .unwrap();
        assert!(!wrong.passes(1e-3));
    }
}
