use super::Tensor;
use crate::error::{Error, Result};

/// Weights of a single LSTM cell. Gate columns are laid out as
/// `[input | forget | candidate | output]`, each `hidden` wide.
#[derive(Debug, Clone)]
pub struct LstmWeights {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl LstmWeights {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_ih, &self.w_hh, &self.bias]
    }
}

/// One step of a standard LSTM cell:
///
/// ```text
/// i, f, g, o = σ(·), σ(·), tanh(·), σ(·)  of  x·W_ih + h·W_hh + b
/// c' = f ⊙ c + i ⊙ g
/// h' = o ⊙ tanh(c')
/// ```
pub fn lstm_cell(x: &Tensor, h_prev: &Tensor, c_prev: &Tensor, w: &LstmWeights) -> Result<(Tensor, Tensor)> {
    let hidden = w.hidden();
    let batch = x.shape()[0];
    let ws = (w.w_ih.shape(), w.w_hh.shape(), w.bias.shape());
    if ws.0.len() != 2 || ws.0[1] != 4 * hidden || ws.1 != [hidden, 4 * hidden] || w.bias.numel() != 4 * hidden {
        return Err(Error::invalid_shape(
            "lstm_cell",
            ws.1,
            format!("weights inconsistent with hidden size {hidden}"),
        ));
    }
    if h_prev.shape() != [batch, hidden] || c_prev.shape() != [batch, hidden] {
        return Err(Error::shape("lstm_cell", h_prev.shape(), &[batch, hidden]));
    }
    if x.shape().len() != 2 || x.shape()[1] != w.input() {
        return Err(Error::shape("lstm_cell", x.shape(), ws.0));
    }

    let gates = x.linear(&w.w_ih, Some(&w.bias))?.add(&h_prev.matmul(&w.w_hh)?)?;
    let chunk = |k: usize| gates.slice(1, k * hidden, (k + 1) * hidden);
    let i = chunk(0)?.sigmoid()?;
    let f = chunk(1)?.sigmoid()?;
    let g = chunk(2)?.tanh()?;
    let o = chunk(3)?.sigmoid()?;
    let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
    let h = o.mul(&c.tanh()?)?;
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_weights(input: usize, hidden: usize) -> LstmWeights {
        LstmWeights {
            w_ih: Tensor::param(&[input, 4 * hidden], vec![0.0; input * 4 * hidden]).unwrap(),
            w_hh: Tensor::param(&[hidden, 4 * hidden], vec![0.0; hidden * 4 * hidden]).unwrap(),
            bias: Tensor::param(&[4 * hidden], vec![0.0; 4 * hidden]).unwrap(),
        }
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let w = zero_weights(3, 5);
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.1, -0.7]).unwrap();
        let (h, c) = lstm_cell(&x, &Tensor::zeros(&[2, 5]), &Tensor::zeros(&[2, 5]), &w).unwrap();
        assert!(h.to_vec().iter().all(|&v| v == 0.0));
        assert!(c.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_size_mismatch_rejected() {
        let w = zero_weights(3, 5);
        let x = Tensor::zeros(&[1, 3]);
        assert!(lstm_cell(&x, &Tensor::zeros(&[1, 4]), &Tensor::zeros(&[1, 4]), &w).is_err());
        let bad_input = Tensor::zeros(&[1, 2]);
        assert!(lstm_cell(&bad_input, &Tensor::zeros(&[1, 5]), &Tensor::zeros(&[1, 5]), &w).is_err());
    }
}
