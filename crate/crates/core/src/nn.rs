//! Small building blocks shared by the tokenizer and the recommender.

use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, ParamId, ParamStore, Tape, Var};
use crate::error::{dim_err, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialization.
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, output_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weight = store.add(
            &format!("{name}.weight"),
            rng.uniform_tensor(&[input_dim, output_dim], -bound, bound),
        );
        let bias = store.add(
            &format!("{name}.bias"),
            rng.uniform_tensor(&[output_dim], -bound, bound),
        );
        Linear {
            weight,
            bias,
            input_dim,
            output_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    /// Tape-free evaluation of one row.
    pub fn eval_row(&self, store: &ParamStore, x: &[f64], out: &mut [f64]) {
        let w = store.value(self.weight).data();
        let b = store.value(self.bias).data();
        let n = self.output_dim;
        out.copy_from_slice(b);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, wij) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *o += xi * wij;
            }
        }
    }
}

/// Multilayer perceptron; the activation follows every layer but the last.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], activation: Activation, rng: &mut SeededRng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(dim_err(format!(
                "MLP expects width {}, got {}",
                self.input_dim(),
                tape.value(x).cols()
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.activation(h, self.activation);
            }
        }
        Ok(h)
    }

    /// Plain layer-by-layer evaluation of a batch, no tape.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(dim_err(format!(
                "MLP expects width {}, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut out = Vec::with_capacity(x.rows() * self.output_dim());
        let widest = self
            .layers
            .iter()
            .map(|l| l.output_dim.max(l.input_dim))
            .max()
            .unwrap();
        let mut cur = vec![0.0; widest];
        let mut next = vec![0.0; widest];
        for r in 0..x.rows() {
            cur[..x.cols()].copy_from_slice(x.row(r));
            for (i, layer) in self.layers.iter().enumerate() {
                let dst = &mut next[..layer.output_dim];
                layer.eval_row(store, &cur[..layer.input_dim], dst);
                if i + 1 < self.layers.len() {
                    for v in dst.iter_mut() {
                        *v = self.activation.apply(*v);
                    }
                }
                std::mem::swap(&mut cur, &mut next);
            }
            out.extend_from_slice(&cur[..self.output_dim()]);
        }
        Tensor::matrix(x.rows(), self.output_dim(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_and_plain_evaluation_agree() {
        let mut rng = SeededRng::new(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[5, 7, 6, 3], Activation::Silu, &mut rng);
        let x = rng.uniform_tensor(&[4, 5], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &store, xv).unwrap();
        let plain = mlp.eval(&store, &x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
