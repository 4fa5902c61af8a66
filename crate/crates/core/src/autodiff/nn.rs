use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::{dot, Tensor};
use crate::error::{LpplsError, Result};

/// Weight initialization scheme. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, for layers followed by ReLU.
    KaimingUniform,
    /// `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`, for the linear output layer.
    LecunUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub init: Init,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, init: Init, rng: &mut impl Rng) -> Self {
        let bound = match init {
            Init::KaimingUniform => (6.0 / inputs as f64).sqrt(),
            Init::LecunUniform => (3.0 / inputs as f64).sqrt(),
        };
        let data = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::matrix(outputs, inputs, data).expect("sized above"),
            bias: Tensor::zeros(&[outputs]),
            init,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    fn predict_into(&self, x: &[f64], out: &mut Vec<f64>) {
        let inp = self.inputs();
        let w = self.weight.data();
        out.clear();
        out.extend(
            self.bias
                .data()
                .iter()
                .enumerate()
                .map(|(o, b)| dot(&w[o * inp..(o + 1) * inp], x) + b),
        );
    }
}

/// Fully connected network: ReLU after every layer but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Graph handles produced by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpNodes {
    pub output: NodeId,
    /// `[w0, b0, w1, b1, ...]`, matching [`Mlp::params`].
    pub params: Vec<NodeId>,
}

impl Mlp {
    /// `widths = [input, hidden.., output]`.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(LpplsError::ShapeMismatch(format!(
                "network widths {widths:?} need at least two positive entries"
            )));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i == last {
                    Init::LecunUniform
                } else {
                    Init::KaimingUniform
                };
                DenseLayer::new(w[0], w[1], init, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs()];
        w.extend(self.layers.iter().map(DenseLayer::outputs));
        w
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// Record the forward pass for input node `x` (`[in]` or `[batch, in]`).
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<MlpNodes> {
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(layer.weight.clone());
            let b = g.param(layer.bias.clone());
            params.extend([w, b]);
            h = g.linear(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(MlpNodes { output: h, params })
    }

    /// Plain forward pass for one input vector, without a graph.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs() {
            return Err(LpplsError::ShapeMismatch(format!(
                "network expects {} inputs, got {}",
                self.inputs(),
                x.len()
            )));
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.predict_into(&cur, &mut next);
            if i + 1 < self.layers.len() {
                for v in &mut next {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }
}
