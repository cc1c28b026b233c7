//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Weights are stored `(out_dim, in_dim)` row-major. Hidden layers use tanh,
//! the output layer is linear.

use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use super::tensor::Tensor2;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Gradient arrays in the same order as [`MlpParams::parts`] (or any other
/// parameter set exposing flat parts, such as a low-rank adapter).
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub parts: Vec<Vec<f64>>,
}

/// Activations recorded by [`MlpParams::forward_trace`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    outputs: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("network has at least one layer")
    }
}

impl MlpParams {
    /// Network with the given layer widths `[in, h1, ..., out]`, all weights
    /// and biases zero.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::build(dims, |_, _, _| 0.0)
    }

    /// Scaled Gaussian initialization (std `1/sqrt(fan_in)`), zero biases.
    pub fn random(dims: &[usize], stream: &mut RngStream) -> Result<Self> {
        Self::build(dims, |fan_in, _, _| stream.gauss() / (fan_in as f64).sqrt())
    }

    fn build(dims: &[usize], mut init: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(LabError::Shape(format!("invalid layer dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                Layer {
                    weight: Tensor2::from_fn(fan_out, fan_in, |r, c| init(fan_in, r, c)),
                    bias: vec![0.0; fan_out],
                    activation: if l + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Tanh
                    },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(LabError::Shape("network needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(LabError::Shape(format!("layer {l} bias length")));
            }
            if l > 0 && layers[l - 1].out_dim() != layer.in_dim() {
                return Err(LabError::Shape(format!("layer {l} does not chain")));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(LabError::NonFinite(format!("layer {l} parameters")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::out_dim).unwrap_or(0)
    }

    /// `[in, h1, ..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn num_params(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    /// Flat parameter arrays: `[W0, b0, W1, b1, ...]`.
    pub fn parts(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn parts_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let Layer { weight, bias, .. } = l;
                [weight.data_mut(), bias.as_mut_slice()]
            })
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.parts().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(LabError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for part in self.parts_mut() {
            part.copy_from_slice(&flat[off..off + part.len()]);
            off += part.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(LabError::Shape(format!(
                "network input dim {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.out_dim()];
            layer.weight.matvec_into(&cur, &mut next);
            for (n, b) in next.iter_mut().zip(&layer.bias) {
                *n = layer.activation.apply(*n + b);
            }
            cur = next;
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let prev = outputs.last().map(Vec::as_slice).unwrap_or(input);
            let mut next = vec![0.0; layer.out_dim()];
            layer.weight.matvec_into(prev, &mut next);
            for (n, b) in next.iter_mut().zip(&layer.bias) {
                *n = layer.activation.apply(*n + b);
            }
            outputs.push(next);
        }
        Ok(ForwardTrace {
            input: input.to_vec(),
            outputs,
        })
    }

    /// Gradients of `<upstream, output>` with respect to every parameter and
    /// the input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(GradBundle, Vec<f64>)> {
        let trace = self.forward_trace(input)?;
        let mut grads = GradBundle::zeros_like(self);
        let dinput = self.backward_accumulate(&trace, upstream, &mut grads)?;
        Ok((grads, dinput))
    }

    /// Adds the parameter gradients of `<upstream, output>` into `grads` and
    /// returns the input gradient.
    pub fn backward_accumulate(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        grads: &mut GradBundle,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(LabError::Shape(format!(
                "upstream length {} for output dim {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if grads.parts.len() != 2 * self.layers.len() {
            return Err(LabError::Shape("gradient bundle does not match network".into()));
        }
        let mut delta = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.outputs[l];
            for (d, &y) in delta.iter_mut().zip(out) {
                *d *= layer.activation.slope_from_output(y);
            }
            let prev = if l == 0 {
                trace.input.as_slice()
            } else {
                trace.outputs[l - 1].as_slice()
            };
            let in_dim = layer.in_dim();
            let gw = &mut grads.parts[2 * l];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &p) in gw[r * in_dim..(r + 1) * in_dim].iter_mut().zip(prev) {
                    *g += d * p;
                }
            }
            for (g, &d) in grads.parts[2 * l + 1].iter_mut().zip(&delta) {
                *g += d;
            }
            let mut next = vec![0.0; in_dim];
            layer.weight.matvec_t_into(&delta, &mut next);
            delta = next;
        }
        Ok(delta)
    }
}

impl GradBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self::zeros_for(&params.parts())
    }

    pub fn zeros_for(parts: &[&[f64]]) -> Self {
        Self {
            parts: parts.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradBundle) {
        for (a, b) in self.parts.iter_mut().zip(&other.parts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.parts.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.parts.iter().flatten().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.parts.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.parts.concat()
    }

    pub fn is_zero(&self) -> bool {
        self.parts.iter().flatten().all(|&x| x == 0.0)
    }

    /// True when part lengths equal `parts` lengths.
    pub fn congruent(&self, parts: &[&[f64]]) -> bool {
        self.parts.len() == parts.len()
            && self.parts.iter().zip(parts).all(|(g, p)| g.len() == p.len())
    }
}
