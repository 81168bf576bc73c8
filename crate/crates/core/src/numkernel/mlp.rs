use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{dot, sigmoid, DenseMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Where the caller's upstream gradient lives for the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradAt {
    /// Gradient with respect to the network output (after activation).
    Output,
    /// Gradient with respect to the final layer's pre-activation.
    PreActivation,
}

/// Feed-forward network. Parameters live in one flat buffer, laid out
/// layer by layer as `weight (outputs x inputs, row-major)` then `bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

pub type MlpParams = Mlp;

/// Per-layer outputs recorded during a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace always holds the input")
    }
}

impl Mlp {
    pub fn zeros(layers: Vec<LayerShape>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::config(format!(
                    "layer dimensions incompatible: {} outputs feed {} inputs",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        let n = layers.iter().map(LayerShape::param_count).sum();
        Ok(Self {
            layers,
            params: vec![0.0; n],
        })
    }

    /// Zero-initialised network with the given widths: `hidden` activation
    /// on every layer except the last, which uses `output`.
    pub fn build(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("need at least input and output widths"));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if i == last { output } else { hidden },
            })
            .collect();
        Self::zeros(layers)
    }

    pub fn from_layers(layers: Vec<(DenseMatrix, Vec<f64>, Activation)>) -> Result<Self> {
        let shapes = layers
            .iter()
            .map(|(w, b, act)| {
                if b.len() != w.rows() {
                    return Err(Error::config("bias length must equal weight rows"));
                }
                Ok(LayerShape {
                    inputs: w.cols(),
                    outputs: w.rows(),
                    activation: *act,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(shapes)?;
        let mut offset = 0;
        for (w, b, _) in &layers {
            net.params[offset..offset + w.as_slice().len()].copy_from_slice(w.as_slice());
            offset += w.as_slice().len();
            net.params[offset..offset + b.len()].copy_from_slice(b);
            offset += b.len();
        }
        if net.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite network parameters".into()));
        }
        Ok(net)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut offset = 0;
        for layer in &self.layers {
            let limit = if layer.inputs + layer.outputs == 0 {
                0.0
            } else {
                (6.0 / (layer.inputs + layer.outputs) as f64).sqrt()
            };
            let nw = layer.inputs * layer.outputs;
            for p in &mut self.params[offset..offset + nw] {
                *p = rng.random_range(-limit..=limit);
            }
            offset += nw;
            self.params[offset..offset + layer.outputs].fill(0.0);
            offset += layer.outputs;
        }
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset_of(&self, layer: usize) -> usize {
        self.layers[..layer].iter().map(LayerShape::param_count).sum()
    }

    pub fn weight(&self, layer: usize) -> DenseMatrix {
        let shape = self.layers[layer];
        let off = self.offset_of(layer);
        let data = self.params[off..off + shape.inputs * shape.outputs].to_vec();
        DenseMatrix::from_vec(shape.outputs, shape.inputs, data).expect("shape is consistent")
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let shape = self.layers[layer];
        let off = self.offset_of(layer) + shape.inputs * shape.outputs;
        &self.params[off..off + shape.outputs]
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.activations.pop().unwrap())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_dim() {
            return Err(Error::config(format!(
                "network expects input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let mut offset = 0;
        for layer in &self.layers {
            let x = activations.last().unwrap();
            let nw = layer.inputs * layer.outputs;
            let w = &self.params[offset..offset + nw];
            let b = &self.params[offset + nw..offset + nw + layer.outputs];
            let y: Vec<f64> = (0..layer.outputs)
                .map(|r| {
                    let pre = dot(&w[r * layer.inputs..(r + 1) * layer.inputs], x) + b[r];
                    layer.activation.apply(pre)
                })
                .collect();
            activations.push(y);
            offset += layer.param_count();
        }
        Ok(Trace { activations })
    }

    /// Backpropagate `upstream` through the network recorded in `trace`.
    ///
    /// Parameter gradients are accumulated (added) into `grad_params`, which
    /// shares the layout of `params()`. Returns the gradient with respect to
    /// the input when `want_input` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        upstream: &[f64],
        at: GradAt,
        grad_params: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        debug_assert_eq!(grad_params.len(), self.params.len());
        debug_assert_eq!(upstream.len(), self.output_dim());
        let mut delta = upstream.to_vec();
        let mut offset = self.params.len();
        let n_layers = self.layers.len();
        for l in (0..n_layers).rev() {
            let layer = self.layers[l];
            offset -= layer.param_count();
            let y = &trace.activations[l + 1];
            let x = &trace.activations[l];
            let skip_act = l == n_layers - 1 && at == GradAt::PreActivation;
            if !skip_act && layer.activation != Activation::Identity {
                for (d, &yv) in delta.iter_mut().zip(y) {
                    *d *= layer.activation.derivative_from_output(yv);
                }
            }
            let nw = layer.inputs * layer.outputs;
            {
                let (gw, gb) = grad_params[offset..offset + nw + layer.outputs].split_at_mut(nw);
                for (r, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[r] += d;
                    let row = &mut gw[r * layer.inputs..(r + 1) * layer.inputs];
                    for (g, &xv) in row.iter_mut().zip(x) {
                        if xv != 0.0 {
                            *g += d * xv;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                return None;
            }
            let w = &self.params[offset..offset + nw];
            let mut next = vec![0.0; layer.inputs];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (n, &wv) in next.iter_mut().zip(&w[r * layer.inputs..(r + 1) * layer.inputs]) {
                    *n += d * wv;
                }
            }
            delta = next;
        }
        Some(delta)
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum()
    }
}

/// Convenience wrapper matching the free-function form of a forward pass.
pub fn mlp_forward(params: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
    params.forward(input)
}
