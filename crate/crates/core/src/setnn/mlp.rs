use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softplus, Activation, Matrix, Rng};

/// Added after the softplus output map so positive outputs never reach 0.
pub const POSITIVE_FLOOR: f64 = 1e-6;

/// Layer widths from input to output; `[w]` alone is the identity map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub positive_output: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        MlpSpec {
            widths,
            activation,
            positive_output: false,
        }
    }

    pub fn identity(width: usize) -> Self {
        MlpSpec::new(vec![width], Activation::Identity)
    }

    pub fn with_positive_output(mut self, positive: bool) -> Self {
        self.positive_output = positive;
        self
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn is_identity(&self) -> bool {
        self.num_layers() == 0 && !self.positive_output
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("an MLP needs at least an input width"));
        }
        if let Some(i) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("layer width {i} is zero")));
        }
        if !matches!(self.activation, Activation::Relu | Activation::Tanh | Activation::Identity) {
            return Err(Error::config(format!(
                "hidden activation must be relu or tanh, got {:?}",
                self.activation
            )));
        }
        Ok(())
    }
}

/// Affine layer `y = x·W + b` with `W` of shape `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl MlpCache {
    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-limit, limit))
                    .collect();
                // biases spread the initial kinks across the input range
                let b = 1.0 / (fan_in as f64).sqrt();
                Dense {
                    weight: Matrix::new(fan_in, fan_out, data).expect("sized"),
                    bias: (0..fan_out).map(|_| rng.uniform_range(-b, b)).collect(),
                }
            })
            .collect();
        Ok(Mlp {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    fn activation_for(&self, layer: usize) -> Option<Activation> {
        (layer + 1 < self.layers.len()).then_some(self.spec.activation)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.spec.input_width() {
            return Err(Error::Shape {
                op: "mlp input",
                left: x.shape(),
                right: (self.spec.input_width(), self.spec.output_width()),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() + 1);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight)?;
            z.add_row_vector(&layer.bias)?;
            inputs.push(h);
            h = match self.activation_for(i) {
                Some(act) => act.forward(&z),
                None => z.clone(),
            };
            pre.push(z);
        }
        if self.spec.positive_output {
            pre.push(h.clone());
            h = h.map(|v| softplus(v) + POSITIVE_FLOOR);
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Returns per-layer gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Matrix) -> Result<(Vec<DenseGrad>, Matrix)> {
        let mut g = grad_out.clone();
        if self.spec.positive_output {
            let z = cache.pre.last().expect("positive output caches its input");
            g = g.hadamard(&Activation::Softplus.backward(z))?;
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if let Some(act) = self.activation_for(i) {
                g = g.hadamard(&act.backward(&cache.pre[i]))?;
            }
            let weight = cache.inputs[i].t_matmul(&g)?;
            let bias = g.column_sums();
            let next = g.matmul_t(&self.layers[i].weight)?;
            grads.push(DenseGrad { weight, bias });
            g = next;
        }
        grads.reverse();
        Ok((grads, g))
    }

    pub(crate) fn push_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
    }

    /// Reads parameters in `push_params` order; returns how many were used.
    pub(crate) fn load_params(&mut self, src: &[f64]) -> Result<usize> {
        let mut used = 0;
        for l in &mut self.layers {
            let nw = l.weight.data().len();
            let nb = l.bias.len();
            if src.len() < used + nw + nb {
                return Err(Error::Validation("parameter vector too short".into()));
            }
            l.weight.data_mut().copy_from_slice(&src[used..used + nw]);
            used += nw;
            l.bias.copy_from_slice(&src[used..used + nb]);
            used += nb;
        }
        Ok(used)
    }
}

impl DenseGrad {
    pub(crate) fn push(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(&self.bias);
    }
}
