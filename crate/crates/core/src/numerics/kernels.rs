use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
    Identity,
}

/// `ln(1 + eˣ)`; linear above 30 where the correction is below f64 resolution.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`. ReLU uses 0 at the kink.
    #[inline]
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(x),
            Activation::Identity => 1.0,
        }
    }

    pub fn forward(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply(v))
    }

    pub fn backward(self, x: &Matrix) -> Matrix {
        x.map(|v| self.grad(v))
    }
}

/// `ln Σ exp(vᵢ)` with max-shift.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return Err(Error::domain("logsumexp of an empty vector"));
    }
    if m.is_infinite() {
        return Ok(m);
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

/// Order-fixed pairwise (tree) summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}
