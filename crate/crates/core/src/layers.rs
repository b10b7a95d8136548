//! Dense and convolutional layers shared by the two branches.

use alloc::vec::Vec;

use rand::Rng;

use crate::diffcore::{Activation, Tape, Tensor, Var};
use crate::error::Result;
use crate::math;

/// Fully connected layer, `weight` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Uniform in `±√(6/fan_in)`, zero bias.
    pub fn he_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = math::sqrt(6.0 / fan_in as f64);
        let weight = Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound));
        Dense { weight, bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// 2-D convolution, `weight` is `k × k × cin × cout`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn he_uniform<R: Rng>(k: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = math::sqrt(6.0 / (k * k * cin) as f64);
        let weight = Tensor::from_fn(&[k, k, cin, cout], |_| rng.random_range(-bound..bound));
        ConvLayer { weight, bias: Tensor::zeros(&[cout]) }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Weight and bias handles of one layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

pub(crate) fn put(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

pub fn register_dense(tape: &mut Tape, layers: &[Dense], trainable: bool) -> Vec<LayerVars> {
    layers
        .iter()
        .map(|l| LayerVars { weight: put(tape, &l.weight, trainable), bias: put(tape, &l.bias, trainable) })
        .collect()
}

pub fn register_conv(tape: &mut Tape, layers: &[ConvLayer], trainable: bool) -> Vec<LayerVars> {
    layers
        .iter()
        .map(|l| LayerVars { weight: put(tape, &l.weight, trainable), bias: put(tape, &l.bias, trainable) })
        .collect()
}

/// Rows of `x` through every layer; softplus after all but the last when
/// `last_linear`, after every layer otherwise.
pub fn mlp_forward(tape: &mut Tape, x: Var, layers: &[LayerVars], last_linear: bool) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        let z = tape.matmul(h, l.weight)?;
        h = tape.add_bias(z, l.bias)?;
        if !(last_linear && i + 1 == layers.len()) {
            h = tape.activation(h, Activation::Softplus);
        }
    }
    Ok(h)
}

/// Image through every conv layer with softplus after each.
pub fn conv_forward(tape: &mut Tape, x: Var, layers: &[LayerVars]) -> Result<Var> {
    let mut h = x;
    for l in layers {
        let z = tape.conv2d(h, l.weight, l.bias)?;
        h = tape.activation(z, Activation::Softplus);
    }
    Ok(h)
}
