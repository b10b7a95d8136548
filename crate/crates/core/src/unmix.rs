//! Unmixing branch: pixelwise encoder, shared linear decoder and the
//! reconstruction, nuclear-norm and sum-to-one losses.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{dim_err, Result};
use crate::layers::{self, Dense, LayerVars};
use crate::lmm::{AbundanceMap, EndmemberMatrix, HsiCube};

/// Regularization inside the nuclear norm's square roots.
pub const NUCLEAR_EPS: f64 = 1e-12;

/// How loss terms are scaled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Normalization {
    /// Squared errors averaged over entries, nuclear norm over `√(N·p)`,
    /// sum-to-one residual over `N`.
    #[default]
    Mean,
    /// Plain sums and the bare nuclear norm.
    RawSum,
}

/// Pixelwise MLP `C → h → h → p` with softplus after every layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnmixEncoderParams {
    pub layers: Vec<Dense>,
}

impl UnmixEncoderParams {
    pub fn init<R: Rng>(channels: usize, hidden: usize, p: usize, rng: &mut R) -> Self {
        UnmixEncoderParams {
            layers: vec![
                Dense::he_uniform(channels, hidden, rng),
                Dense::he_uniform(hidden, hidden, rng),
                Dense::he_uniform(hidden, p, rng),
            ],
        }
    }

    pub fn channels(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn p(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Dense::parameter_count).sum()
    }
}

/// Bias-free linear map `p → C`; its weight matrix is the endmember matrix.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SharedDecoderParams {
    /// `p × C`
    pub endmembers: Tensor,
}

impl SharedDecoderParams {
    pub fn from_endmembers(e: &EndmemberMatrix) -> Self {
        SharedDecoderParams { endmembers: e.to_tensor() }
    }

    pub fn to_endmembers(&self) -> Result<EndmemberMatrix> {
        EndmemberMatrix::from_tensor(&self.endmembers)
    }

    pub fn p(&self) -> usize {
        self.endmembers.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.endmembers.shape()[1]
    }

    pub fn clamp_nonnegative(&mut self) {
        for v in self.endmembers.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// `[N, C]` pixels to `[N, p]` abundances.
pub fn encode_on_tape(tape: &mut Tape, pixels: Var, layers: &[LayerVars]) -> Result<Var> {
    layers::mlp_forward(tape, pixels, layers, false)
}

/// `[N, p]` abundances times the `p × C` decoder.
pub fn decode_on_tape(tape: &mut Tape, abundance: Var, endmembers: Var) -> Result<Var> {
    tape.matmul(abundance, endmembers)
}

pub fn squared_error_on_tape(tape: &mut Tape, target: Var, estimate: Var, norm: Normalization) -> Result<Var> {
    match norm {
        Normalization::Mean => tape.mse(target, estimate),
        Normalization::RawSum => {
            let d = tape.sub(target, estimate)?;
            let sq = tape.square(d);
            Ok(tape.sum(sq))
        }
    }
}

pub fn l3_on_tape(tape: &mut Tape, abundance: Var, norm: Normalization) -> Result<Var> {
    let nuclear = tape.nuclear_norm(abundance, NUCLEAR_EPS)?;
    Ok(match norm {
        Normalization::Mean => {
            let s = tape.shape(abundance);
            let scale = 1.0 / crate::math::sqrt((s[0] * s[1]) as f64);
            tape.scale(nuclear, scale)
        }
        Normalization::RawSum => nuclear,
    })
}

pub fn l4_on_tape(tape: &mut Tape, abundance: Var, norm: Normalization) -> Var {
    let n = tape.shape(abundance)[0];
    let sums = tape.sum_last(abundance);
    let neg = tape.scale(sums, -1.0);
    let residual = tape.add_scalar(neg, 1.0);
    let magnitude = tape.abs(residual);
    let total = tape.sum(magnitude);
    match norm {
        Normalization::Mean => tape.scale(total, 1.0 / n as f64),
        Normalization::RawSum => total,
    }
}

fn check_channels(y: &HsiCube, params: &UnmixEncoderParams) -> Result<()> {
    if y.channels() != params.channels() {
        return Err(dim_err!("cube has {} bands, encoder expects {}", y.channels(), params.channels()));
    }
    Ok(())
}

pub fn encode_abundance(y: &HsiCube, params: &UnmixEncoderParams) -> Result<AbundanceMap> {
    check_channels(y, params)?;
    let mut tape = Tape::new();
    let x = tape.constant(y.to_matrix());
    let vars = layers::register_dense(&mut tape, &params.layers, false);
    let a = encode_on_tape(&mut tape, x, &vars)?;
    AbundanceMap::from_tensor(y.height(), y.width(), tape.value(a))
}

/// Same arithmetic as mixing with the decoder's endmembers and no noise.
pub fn decode(a: &AbundanceMap, decoder: &SharedDecoderParams) -> Result<HsiCube> {
    if a.p() != decoder.p() {
        return Err(dim_err!("abundance has {} endmembers, decoder has {}", a.p(), decoder.p()));
    }
    let mut tape = Tape::new();
    let av = tape.constant(a.to_matrix());
    let ev = tape.constant(decoder.endmembers.clone());
    let y = decode_on_tape(&mut tape, av, ev)?;
    HsiCube::from_tensor(a.height(), a.width(), tape.value(y))
}

/// Reconstruction loss of the unmixing branch.
pub fn loss_l1(
    y: &HsiCube,
    params: &UnmixEncoderParams,
    decoder: &SharedDecoderParams,
    norm: Normalization,
) -> Result<f64> {
    check_channels(y, params)?;
    if decoder.channels() != y.channels() || decoder.p() != params.p() {
        return Err(dim_err!("decoder {}×{} against encoder and cube", decoder.p(), decoder.channels()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(y.to_matrix());
    let vars = layers::register_dense(&mut tape, &params.layers, false);
    let a = encode_on_tape(&mut tape, x, &vars)?;
    let e = tape.constant(decoder.endmembers.clone());
    let recon = decode_on_tape(&mut tape, a, e)?;
    let l = squared_error_on_tape(&mut tape, x, recon, norm)?;
    Ok(tape.value(l).item())
}

pub fn loss_l3_nuclear(a: &AbundanceMap, norm: Normalization) -> Result<f64> {
    let mut tape = Tape::new();
    let av = tape.constant(a.to_matrix());
    let l = l3_on_tape(&mut tape, av, norm)?;
    Ok(tape.value(l).item())
}

pub fn loss_l4_asc(a: &AbundanceMap, norm: Normalization) -> f64 {
    let mut tape = Tape::new();
    let av = tape.constant(a.to_matrix());
    let l = l4_on_tape(&mut tape, av, norm);
    tape.value(l).item()
}
