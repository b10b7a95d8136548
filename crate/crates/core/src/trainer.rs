//! Joint optimization of both branches under the weighted total loss, plus
//! the single-task ablation that drops the super-resolution branch.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Gradients, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::layers::{self, LayerVars};
use crate::lmm::{AbundanceMap, EndmemberMatrix, HsiCube};
use crate::math;
use crate::sr::{self, NoiseInputs, SrConfig, SrGeneratorParams};
use crate::unmix::{self, Normalization, SharedDecoderParams, UnmixEncoderParams};
use crate::vca;

/// Per-term losses of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTerms {
    pub l1: f64,
    /// Absent when the super-resolution branch is not evaluated.
    pub l2: Option<f64>,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossRecord {
    pub iteration: usize,
    pub l1: f64,
    pub l2: Option<f64>,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn new(iteration: usize, t: LossTerms) -> Self {
        LossRecord { iteration, l1: t.l1, l2: t.l2, l3: t.l3, l4: t.l4, total: t.total }
    }
}

/// Convex weights `(α₁, α₂, α₃, α₄)` of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "[f64; 4]", into = "[f64; 4]"))]
pub struct ScalarizationWeights([f64; 4]);

impl ScalarizationWeights {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(alpha: [f64; 4]) -> Result<Self> {
        let w = ScalarizationWeights(alpha);
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_convex() {
            return Err(Error::Config(format!(
                "weights {:?} must be nonnegative and sum to 1 within {}",
                self.0,
                Self::SUM_TOLERANCE
            )));
        }
        Ok(())
    }

    pub fn is_convex(&self) -> bool {
        self.0.iter().all(|a| a.is_finite() && *a >= 0.0)
            && math::abs(self.0.iter().sum::<f64>() - 1.0) <= Self::SUM_TOLERANCE
    }

    /// Bypasses validation so that invalid inputs can still be reported on.
    pub fn unchecked(alpha: [f64; 4]) -> Self {
        ScalarizationWeights(alpha)
    }

    pub fn values(&self) -> [f64; 4] {
        self.0
    }
}

impl Default for ScalarizationWeights {
    fn default() -> Self {
        ScalarizationWeights([0.4, 0.4, 0.1, 0.1])
    }
}

impl TryFrom<[f64; 4]> for ScalarizationWeights {
    type Error = Error;
    fn try_from(a: [f64; 4]) -> Result<Self> {
        Self::new(a)
    }
}

impl From<ScalarizationWeights> for [f64; 4] {
    fn from(w: ScalarizationWeights) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OptimizerKind {
    Sgd,
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    #[default]
    Smile,
    /// Unmixing branch alone; `α₂` is treated as zero.
    SingleTask,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub weights: ScalarizationWeights,
    pub sr: SrConfig,
    pub seed: u64,
    pub endmember_projection: bool,
    pub mode: Mode,
    /// Hidden width of the unmixing encoder.
    pub hidden: usize,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            iterations: 4000,
            optimizer: OptimizerKind::Adam,
            weights: ScalarizationWeights::default(),
            sr: SrConfig::default(),
            seed: 0,
            endmember_projection: true,
            mode: Mode::Smile,
            hidden: 64,
            normalization: Normalization::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", self.learning_rate)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("encoder width must be positive".into()));
        }
        self.weights.validate()?;
        self.sr.validate()
    }

    /// The theory checks assume plain gradient steps on unconstrained parameters.
    pub fn validate_for_diagnostics(&self) -> Result<()> {
        self.validate()?;
        if self.optimizer != OptimizerKind::Sgd {
            return Err(Error::Config("diagnostics require the sgd optimizer".into()));
        }
        if self.endmember_projection {
            return Err(Error::Config("diagnostics require endmember projection to be off".into()));
        }
        Ok(())
    }

    /// Weights actually applied, with `α₂` zeroed in single-task mode.
    pub fn effective_weights(&self) -> [f64; 4] {
        let mut a = self.weights.values();
        if self.mode == Mode::SingleTask {
            a[1] = 0.0;
        }
        a
    }
}

/// Which side of the model a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Unmixing encoder.
    Specific1,
    /// Decoder weights, read by both branches.
    Shared,
    /// Super-resolution and kernel generators.
    Specific2,
}

/// Every learned tensor plus the frozen generator inputs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamState {
    pub encoder: UnmixEncoderParams,
    pub decoder: SharedDecoderParams,
    pub generator: SrGeneratorParams,
    pub noise: NoiseInputs,
}

impl ParamState {
    /// Learned tensors in canonical order: encoder layers, decoder, conv
    /// generator layers, kernel generator layers; weight before bias.
    pub fn tensors(&self) -> Vec<(ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.encoder.layers {
            out.push((ParamGroup::Specific1, &l.weight));
            out.push((ParamGroup::Specific1, &l.bias));
        }
        out.push((ParamGroup::Shared, &self.decoder.endmembers));
        for l in &self.generator.generator {
            out.push((ParamGroup::Specific2, &l.weight));
            out.push((ParamGroup::Specific2, &l.bias));
        }
        for l in &self.generator.kernel_net {
            out.push((ParamGroup::Specific2, &l.weight));
            out.push((ParamGroup::Specific2, &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.layers.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.decoder.endmembers);
        for l in self.generator.generator.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in self.generator.kernel_net.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.decoder.endmembers.len() + self.generator.parameter_count()
    }

    /// Entries of every tensor in `group`, concatenated in canonical order.
    pub fn group_vector(&self, group: ParamGroup) -> Vec<f64> {
        self.tensors().into_iter().filter(|(g, _)| *g == group).flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamState::group_vector`].
    pub fn set_group(&mut self, group: ParamGroup, values: &[f64]) -> Result<()> {
        let groups: Vec<ParamGroup> = self.tensors().into_iter().map(|(g, _)| g).collect();
        let want: usize = self.tensors().into_iter().filter(|(g, _)| *g == group).map(|(_, t)| t.len()).sum();
        if want != values.len() {
            return Err(dim_err!("{:?} holds {} values, got {}", group, want, values.len()));
        }
        let mut offset = 0;
        for (t, g) in self.tensors_mut().into_iter().zip(groups) {
            if g == group {
                let n = t.len();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    pub fn endmembers(&self) -> Result<EndmemberMatrix> {
        self.decoder.to_endmembers()
    }
}

/// Streams of the seeded generator used by initialization.
const ENCODER_STREAM: u64 = 11;
const GENERATOR_STREAM: u64 = 12;
const NOISE_STREAM: u64 = 13;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Endmembers from VCA, He-uniform weights, frozen noise inputs.
pub fn initialize(cube: &HsiCube, p: usize, cfg: &TrainConfig) -> Result<ParamState> {
    cfg.validate()?;
    let e = vca::vca_extract(cube, p, cfg.seed)?;
    let encoder = UnmixEncoderParams::init(cube.channels(), cfg.hidden, p, &mut stream(cfg.seed, ENCODER_STREAM));
    let generator = SrGeneratorParams::init(p, &cfg.sr, &mut stream(cfg.seed, GENERATOR_STREAM));
    let noise = NoiseInputs::sample(cube.height(), cube.width(), &cfg.sr, &mut stream(cfg.seed, NOISE_STREAM));
    Ok(ParamState { encoder, decoder: SharedDecoderParams::from_endmembers(&e), generator, noise })
}

/// Per-term weights of an objective; `None` leaves the term out of the graph.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Objective(pub [Option<f64>; 4]);

impl Objective {
    pub(crate) fn training(cfg: &TrainConfig) -> Self {
        let a = cfg.effective_weights();
        let l2 = if cfg.mode == Mode::Smile { Some(a[1]) } else { None };
        Objective([Some(a[0]), l2, Some(a[2]), Some(a[3])])
    }

    fn needs_encoder(&self) -> bool {
        self.0[0].is_some() || self.0[2].is_some() || self.0[3].is_some()
    }
}

pub(crate) struct Graph {
    pub tape: Tape,
    /// Canonical-order handles; `None` for tensors outside the graph.
    pub vars: Vec<Option<Var>>,
    pub terms: [Option<Var>; 4],
    pub total: Var,
}

impl Graph {
    pub fn value(&self, v: Option<Var>) -> Option<f64> {
        v.map(|v| self.tape.value(v).item())
    }

    pub fn terms(&self) -> LossTerms {
        LossTerms {
            l1: self.value(self.terms[0]).unwrap_or(0.0),
            l2: self.value(self.terms[1]),
            l3: self.value(self.terms[2]).unwrap_or(0.0),
            l4: self.value(self.terms[3]).unwrap_or(0.0),
            total: self.tape.value(self.total).item(),
        }
    }

    /// Gradients in canonical order, zero for tensors outside the graph.
    pub fn gradients(&self, params: &ParamState) -> Result<Vec<Option<Tensor>>> {
        let g: Gradients = self.tape.backward(self.total)?;
        Ok(self.vars.iter().zip(params.tensors()).map(|(v, _)| v.map(|v| g.of(v).clone())).collect())
    }
}

fn flatten(v: &[LayerVars]) -> impl Iterator<Item = Option<Var>> + '_ {
    v.iter().flat_map(|l| [Some(l.weight), Some(l.bias)])
}

pub(crate) fn build_graph(
    params: &ParamState,
    cube: &HsiCube,
    cfg: &TrainConfig,
    objective: Objective,
    trainable: bool,
) -> Result<Graph> {
    if cube.channels() != params.decoder.channels() {
        return Err(dim_err!("cube has {} bands, model has {}", cube.channels(), params.decoder.channels()));
    }
    let norm = cfg.normalization;
    let mut tape = Tape::new();
    let mut terms = [None; 4];
    let mut vars: Vec<Option<Var>> = Vec::new();

    let with_encoder = objective.needs_encoder();
    let with_sr = objective.0[1].is_some();

    let enc_vars = if with_encoder {
        layers::register_dense(&mut tape, &params.encoder.layers, trainable)
    } else {
        Vec::new()
    };
    let e = layers::put(&mut tape, &params.decoder.endmembers, trainable);
    let (gen_vars, knet_vars) = if with_sr {
        (
            layers::register_conv(&mut tape, &params.generator.generator, trainable),
            layers::register_dense(&mut tape, &params.generator.kernel_net, trainable),
        )
    } else {
        (Vec::new(), Vec::new())
    };

    if with_encoder {
        vars.extend(flatten(&enc_vars));
    } else {
        vars.extend(core::iter::repeat_n(None, 2 * params.encoder.layers.len()));
    }
    vars.push(Some(e));
    if with_sr {
        vars.extend(flatten(&gen_vars));
        vars.extend(flatten(&knet_vars));
    } else {
        let n = 2 * (params.generator.generator.len() + params.generator.kernel_net.len());
        vars.extend(core::iter::repeat_n(None, n));
    }

    if with_encoder {
        let x = tape.constant(cube.to_matrix());
        let a = unmix::encode_on_tape(&mut tape, x, &enc_vars)?;
        if objective.0[0].is_some() {
            let recon = unmix::decode_on_tape(&mut tape, a, e)?;
            terms[0] = Some(unmix::squared_error_on_tape(&mut tape, x, recon, norm)?);
        }
        if objective.0[2].is_some() {
            terms[2] = Some(unmix::l3_on_tape(&mut tape, a, norm)?);
        }
        if objective.0[3].is_some() {
            terms[3] = Some(unmix::l4_on_tape(&mut tape, a, norm));
        }
    }

    if with_sr {
        let observed = tape.constant(cube.to_image());
        let l_y = tape.constant(params.noise.l_y.clone());
        let l_k = tape.constant(params.noise.l_k.clone());
        let hr = sr::hr_abundance_on_tape(&mut tape, l_y, &gen_vars)?;
        let k = sr::kernel_on_tape(&mut tape, l_k, &knet_vars, params.generator.kernel_size()?)?;
        terms[1] = Some(sr::l2_on_tape(&mut tape, observed, hr, e, k, cfg.sr.scale, norm)?);
    }

    let mut total: Option<Var> = None;
    for (term, weight) in terms.iter().zip(objective.0) {
        if let (Some(t), Some(w)) = (term, weight) {
            let scaled = tape.scale(*t, w);
            total = Some(match total {
                None => scaled,
                Some(acc) => tape.add(acc, scaled)?,
            });
        }
    }
    let total = total.ok_or_else(|| Error::Config("objective has no terms".into()))?;
    Ok(Graph { tape, vars, terms, total })
}

const TERM_NAMES: [&str; 4] = ["l1", "l2", "l3", "l4"];

fn check_finite(terms: &LossTerms, iteration: usize) -> Result<()> {
    let values = [Some(terms.l1), terms.l2, Some(terms.l3), Some(terms.l4)];
    for (v, name) in values.iter().zip(TERM_NAMES) {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::Divergence { iteration, term: name, history: Vec::new() });
            }
        }
    }
    if !terms.total.is_finite() {
        return Err(Error::Divergence { iteration, term: "total", history: Vec::new() });
    }
    Ok(())
}

/// `Σ αᵢ Lᵢ` and the raw terms.
pub fn total_loss(params: &ParamState, cube: &HsiCube, cfg: &TrainConfig) -> Result<LossTerms> {
    cfg.weights.validate()?;
    let g = build_graph(params, cube, cfg, Objective::training(cfg), false)?;
    Ok(g.terms())
}

/// The total loss and its gradient for every tensor of
/// [`ParamState::tensors`], `None` where the mode leaves a tensor out.
pub fn loss_gradients(params: &ParamState, cube: &HsiCube, cfg: &TrainConfig) -> Result<(LossTerms, Vec<Option<Tensor>>)> {
    cfg.weights.validate()?;
    let g = build_graph(params, cube, cfg, Objective::training(cfg), true)?;
    Ok((g.terms(), g.gradients(params)?))
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimizerState {
    pub steps: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainState {
    pub params: ParamState,
    pub optimizer: OptimizerState,
    /// Steps taken so far.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(params: ParamState) -> Self {
        TrainState { params, optimizer: OptimizerState::default(), iteration: 0 }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(state: &mut TrainState, grads: &[Option<Tensor>], cfg: &TrainConfig) {
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in state.params.tensors_mut().into_iter().zip(grads) {
                if let Some(g) = g {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
        }
        OptimizerKind::Adam => {
            let opt = &mut state.optimizer;
            if opt.first.is_empty() {
                opt.first = state.params.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
                opt.second = opt.first.clone();
            }
            opt.steps += 1;
            let c1 = 1.0 - math::powi(BETA1, opt.steps as i32);
            let c2 = 1.0 - math::powi(BETA2, opt.steps as i32);
            let params = state.params.tensors_mut();
            for (((p, g), m), v) in params.into_iter().zip(grads).zip(opt.first.iter_mut()).zip(opt.second.iter_mut()) {
                let Some(g) = g else { continue };
                let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                for i in 0..pd.len() {
                    let gi = g.data()[i];
                    md[i] = BETA1 * md[i] + (1.0 - BETA1) * gi;
                    vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gi * gi;
                    let mhat = md[i] / c1;
                    let vhat = vd[i] / c2;
                    pd[i] -= lr * mhat / (math::sqrt(vhat) + ADAM_EPS);
                }
            }
        }
    }
    if cfg.endmember_projection {
        state.params.decoder.clamp_nonnegative();
    }
}

/// One forward/backward pass and one optimizer update. The record holds
/// the losses at the parameters before the update.
pub fn train_step(state: &mut TrainState, cube: &HsiCube, cfg: &TrainConfig) -> Result<LossRecord> {
    let graph = build_graph(&state.params, cube, cfg, Objective::training(cfg), true)?;
    let terms = graph.terms();
    check_finite(&terms, state.iteration)?;
    let grads = graph.gradients(&state.params)?;
    apply_update(state, &grads, cfg);
    let record = LossRecord::new(state.iteration, terms);
    state.iteration += 1;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub endmembers: EndmemberMatrix,
    pub abundance: AbundanceMap,
    pub history: Vec<LossRecord>,
    /// Unmixing-branch reconstruction.
    pub reconstruction: HsiCube,
    /// Super-resolved cube, abundance and kernel; absent in single-task mode.
    pub hr_cube: Option<HsiCube>,
    pub hr_abundance: Option<AbundanceMap>,
    pub kernel: Option<Tensor>,
    pub state: TrainState,
}

/// Runs `cfg.iterations` steps from [`initialize`].
pub fn train(cube: &HsiCube, p: usize, cfg: &TrainConfig) -> Result<TrainOutput> {
    let params = initialize(cube, p, cfg)?;
    train_from(TrainState::new(params), cube, cfg, |_, _| {})
}

/// Runs `cfg.iterations` steps from an existing state, reporting every record.
pub fn train_from(
    mut state: TrainState,
    cube: &HsiCube,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &LossRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut history = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        match train_step(&mut state, cube, cfg) {
            Ok(r) => {
                on_step(&state, &r);
                history.push(r);
            }
            Err(Error::Divergence { iteration, term, .. }) => {
                return Err(Error::Divergence { iteration, term, history });
            }
            Err(e) => return Err(e),
        }
    }
    finish(state, cube, cfg, history)
}

fn finish(state: TrainState, cube: &HsiCube, cfg: &TrainConfig, history: Vec<LossRecord>) -> Result<TrainOutput> {
    let params = &state.params;
    let abundance = unmix::encode_abundance(cube, &params.encoder)?;
    let reconstruction = unmix::decode(&abundance, &params.decoder)?;
    let (hr_cube, hr_abundance, kernel) = if cfg.mode == Mode::Smile {
        let hr_a = sr::generate_hr_abundance(&params.noise, &params.generator)?;
        let hr_y = unmix::decode(&hr_a, &params.decoder)?;
        (Some(hr_y), Some(hr_a), Some(sr::generate_kernel(&params.noise, &params.generator)?))
    } else {
        (None, None, None)
    };
    Ok(TrainOutput {
        endmembers: params.endmembers()?,
        abundance,
        history,
        reconstruction,
        hr_cube,
        hr_abundance,
        kernel,
        state,
    })
}
