//! Empirical checks of the multitask theory: task affinity, gradient
//! geometry between the two tasks, step dominance of the joint update, and
//! the over-parameterization preconditions.
//!
//! Task 1 is unmixing with loss `ℓ₁ = L₁`, task 2 is super-resolution with
//! `ℓ₂ = L₂`. `G₁` lives on (encoder, decoder) and `G₂` on (decoder, SR
//! generators); each is zero-padded on the other task's own coordinates, so
//! their inner product reduces to the decoder block.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lmm::HsiCube;
use crate::math;
use crate::trainer::{self, build_graph, LossRecord, Objective, ParamGroup, ParamState, TrainConfig, TrainState};

/// A task's loss and its gradient on its own and the shared coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradient {
    pub loss: f64,
    pub specific: Vec<f64>,
    pub shared: Vec<f64>,
}

impl TaskGradient {
    pub fn norm(&self) -> f64 {
        math::sqrt(math::dot(&self.specific, &self.specific) + math::dot(&self.shared, &self.shared))
    }
}

/// Two tasks coupled only through a shared parameter block, evaluated
/// around a fixed base point.
pub trait TwoTaskModel {
    /// Task-1 specific and shared parameters at the base point.
    fn base(&self) -> (Vec<f64>, Vec<f64>);
    fn loss1(&self, specific1: &[f64], shared: &[f64]) -> Result<f64>;
    /// Gradients at the base point.
    fn grad1(&self) -> Result<TaskGradient>;
    fn grad2(&self) -> Result<TaskGradient>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradientGeometry {
    /// `G₁·G₂`, which only the shared block contributes to.
    pub dot: f64,
    /// Cosine over the common (shared) coordinates, where both gradients live.
    pub cos: f64,
    /// `G₁·G₂ / (|G₁||G₂|)` with the full padded norms; task-specific
    /// coordinates only inflate the denominator.
    pub padded_cos: f64,
    /// `|G₁|` over (encoder, decoder).
    pub norm1: f64,
    /// `|G₂|` over (decoder, SR generators).
    pub norm2: f64,
    /// Set when a zero gradient made a cosine undefined; it is reported as 0.
    pub degenerate: bool,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        ((num / den).clamp(-1.0, 1.0), false)
    }
}

pub fn geometry_of(g1: &TaskGradient, g2: &TaskGradient) -> GradientGeometry {
    let dot = math::dot(&g1.shared, &g2.shared);
    let (norm1, norm2) = (g1.norm(), g2.norm());
    let (padded_cos, d1) = ratio(dot, norm1 * norm2);
    let (cos, d2) = ratio(dot, math::norm(&g1.shared) * math::norm(&g2.shared));
    GradientGeometry { dot, cos, padded_cos, norm1, norm2, degenerate: d1 || d2 }
}

pub fn gradient_geometry(model: &impl TwoTaskModel) -> Result<GradientGeometry> {
    Ok(geometry_of(&model.grad1()?, &model.grad2()?))
}

fn step(x: &[f64], eta: f64, g: &[f64]) -> Vec<f64> {
    x.iter().zip(g).map(|(x, g)| x - eta * g).collect()
}

fn step2(x: &[f64], eta: f64, a: &[f64], b: &[f64]) -> Vec<f64> {
    x.iter().zip(a).zip(b).map(|((x, a), b)| x - eta * (a + b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Affinity {
    /// `Λ₂→₁ = 1 − ℓ₁(after)/ℓ₁(before)`.
    pub lambda: f64,
    pub l1_before: f64,
    pub l1_after: f64,
}

fn affinity_from(model: &impl TwoTaskModel, g2: &TaskGradient, eta: f64) -> Result<Affinity> {
    let (s1, shared) = model.base();
    let before = model.loss1(&s1, &shared)?;
    if before == 0.0 {
        return Err(Error::Undefined("task affinity with zero task-1 loss at the base point".into()));
    }
    let after = model.loss1(&s1, &step(&shared, eta, &g2.shared))?;
    Ok(Affinity { lambda: 1.0 - after / before, l1_before: before, l1_after: after })
}

/// Affinity of task 2 on task 1: a plain gradient step of `ℓ₂` on the
/// shared parameters only, with task-1 parameters held fixed.
pub fn task_affinity(model: &impl TwoTaskModel, eta: f64) -> Result<Affinity> {
    affinity_from(model, &model.grad2()?, eta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepComparison {
    pub l1_base: f64,
    /// `ℓ₁` after the joint step `−η(G₁+G₂)`.
    pub l1_joint: f64,
    /// `ℓ₁` after the task-1 step `−ηG₁`.
    pub l1_single: f64,
    /// `l1_single − l1_joint`; positive when the joint step is better for task 1.
    pub margin: f64,
}

fn compare_from(model: &impl TwoTaskModel, g1: &TaskGradient, g2: &TaskGradient, eta: f64) -> Result<StepComparison> {
    let (s1, shared) = model.base();
    let l1_base = model.loss1(&s1, &shared)?;
    let s1_next = step(&s1, eta, &g1.specific);
    let l1_joint = model.loss1(&s1_next, &step2(&shared, eta, &g1.shared, &g2.shared))?;
    let l1_single = model.loss1(&s1_next, &step(&shared, eta, &g1.shared))?;
    Ok(StepComparison { l1_base, l1_joint, l1_single, margin: l1_single - l1_joint })
}

/// Task-1 loss after a joint step versus a task-1-only step from one point.
pub fn theorem2_check(model: &impl TwoTaskModel, eta: f64) -> Result<StepComparison> {
    compare_from(model, &model.grad1()?, &model.grad2()?, eta)
}

/// One row of the affinity trace.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AffinityRecord {
    pub iteration: usize,
    pub lambda: f64,
    /// `η|G₁|²/ℓ₁`.
    pub bound: f64,
    pub dot: f64,
    pub cos: f64,
    pub padded_cos: f64,
    pub l1_before: f64,
    pub l1_mtl_step: f64,
    pub l1_single_step: f64,
}

impl AffinityRecord {
    pub fn margin(&self) -> f64 {
        self.l1_single_step - self.l1_mtl_step
    }
}

/// Every diagnostic at one point, sharing the two gradient evaluations.
pub fn affinity_record(model: &impl TwoTaskModel, eta: f64, iteration: usize) -> Result<AffinityRecord> {
    let g1 = model.grad1()?;
    let g2 = model.grad2()?;
    let geo = geometry_of(&g1, &g2);
    let aff = affinity_from(model, &g2, eta)?;
    let cmp = compare_from(model, &g1, &g2, eta)?;
    Ok(AffinityRecord {
        iteration,
        lambda: aff.lambda,
        bound: eta * geo.norm1 * geo.norm1 / aff.l1_before,
        dot: geo.dot,
        cos: geo.cos,
        padded_cos: geo.padded_cos,
        l1_before: aff.l1_before,
        l1_mtl_step: cmp.l1_joint,
        l1_single_step: cmp.l1_single,
    })
}

/// The SMILE model around one parameter state.
pub struct SmileTasks<'a> {
    state: &'a ParamState,
    cube: &'a HsiCube,
    cfg: &'a TrainConfig,
}

impl<'a> SmileTasks<'a> {
    pub fn new(state: &'a ParamState, cube: &'a HsiCube, cfg: &'a TrainConfig) -> Self {
        SmileTasks { state, cube, cfg }
    }

    fn grad(&self, objective: Objective, specific: ParamGroup) -> Result<TaskGradient> {
        let graph = build_graph(self.state, self.cube, self.cfg, objective, true)?;
        let loss = graph.tape.value(graph.total).item();
        let grads = graph.gradients(self.state)?;
        let mut out = TaskGradient { loss, specific: Vec::new(), shared: Vec::new() };
        for ((group, t), g) in self.state.tensors().into_iter().zip(grads) {
            let target = if group == ParamGroup::Shared {
                &mut out.shared
            } else if group == specific {
                &mut out.specific
            } else {
                continue;
            };
            match g {
                Some(g) => target.extend_from_slice(g.data()),
                None => target.extend(core::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok(out)
    }
}

const TASK1: Objective = Objective([Some(1.0), None, None, None]);
const TASK2: Objective = Objective([None, Some(1.0), None, None]);

impl TwoTaskModel for SmileTasks<'_> {
    fn base(&self) -> (Vec<f64>, Vec<f64>) {
        (self.state.group_vector(ParamGroup::Specific1), self.state.group_vector(ParamGroup::Shared))
    }

    fn loss1(&self, specific1: &[f64], shared: &[f64]) -> Result<f64> {
        let mut s = self.state.clone();
        s.set_group(ParamGroup::Specific1, specific1)?;
        s.set_group(ParamGroup::Shared, shared)?;
        let graph = build_graph(&s, self.cube, self.cfg, TASK1, false)?;
        Ok(graph.tape.value(graph.total).item())
    }

    fn grad1(&self) -> Result<TaskGradient> {
        self.grad(TASK1, ParamGroup::Specific1)
    }

    fn grad2(&self) -> Result<TaskGradient> {
        self.grad(TASK2, ParamGroup::Specific2)
    }
}

/// Geometry at every iteration of an sgd run, plus full records at the
/// `sampled` iterations with probe step `probe_eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticTrace {
    /// `(iteration, geometry)` before each training step.
    pub geometry: Vec<(usize, GradientGeometry)>,
    pub records: Vec<AffinityRecord>,
    pub history: Vec<LossRecord>,
    pub state: TrainState,
}

impl DiagnosticTrace {
    /// Fraction of iterations with `G₁·G₂ ≥ 0`.
    pub fn nonconflict_fraction(&self) -> f64 {
        let ok = self.geometry.iter().filter(|(_, g)| g.dot >= 0.0).count();
        ok as f64 / self.geometry.len().max(1) as f64
    }

    pub fn mean_cos(&self) -> f64 {
        self.geometry.iter().map(|(_, g)| g.cos).sum::<f64>() / self.geometry.len().max(1) as f64
    }
}

/// `count` iterations spread evenly over `0..iterations`.
pub fn even_samples(iterations: usize, count: usize) -> Vec<usize> {
    if count == 0 || iterations == 0 {
        return Vec::new();
    }
    let count = count.min(iterations);
    (0..count).map(|i| i * iterations / count).collect()
}

pub fn diagnostic_run(
    state: TrainState,
    cube: &HsiCube,
    cfg: &TrainConfig,
    sampled: &[usize],
    probe_eta: f64,
) -> Result<DiagnosticTrace> {
    diagnostic_run_with(state, cube, cfg, sampled, probe_eta, |_, _| {})
}

/// As [`diagnostic_run`], reporting the geometry of every iteration.
pub fn diagnostic_run_with(
    mut state: TrainState,
    cube: &HsiCube,
    cfg: &TrainConfig,
    sampled: &[usize],
    probe_eta: f64,
    mut on_step: impl FnMut(usize, &GradientGeometry),
) -> Result<DiagnosticTrace> {
    cfg.validate_for_diagnostics()?;
    let mut geometry = Vec::with_capacity(cfg.iterations);
    let mut records = Vec::new();
    let mut history = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let tasks = SmileTasks::new(&state.params, cube, cfg);
        if sampled.contains(&t) {
            let r = affinity_record(&tasks, probe_eta, t)?;
            records.push(r);
        }
        let geo = gradient_geometry(&tasks)?;
        on_step(t, &geo);
        geometry.push((t, geo));
        match trainer::train_step(&mut state, cube, cfg) {
            Ok(r) => history.push(r),
            Err(Error::Divergence { iteration, term, .. }) => {
                return Err(Error::Divergence { iteration, term, history });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(DiagnosticTrace { geometry, records, history, state })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Lemma1Report {
    /// Learned parameter count `q`.
    pub parameters: usize,
    pub tasks: usize,
    /// `q ≥ 100·k`.
    pub overparameterized: bool,
    /// Fraction of traced steps with `G₁·G₂ ≥ 0`, when a trace was supplied.
    pub nonconflict_fraction: Option<f64>,
    pub weights_convex: bool,
}

pub fn lemma1_preconditions(state: &ParamState, cfg: &TrainConfig, trace: Option<&DiagnosticTrace>) -> Lemma1Report {
    let parameters = state.parameter_count();
    let tasks = 2;
    Lemma1Report {
        parameters,
        tasks,
        overparameterized: parameters >= 100 * tasks,
        nonconflict_fraction: trace.map(DiagnosticTrace::nonconflict_fraction),
        weights_convex: cfg.weights.is_convex(),
    }
}
