//! Composite PINN loss and the three-tier training loop.
//!
//! A fit minimises `L_ODE + γ·L_data` where `L_ODE` is the mean squared
//! residual of the smoothed kinetic ODE at collocation points and `L_data` the
//! (optionally weighted) mean squared misfit at the acquisition times. Both
//! terms are made dimensionless before they are combined: the ODE residual is
//! multiplied by the collocation spacing and divided by `S_norm` (signal change
//! per collocation step), and the data misfit is divided by `S_norm`.
//!
//! Training runs in three tiers: a forward phase with the physical parameters
//! frozen, a joint inverse phase, and a low learning-rate fine-tuning phase.
//! Adam moments restart at the beginning of each tier.
//!
//! The engine here is branch-generic: the baseline PINN is one branch, the
//! multi-branch model in [`crate::supinn`] runs several branches that share a
//! single `T1b` trainable.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::{record_positive, MlpPinn, NetVars, Physical, TrainablePhysical, RAW_BOUND};
use crate::signal::{
    evaluate_ode_rhs_smoothed, AcquisitionSpec, HaemodynamicParams, SmoothingConfig,
    DEFAULT_TAU_MS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tier {
    pub iterations: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the data term.
    pub gamma: f64,
    /// Uniform collocation points over `[0, last acquisition time]`, endpoints included.
    pub n_collocation: usize,
    /// Forward, inverse and fine-tuning phases.
    pub tiers: [Tier; 3],
    pub adam: AdamConfig,
    pub smoothing: SmoothingConfig,
    pub tau: f64,
    /// Initial arrival time, ms.
    pub init_at: f64,
    /// Initial blood T1, ms.
    pub init_t1b: f64,
    /// Admissible CBF amplitudes.
    pub cbf_bounds: (f64, f64),
    /// Admissible arrival times, ms.
    pub at_bounds: (f64, f64),
    /// Admissible blood T1, ms.
    pub t1b_bounds: (f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.005,
            n_collocation: 121,
            tiers: [
                Tier {
                    iterations: 10_000,
                    learning_rate: 1e-3,
                },
                Tier {
                    iterations: 30_000,
                    learning_rate: 1e-3,
                },
                Tier {
                    iterations: 10_000,
                    learning_rate: 1e-4,
                },
            ],
            adam: AdamConfig::default(),
            smoothing: SmoothingConfig::default(),
            tau: DEFAULT_TAU_MS,
            init_at: 900.0,
            init_t1b: 1800.0,
            cbf_bounds: (1e-3, 0.1),
            at_bounds: (1.0, 3600.0),
            t1b_bounds: (1000.0, 3000.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.n_collocation < 2 {
            return Err(Error::config("need at least 2 collocation points"));
        }
        for (i, tier) in self.tiers.iter().enumerate() {
            if tier.iterations == 0 {
                return Err(Error::config(format!("tier {} has zero iterations", i + 1)));
            }
            if !(tier.learning_rate > 0.0 && tier.learning_rate.is_finite()) {
                return Err(Error::config(format!("tier {} learning rate must be > 0", i + 1)));
            }
        }
        SmoothingConfig::new(self.smoothing.sharpness_k)?;
        for (name, v) in [("tau", self.tau), ("init_at", self.init_at), ("init_t1b", self.init_t1b)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, (lo, hi)) in [
            ("cbf_bounds", self.cbf_bounds),
            ("at_bounds", self.at_bounds),
            ("t1b_bounds", self.t1b_bounds),
        ] {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::config(format!("{name} must satisfy 0 < lo < hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Total number of optimiser steps.
    pub fn horizon(&self) -> usize {
        self.tiers.iter().map(|t| t.iterations).sum()
    }

    /// Same learning rates with new per-tier iteration counts.
    pub fn with_iterations(mut self, counts: [usize; 3]) -> Self {
        for (tier, n) in self.tiers.iter_mut().zip(counts) {
            tier.iterations = n;
        }
        self
    }
}

/// Outcome of fitting one voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: HaemodynamicParams,
    /// Objective value per iteration (PINN) or per accepted step (least squares).
    pub loss_history: Vec<f64>,
    /// Model output at the acquisition times.
    pub predicted_signal: Vec<f64>,
    pub converged: bool,
    /// Seconds. Not serialised, so result files stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

/// Anything that can report `ŝ` and `dŝ/dt` at a set of times.
pub trait SignalApproximator {
    fn evaluate(&self, times: &[f64]) -> (Vec<f64>, Vec<f64>);
}

impl SignalApproximator for MlpPinn {
    fn evaluate(&self, times: &[f64]) -> (Vec<f64>, Vec<f64>) {
        MlpPinn::evaluate(self, times)
    }
}

/// `(1/N_O) Σ (dŝ/dt(tᵢ) − f(tᵢ))²` in raw units, `f` being the smoothed ODE.
pub fn ode_residual_loss(
    approx: &impl SignalApproximator,
    params: &HaemodynamicParams,
    collocation_times: &[f64],
    smoothing: &SmoothingConfig,
) -> Result<f64> {
    params.validate()?;
    if collocation_times.is_empty() {
        return Err(Error::Usage("no collocation points".into()));
    }
    let (_, ds) = approx.evaluate(collocation_times);
    let mut acc = 0.0;
    for (&t, d) in collocation_times.iter().zip(ds) {
        let r = d - evaluate_ode_rhs_smoothed(params, t, smoothing)?;
        acc += r * r;
    }
    Ok(acc / collocation_times.len() as f64)
}

/// `(1/N_D) Σ (wᵢ·|ŝ(tᵢ) − S(tᵢ)|)²` in raw units.
pub fn data_loss(
    approx: &impl SignalApproximator,
    spec: &AcquisitionSpec,
    series: &[f64],
    weights: &[f64],
) -> Result<f64> {
    if series.len() != spec.n_points() || weights.len() != series.len() {
        return Err(Error::Usage(format!(
            "data loss needs equal lengths (times {}, series {}, weights {})",
            spec.n_points(),
            series.len(),
            weights.len()
        )));
    }
    let (s_hat, _) = approx.evaluate(spec.times());
    let acc: f64 = s_hat
        .iter()
        .zip(series)
        .zip(weights)
        .map(|((p, m), w)| (w * (p - m).abs()).powi(2))
        .sum();
    Ok(acc / series.len() as f64)
}

/// Uniform collocation grid over `[0, t_end]` with both endpoints.
pub fn collocation_grid(n: usize, t_end: f64) -> Vec<f64> {
    let step = t_end / (n - 1) as f64;
    (0..n).map(|i| step * i as f64).collect()
}

/// Records the smoothed right-hand side at constant `times` (an `n×1` column).
pub fn record_smoothed_rhs(
    tape: &mut Tape,
    times: Var,
    cbf: Var,
    at: Var,
    t1b: Var,
    tau: f64,
    smoothing: &SmoothingConfig,
) -> Var {
    let n = tape.value(times).rows();
    let k = smoothing.sharpness_k;
    let cbf = tape.broadcast(cbf, n, 1);
    let at = tape.broadcast(at, n, 1);
    let t1b = tape.broadcast(t1b, n, 1);

    let decay = tape.div(times, t1b);
    let decay = tape.neg(decay);
    let decay = tape.exp(decay);
    let amp = tape.mul(cbf, decay);

    let since = tape.sub(times, at);
    let arrive = tape.scale(since, k);
    let arrive = tape.tanh(arrive);
    let arrive = tape.offset(arrive, 1.0);
    let arrive = tape.scale(arrive, 0.5);
    let past = tape.offset(since, -tau);
    let past = tape.scale(past, k);
    let past = tape.tanh(past);
    let past = tape.offset(past, 1.0);
    let g2 = tape.scale(past, 0.5);
    // σ(AT + τ − t) = 1 − σ(t − AT − τ)
    let before_end = tape.neg(g2);
    let before_end = tape.offset(before_end, 1.0);
    let g1 = tape.mul(arrive, before_end);

    let frac = tape.div(since, t1b);
    let frac = tape.neg(frac);
    let frac = tape.offset(frac, 1.0);
    let rising = tape.mul(amp, frac);
    let falling = tape.div(amp, t1b);
    let falling = tape.scale(falling, -tau);

    let a = tape.mul(g1, rising);
    let b = tape.mul(g2, falling);
    tape.add(a, b)
}

/// Records `mean((dŝ/dt − f)²)` with the residual multiplied by `scale` first.
pub fn record_ode_loss(tape: &mut Tape, ds_hat: Var, rhs: Var, scale: f64) -> Var {
    let r = tape.sub(ds_hat, rhs);
    let r = tape.scale(r, scale);
    let r = tape.square(r);
    tape.mean(r)
}

/// Records `mean((w·(ŝ − S))²)` with the misfit multiplied by `scale` first.
pub fn record_data_loss(
    tape: &mut Tape,
    s_hat: Var,
    series: &[f64],
    weights: &[f64],
    scale: f64,
) -> Var {
    let data = tape.constant(Tensor::column(series.to_vec()));
    let w = tape.constant(Tensor::column(weights.iter().map(|w| w * scale).collect()));
    let r = tape.sub(s_hat, data);
    let r = tape.mul(w, r);
    let r = tape.square(r);
    tape.mean(r)
}

/// Evaluation points shared by the ODE and data terms: the collocation grid
/// plus any acquisition time that is not already on it.
#[derive(Debug, Clone)]
pub(crate) struct PointSet {
    pub times: Vec<f64>,
    pub colloc: Vec<usize>,
    pub data: Vec<usize>,
    /// Collocation spacing, ms.
    pub step: f64,
}

impl PointSet {
    pub fn new(n_collocation: usize, t_end: f64, data_times: &[f64]) -> Self {
        let mut times = collocation_grid(n_collocation, t_end);
        let colloc = (0..times.len()).collect();
        let mut data = Vec::with_capacity(data_times.len());
        for &t in data_times {
            let tol = 1e-9 * t_end;
            match times[..n_collocation].iter().position(|&c| (c - t).abs() <= tol) {
                Some(i) => {
                    times[i] = t;
                    data.push(i);
                }
                None => {
                    data.push(times.len());
                    times.push(t);
                }
            }
        }
        Self {
            times,
            colloc,
            data,
            step: t_end / (n_collocation - 1) as f64,
        }
    }

    fn colloc_is_everything(&self) -> bool {
        self.colloc.len() == self.times.len()
    }
}

/// One network with its data and local physical trainables.
#[derive(Debug, Clone)]
pub(crate) struct Branch {
    pub net: MlpPinn,
    pub series: Vec<f64>,
    pub weights: Vec<f64>,
    /// `cbf` and `at` (entries 0 and 1). Entry 2 is unused in multi-branch runs.
    pub physical: TrainablePhysical,
}

/// The whole trainable state of a run.
#[derive(Debug, Clone)]
pub(crate) struct Model {
    pub branches: Vec<Branch>,
    pub raw_t1b: f64,
    pub t1b_scale: f64,
    pub t1b_frozen: bool,
}

impl Model {
    pub fn t1b(&self) -> f64 {
        self.t1b_scale * self.raw_t1b.exp()
    }

    pub fn set_physical_frozen(&mut self, frozen: bool) {
        for b in &mut self.branches {
            b.physical.frozen = [frozen; 3];
        }
        self.t1b_frozen = frozen;
    }

    pub fn branch_params(&self, i: usize, tau: f64) -> HaemodynamicParams {
        let p = &self.branches[i].physical;
        HaemodynamicParams {
            cbf: p.cbf(),
            at: p.at(),
            t1b: self.t1b(),
            tau,
        }
    }
}

/// Tape handles produced by [`record_objective`].
pub(crate) struct Recorded {
    pub total: Var,
    pub nets: Vec<NetVars>,
    pub cbf_raw: Vec<Var>,
    pub at_raw: Vec<Var>,
    pub t1b_raw: Var,
}

/// Records the full objective `Σ_b (L_ODE,b + γ·L_data,b)` on a fresh tape.
pub(crate) fn record_objective(
    tape: &mut Tape,
    model: &Model,
    points: &PointSet,
    cfg: &TrainConfig,
    train_nets: bool,
) -> Recorded {
    let put = |tape: &mut Tape, v: f64, frozen: bool| {
        if frozen {
            tape.constant(Tensor::scalar(v))
        } else {
            tape.leaf(Tensor::scalar(v))
        }
    };
    let t1b_raw = put(tape, model.raw_t1b, model.t1b_frozen);
    let t1b = record_positive(tape, t1b_raw, model.t1b_scale);
    let all_times = tape.constant(Tensor::column(points.times.clone()));
    let colloc_times = if points.colloc_is_everything() {
        all_times
    } else {
        tape.gather(all_times, &points.colloc)
    };

    let mut total = None;
    let mut nets = Vec::with_capacity(model.branches.len());
    let mut cbf_raw = Vec::with_capacity(model.branches.len());
    let mut at_raw = Vec::with_capacity(model.branches.len());
    for branch in &model.branches {
        let phys = &branch.physical;
        let c_raw = put(tape, phys.raw[Physical::Cbf as usize], phys.frozen[Physical::Cbf as usize]);
        let a_raw = put(tape, phys.raw[Physical::At as usize], phys.frozen[Physical::At as usize]);
        let cbf = record_positive(tape, c_raw, phys.scale[Physical::Cbf as usize]);
        let at = record_positive(tape, a_raw, phys.scale[Physical::At as usize]);

        let vars = branch.net.record(tape, train_nets);
        let (s_hat, ds_hat) = branch.net.record_outputs(tape, &vars, &points.times);
        let ds_colloc = if points.colloc_is_everything() {
            ds_hat
        } else {
            tape.gather(ds_hat, &points.colloc)
        };
        let rhs = record_smoothed_rhs(tape, colloc_times, cbf, at, t1b, cfg.tau, &cfg.smoothing);
        let net = &branch.net;
        let ode = record_ode_loss(tape, ds_colloc, rhs, points.step / net.s_norm);
        let s_data = tape.gather(s_hat, &points.data);
        let data = record_data_loss(tape, s_data, &branch.series, &branch.weights, 1.0 / net.s_norm);
        let data = tape.scale(data, cfg.gamma);
        let loss = tape.add(ode, data);
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss),
        });
        nets.push(vars);
        cbf_raw.push(c_raw);
        at_raw.push(a_raw);
    }
    Recorded {
        total: total.expect("model has at least one branch"),
        nets,
        cbf_raw,
        at_raw,
        t1b_raw,
    }
}

/// Gradient of the objective for every unfrozen trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// Per branch, in `[w1, b1, w2, b2, w3, b3]` order.
    pub nets: Vec<[Tensor; 6]>,
    /// Per branch `∂L/∂raw_cbf` and `∂L/∂raw_at`; `None` when frozen.
    pub cbf: Vec<Option<f64>>,
    pub at: Vec<Option<f64>>,
    pub t1b: Option<f64>,
    pub loss: f64,
}

fn collect(model: &Model, rec: &Recorded, grads: &Gradients, loss: f64) -> Result<GradientSet> {
    let mut nets = Vec::with_capacity(rec.nets.len());
    for v in &rec.nets {
        let g = |x: Var| grads.wrt(x).cloned();
        nets.push([g(v.w1)?, g(v.b1)?, g(v.w2)?, g(v.b2)?, g(v.w3)?, g(v.b3)?]);
    }
    let scalar = |frozen: bool, v: Var| -> Result<Option<f64>> {
        if frozen {
            Ok(None)
        } else {
            Ok(Some(grads.wrt(v)?.item()))
        }
    };
    let mut cbf = Vec::new();
    let mut at = Vec::new();
    for (b, branch) in model.branches.iter().enumerate() {
        cbf.push(scalar(branch.physical.frozen[Physical::Cbf as usize], rec.cbf_raw[b])?);
        at.push(scalar(branch.physical.frozen[Physical::At as usize], rec.at_raw[b])?);
    }
    Ok(GradientSet {
        nets,
        cbf,
        at,
        t1b: scalar(model.t1b_frozen, rec.t1b_raw)?,
        loss,
    })
}

pub(crate) fn objective_gradients(
    model: &Model,
    points: &PointSet,
    cfg: &TrainConfig,
) -> Result<GradientSet> {
    let mut tape = Tape::new();
    let rec = record_objective(&mut tape, model, points, cfg, true);
    let loss = tape.value(rec.total).item();
    let grads = tape.backward(rec.total)?;
    collect(model, &rec, &grads, loss)
}

/// Objective value computed directly, without recording a graph.
///
/// Apart from the network kernels it shares no arithmetic with
/// [`record_objective`], which makes it an independent reference for
/// finite-difference checks of the recorded gradients.
pub(crate) fn objective_value(model: &Model, points: &PointSet, cfg: &TrainConfig) -> f64 {
    let positive = |raw: f64, scale: f64| scale * raw.exp();
    let t1b = positive(model.raw_t1b, model.t1b_scale);
    let mut total = 0.0;
    for branch in &model.branches {
        let phys = &branch.physical;
        let params = HaemodynamicParams {
            cbf: positive(phys.raw[Physical::Cbf as usize], phys.scale[Physical::Cbf as usize]),
            at: positive(phys.raw[Physical::At as usize], phys.scale[Physical::At as usize]),
            t1b,
            tau: cfg.tau,
        };
        let (s_hat, ds_hat) = branch.net.evaluate(&points.times);
        let ode_scale = points.step / branch.net.s_norm;
        let ode: f64 = points
            .colloc
            .iter()
            .map(|&i| {
                let rhs = evaluate_ode_rhs_smoothed(&params, points.times[i], &cfg.smoothing).unwrap_or(f64::NAN);
                ((ds_hat[i] - rhs) * ode_scale).powi(2)
            })
            .sum::<f64>()
            / points.colloc.len() as f64;
        let data: f64 = points
            .data
            .iter()
            .zip(&branch.series)
            .zip(&branch.weights)
            .map(|((&i, y), w)| (w / branch.net.s_norm * (s_hat[i] - y)).powi(2))
            .sum::<f64>()
            / points.data.len() as f64;
        total += ode + cfg.gamma * data;
    }
    total
}

/// Adam with one moment buffer per trainable slot.
struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.step = 0;
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, slot: usize, lr: f64, params: &mut [f64], grads: &[f64]) {
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[slot].len() != params.len() {
            self.m[slot] = vec![0.0; params.len()];
            self.v[slot] = vec![0.0; params.len()];
        }
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + epsilon);
        }
    }
}

/// Raw interval for a parameter `scale·exp(raw)` restricted to `bounds`.
fn raw_interval(scale: f64, bounds: (f64, f64)) -> (f64, f64) {
    let lo = (bounds.0 / scale).ln().max(-RAW_BOUND);
    let hi = (bounds.1 / scale).ln().min(RAW_BOUND);
    (lo, hi.max(lo))
}

fn apply(adam: &mut Adam, model: &mut Model, g: &GradientSet, lr: f64, cfg: &TrainConfig) {
    adam.begin_step();
    let mut slot = 0;
    for (b, branch) in model.branches.iter_mut().enumerate() {
        for (param, grad) in branch.net.tensors_mut().into_iter().zip(&g.nets[b]) {
            adam.update(slot, lr, param.data_mut(), grad.data());
            slot += 1;
        }
        for (which, grad) in [(Physical::Cbf, g.cbf[b]), (Physical::At, g.at[b])] {
            if let Some(grad) = grad {
                let i = which as usize;
                let (lo, hi) = match which {
                    Physical::At => raw_interval(branch.physical.scale[i], cfg.at_bounds),
                    _ => raw_interval(branch.physical.scale[i], cfg.cbf_bounds),
                };
                let raw = &mut branch.physical.raw[i];
                let mut v = [*raw];
                adam.update(slot, lr, &mut v, &[grad]);
                *raw = v[0].clamp(lo, hi);
            }
            slot += 1;
        }
    }
    if let Some(grad) = g.t1b {
        let mut v = [model.raw_t1b];
        adam.update(slot, lr, &mut v, &[grad]);
        let (lo, hi) = raw_interval(model.t1b_scale, cfg.t1b_bounds);
        model.raw_t1b = v[0].clamp(lo, hi);
    }
}

/// Runs the three tiers in place. Returns the objective per iteration.
pub(crate) fn train(model: &mut Model, points: &PointSet, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(cfg.horizon());
    let mut adam = Adam::new(cfg.adam);
    for tier_index in 0..cfg.tiers.len() {
        run_tier(model, points, cfg, tier_index, &mut adam, &mut history)?;
    }
    model.set_physical_frozen(false);
    Ok(history)
}

/// One tier: the first freezes the physical parameters, later ones train everything.
fn run_tier(
    model: &mut Model,
    points: &PointSet,
    cfg: &TrainConfig,
    tier_index: usize,
    adam: &mut Adam,
    history: &mut Vec<f64>,
) -> Result<()> {
    let tier = cfg.tiers[tier_index];
    model.set_physical_frozen(tier_index == 0);
    adam.reset();
    for _ in 0..tier.iterations {
        let g = objective_gradients(model, points, cfg)?;
        if !g.loss.is_finite() {
            let p = model.branch_params(0, cfg.tau);
            return Err(Error::NonFinite {
                iteration: history.len(),
                cbf: p.cbf,
                at: p.at,
                t1b: p.t1b,
            });
        }
        history.push(g.loss);
        apply(adam, model, &g, tier.learning_rate, cfg);
    }
    Ok(())
}

/// Peak-based CBF starting value: `peak / (τ·e^(−t_peak / T1b_init))`.
pub(crate) fn cbf_initial_guess(series: &[f64], times: &[f64], tau: f64, t1b: f64) -> f64 {
    let (i, peak) = series
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let peak = if peak > 0.0 { peak } else { 1.0 };
    peak / (tau * (-times[i] / t1b).exp())
}

pub(crate) fn output_scale(series: &[f64]) -> f64 {
    let m = series.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

pub(crate) fn check_series(series: &[f64], spec: &AcquisitionSpec) -> Result<()> {
    if series.len() != spec.n_points() {
        return Err(Error::Usage(format!(
            "series has {} samples, acquisition has {}",
            series.len(),
            spec.n_points()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::dataset("series contains non-finite samples"));
    }
    Ok(())
}

/// Builds an untrained branch for `series` with network seed `seed`.
pub(crate) fn new_branch(
    series: &[f64],
    weights: Vec<f64>,
    spec: &AcquisitionSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Branch {
    let net = MlpPinn::glorot(seed, spec.last_time(), output_scale(series));
    let cbf0 = cbf_initial_guess(series, spec.times(), cfg.tau, cfg.init_t1b);
    Branch {
        net,
        series: series.to_vec(),
        weights,
        physical: TrainablePhysical::at_scales(cbf0, cfg.init_at, cfg.init_t1b),
    }
}

/// Baseline single-voxel PINN.
pub fn fit_voxel_pinn(series: &[f64], spec: &AcquisitionSpec, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_series(series, spec)?;
    let start = Instant::now();
    let branch = new_branch(series, vec![1.0; series.len()], spec, cfg, cfg.seed);
    let mut model = Model {
        branches: vec![branch],
        raw_t1b: 0.0,
        t1b_scale: cfg.init_t1b,
        t1b_frozen: false,
    };
    let points = PointSet::new(cfg.n_collocation, spec.last_time(), spec.times());
    let loss_history = train(&mut model, &points, cfg)?;
    let (predicted_signal, _) = model.branches[0].net.evaluate(spec.times());
    Ok(FitResult {
        params: model.branch_params(0, cfg.tau),
        loss_history,
        predicted_signal,
        converged: true,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Objective gradients for a single-voxel PINN in the given state.
///
/// `frozen` marks physical parameters excluded from differentiation; their
/// entries in the result are `None`.
pub fn single_voxel_gradients(
    net: &MlpPinn,
    physical: &TrainablePhysical,
    series: &[f64],
    weights: &[f64],
    spec: &AcquisitionSpec,
    cfg: &TrainConfig,
) -> Result<GradientSet> {
    check_series(series, spec)?;
    if weights.len() != series.len() {
        return Err(Error::Usage("weights and series lengths differ".into()));
    }
    let model = Model {
        branches: vec![Branch {
            net: net.clone(),
            series: series.to_vec(),
            weights: weights.to_vec(),
            physical: *physical,
        }],
        raw_t1b: physical.raw[Physical::T1b as usize],
        t1b_scale: physical.scale[Physical::T1b as usize],
        t1b_frozen: physical.frozen[Physical::T1b as usize],
    };
    let points = PointSet::new(cfg.n_collocation, spec.last_time(), spec.times());
    objective_gradients(&model, &points, cfg)
}

/// Objective value matching [`single_voxel_gradients`], without a reverse sweep.
pub fn single_voxel_objective(
    net: &MlpPinn,
    physical: &TrainablePhysical,
    series: &[f64],
    weights: &[f64],
    spec: &AcquisitionSpec,
    cfg: &TrainConfig,
) -> Result<f64> {
    check_series(series, spec)?;
    let model = Model {
        branches: vec![Branch {
            net: net.clone(),
            series: series.to_vec(),
            weights: weights.to_vec(),
            physical: *physical,
        }],
        raw_t1b: physical.raw[Physical::T1b as usize],
        t1b_scale: physical.scale[Physical::T1b as usize],
        t1b_frozen: physical.frozen[Physical::T1b as usize],
    };
    let points = PointSet::new(cfg.n_collocation, spec.last_time(), spec.times());
    Ok(objective_value(&model, &points, cfg))
}
