//! Robust least-squares fitting of the closed-form signal model.
//!
//! Levenberg–Marquardt with an analytic Jacobian, restarted from a grid of
//! arrival times. A first pass minimises plain squared residuals; the Huber
//! scale is then set from the median absolute deviation of the best plain
//! fit, and a second pass minimises the Huber cost by iteratively reweighted
//! steps. The lowest Huber cost over all starts wins.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{ParamMap, VoxelGrid};
use crate::pinn::{check_series, FitResult};
use crate::signal::{evaluate_signal, signal_raw, AcquisitionSpec, HaemodynamicParams, DEFAULT_TAU_MS};
use crate::supinn::BranchSelection;

/// Scale factor turning a median absolute deviation into a normal-consistent spread.
const MAD_TO_STD: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LsfMode {
    FixedT1b,
    FreeT1b,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsfConfig {
    pub mode: LsfMode,
    /// Starting arrival times, ms.
    pub at_grid: Vec<f64>,
    pub max_iterations: usize,
    /// Huber threshold in units of the normalised residual MAD.
    pub huber_k: f64,
    /// Relative parameter step below which a run stops.
    pub step_tolerance: f64,
    /// Starting `T1b` in free mode, ms.
    pub init_t1b: f64,
    pub t1b_bounds: (f64, f64),
    pub tau: f64,
}

impl Default for LsfConfig {
    fn default() -> Self {
        Self {
            mode: LsfMode::FreeT1b,
            at_grid: (1..=7).map(|i| 300.0 * i as f64).collect(),
            max_iterations: 200,
            huber_k: 1.345,
            step_tolerance: 1e-8,
            init_t1b: 1800.0,
            t1b_bounds: (100.0, 20_000.0),
            tau: DEFAULT_TAU_MS,
        }
    }
}

impl LsfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.at_grid.is_empty() {
            return Err(Error::config("at_grid is empty"));
        }
        if self.at_grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::config("at_grid entries must be finite and >= 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be > 0"));
        }
        for (name, v) in [
            ("huber_k", self.huber_k),
            ("step_tolerance", self.step_tolerance),
            ("init_t1b", self.init_t1b),
            ("tau", self.tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        let (lo, hi) = self.t1b_bounds;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::config("t1b_bounds must be positive and ordered"));
        }
        Ok(())
    }
}

/// Residual model for one voxel.
struct Problem<'a> {
    times: &'a [f64],
    data: &'a [f64],
    tau: f64,
    /// `Some` in fixed-T1b mode.
    t1b: Option<f64>,
    t1b_bounds: (f64, f64),
    at_max: f64,
}

impl Problem<'_> {
    fn unpack(&self, p: &[f64]) -> (f64, f64, f64) {
        (p[0], p[1], self.t1b.unwrap_or_else(|| p[2]))
    }

    fn project(&self, p: &mut [f64]) {
        p[0] = p[0].max(0.0);
        p[1] = p[1].clamp(0.0, self.at_max);
        if self.t1b.is_none() {
            p[2] = p[2].clamp(self.t1b_bounds.0, self.t1b_bounds.1);
        }
    }

    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let (cbf, at, t1b) = self.unpack(p);
        self.times
            .iter()
            .zip(self.data)
            .map(|(&t, &y)| signal_raw(cbf, at, t1b, self.tau, t) - y)
            .collect()
    }

    /// Row `i` holds `∂S(tᵢ)/∂p`, taken from the branch active at `tᵢ`.
    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let (cbf, at, t1b) = self.unpack(p);
        DMatrix::from_fn(self.times.len(), p.len(), |i, j| {
            let t = self.times[i];
            let decay = (-t / t1b).exp();
            if t < at {
                0.0
            } else if t < at + self.tau {
                match j {
                    0 => (t - at) * decay,
                    1 => -cbf * decay,
                    _ => cbf * (t - at) * decay * t / (t1b * t1b),
                }
            } else {
                match j {
                    0 => self.tau * decay,
                    1 => 0.0,
                    _ => cbf * self.tau * decay * t / (t1b * t1b),
                }
            }
        })
    }
}

/// `Σ ρ(r)`: half squares, or Huber with threshold `delta`.
fn cost(r: &[f64], delta: Option<f64>) -> f64 {
    r.iter()
        .map(|&r| match delta {
            Some(d) if r.abs() > d => d * (r.abs() - 0.5 * d),
            _ => 0.5 * r * r,
        })
        .sum()
}

struct Run {
    params: Vec<f64>,
    cost: f64,
    history: Vec<f64>,
    decreased: bool,
}

fn levenberg_marquardt(problem: &Problem, start: Vec<f64>, delta: Option<f64>, cfg: &LsfConfig) -> Run {
    let mut p = start;
    problem.project(&mut p);
    let mut r = problem.residuals(&p);
    let mut c = cost(&r, delta);
    let initial = c;
    let mut history = vec![c];
    let mut lambda = 1e-3;
    let n = p.len();
    for _ in 0..cfg.max_iterations {
        if c == 0.0 {
            break;
        }
        let jac = problem.jacobian(&p);
        let w: Vec<f64> = r
            .iter()
            .map(|&ri| match delta {
                Some(d) if ri.abs() > d => d / ri.abs(),
                _ => 1.0,
            })
            .collect();
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for i in 0..r.len() {
            let row = jac.row(i);
            for a in 0..n {
                g[a] += w[i] * r[i] * row[a];
                for b in 0..n {
                    h[(a, b)] += w[i] * row[a] * row[b];
                }
            }
        }
        let diag_max = (0..n).map(|a| h[(a, a)]).fold(0.0, f64::max);
        if diag_max == 0.0 {
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut m = h.clone();
            for a in 0..n {
                m[(a, a)] += lambda * h[(a, a)].max(1e-12 * diag_max);
            }
            let Some(step) = m.cholesky().map(|ch| ch.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            problem.project(&mut trial);
            let tr = problem.residuals(&trial);
            let tc = cost(&tr, delta);
            if tc < c {
                let small = trial
                    .iter()
                    .zip(&p)
                    .all(|(new, old)| (new - old).abs() <= cfg.step_tolerance * (old.abs() + cfg.step_tolerance));
                p = trial;
                r = tr;
                c = tc;
                history.push(c);
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if small {
                    lambda = f64::INFINITY;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || lambda.is_infinite() {
            break;
        }
    }
    Run {
        params: p,
        cost: c,
        history,
        decreased: c < initial || initial == 0.0,
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Normal-consistent median absolute deviation.
pub fn normalised_mad(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    MAD_TO_STD * median(&mut dev)
}

struct Multistart {
    best: Run,
    delta: f64,
    converged: bool,
}

/// Plain pass, Huber scale from its residuals, then the robust pass.
fn robust_multistart(problem: &Problem, starts: Vec<Vec<f64>>, cfg: &LsfConfig) -> Multistart {
    let plain: Vec<Run> = starts
        .iter()
        .map(|s| levenberg_marquardt(problem, s.clone(), None, cfg))
        .collect();
    let best_plain = plain
        .iter()
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .expect("at_grid is not empty");
    let scale = problem.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = if scale > 0.0 { 1e-6 * scale } else { 1.0 };
    let delta = (cfg.huber_k * normalised_mad(&problem.residuals(&best_plain.params))).max(floor);

    let mut robust: Vec<Run> = starts
        .into_iter()
        .map(|s| levenberg_marquardt(problem, s, Some(delta), cfg))
        .collect();
    robust.push(levenberg_marquardt(problem, best_plain.params.clone(), Some(delta), cfg));
    let converged = plain.iter().chain(&robust).any(|r| r.decreased);
    let best = robust
        .into_iter()
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .expect("at least one robust run");
    Multistart { best, delta, converged }
}

/// Robust fit of one voxel. `t1b_fixed` must be given exactly in fixed mode.
pub fn fit_voxel_lsf(
    series: &[f64],
    spec: &AcquisitionSpec,
    cfg: &LsfConfig,
    t1b_fixed: Option<f64>,
) -> Result<FitResult> {
    cfg.validate()?;
    check_series(series, spec)?;
    match (cfg.mode, t1b_fixed) {
        (LsfMode::FixedT1b, None) => return Err(Error::Usage("fixed-t1b mode needs a t1b value".into())),
        (LsfMode::FreeT1b, Some(_)) => return Err(Error::Usage("free-t1b mode takes no fixed t1b".into())),
        (_, Some(t)) if !(t > 0.0 && t.is_finite()) => {
            return Err(Error::ParameterDomain { name: "t1b", value: t })
        }
        _ => {}
    }
    let start_time = Instant::now();
    let problem = Problem {
        times: spec.times(),
        data: series,
        tau: cfg.tau,
        t1b: t1b_fixed,
        t1b_bounds: cfg.t1b_bounds,
        at_max: spec.last_time(),
    };
    let t1b0 = t1b_fixed.unwrap_or(cfg.init_t1b);
    let (i_peak, peak) = series
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let cbf0 = peak.max(0.0) / (cfg.tau * (-spec.times()[i_peak] / t1b0).exp());
    let starts: Vec<Vec<f64>> = cfg
        .at_grid
        .iter()
        .map(|&at| match t1b_fixed {
            Some(_) => vec![cbf0, at],
            None => vec![cbf0, at, t1b0],
        })
        .collect();

    let fit = robust_multistart(&problem, starts, cfg);
    log::debug!("huber scale {:.3e}", fit.delta);
    let best = fit.best;
    let converged = fit.converged;

    let (cbf, at, t1b) = problem.unpack(&best.params);
    let params = HaemodynamicParams::with_tau(cbf, at.max(f64::MIN_POSITIVE), t1b, cfg.tau)?;
    let predicted_signal = spec
        .times()
        .iter()
        .map(|&t| evaluate_signal(&params, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitResult {
        params,
        loss_history: best.history,
        predicted_signal,
        converged,
        wall_time: start_time.elapsed().as_secs_f64(),
    })
}

/// Arithmetic mean of each parameter over several fits.
pub fn average_fits(fits: &[FitResult], spec: &AcquisitionSpec, tau: f64) -> Result<FitResult> {
    if fits.is_empty() {
        return Err(Error::Usage("nothing to average".into()));
    }
    let n = fits.len() as f64;
    let mean = |f: fn(&HaemodynamicParams) -> f64| fits.iter().map(|r| f(&r.params)).sum::<f64>() / n;
    let params = HaemodynamicParams::with_tau(mean(|p| p.cbf), mean(|p| p.at), mean(|p| p.t1b), tau)?;
    let predicted_signal = spec
        .times()
        .iter()
        .map(|&t| evaluate_signal(&params, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(FitResult {
        params,
        loss_history: Vec::new(),
        predicted_signal,
        converged: true,
        wall_time: fits.iter().map(|r| r.wall_time).sum(),
    })
}

/// Free-T1b fits of the three selected voxels, averaged and attributed to the target.
pub fn fit_lsf_multi(grid: &VoxelGrid, selection: &BranchSelection, cfg: &LsfConfig) -> Result<FitResult> {
    let free = LsfConfig {
        mode: LsfMode::FreeT1b,
        ..cfg.clone()
    };
    let mut good = Vec::new();
    let mut attempted = Vec::new();
    let mut last_error = None;
    for v in selection.voxels() {
        let series = grid
            .series(v)
            .ok_or_else(|| Error::Usage(format!("voxel {v} is outside the mask")))?;
        match fit_voxel_lsf(series.values(), grid.spec(), &free, None) {
            Ok(r) if r.converged => good.push(r),
            Ok(r) => attempted.push(r),
            Err(e) => last_error = Some(e),
        }
    }
    if !good.is_empty() {
        return average_fits(&good, grid.spec(), cfg.tau);
    }
    if !attempted.is_empty() {
        let mut r = average_fits(&attempted, grid.spec(), cfg.tau)?;
        r.converged = false;
        return Ok(r);
    }
    Err(last_error.unwrap_or_else(|| Error::Usage("empty selection".into())))
}

/// Fixed-T1b reference maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LsfMaps {
    pub cbf_map: ParamMap,
    pub at_map: ParamMap,
    /// Per masked voxel, row-major. False also for voxels whose fit errored.
    pub converged: Vec<bool>,
}

/// Fixed-T1b fits of every masked voxel.
pub fn ground_truth_from_lsf(grid: &VoxelGrid, t1b: f64, cfg: &LsfConfig) -> Result<LsfMaps> {
    if !(t1b > 0.0 && t1b.is_finite()) {
        return Err(Error::ParameterDomain { name: "t1b", value: t1b });
    }
    let fixed = LsfConfig {
        mode: LsfMode::FixedT1b,
        ..cfg.clone()
    };
    let roi = crate::roi::fit_roi_lsf(grid, &fixed, Some(t1b))?;
    Ok(LsfMaps {
        cbf_map: roi.cbf_map(),
        at_map: roi.at_map(),
        converged: roi
            .voxels
            .iter()
            .map(|v| v.result.as_ref().is_some_and(|r| r.converged))
            .collect(),
    })
}
