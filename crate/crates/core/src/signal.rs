//! Closed-form kinetic model for a single labelled bolus, the three-branch ODE
//! it satisfies, a tanh-gated smooth version of that ODE, and an RK4 integrator
//! used to cross-check the smooth form against the closed form.
//!
//! All times are in milliseconds. CBF is a raw amplitude (signal units per ms).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labelled bolus duration used throughout, ms.
pub const DEFAULT_TAU_MS: f64 = 900.0;
/// Number of post-labelling samples in the default protocol.
pub const DEFAULT_N_POINTS: usize = 12;
/// Sample spacing of the default protocol, ms.
pub const DEFAULT_SPACING_MS: f64 = 300.0;
/// Default steepness of the tanh gates, 1/ms.
pub const DEFAULT_SHARPNESS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HaemodynamicParams {
    pub cbf: f64,
    pub at: f64,
    pub t1b: f64,
    pub tau: f64,
}

impl HaemodynamicParams {
    /// Builds a parameter set with the default bolus duration.
    pub fn new(cbf: f64, at: f64, t1b: f64) -> Result<Self> {
        Self::with_tau(cbf, at, t1b, DEFAULT_TAU_MS)
    }

    pub fn with_tau(cbf: f64, at: f64, t1b: f64, tau: f64) -> Result<Self> {
        let p = Self { cbf, at, t1b, tau };
        p.validate()?;
        Ok(p)
    }

    /// A zero CBF is accepted (it describes an empty voxel); everything else
    /// must be strictly positive and finite.
    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, value: f64, allow_zero: bool| {
            let ok = value.is_finite() && (value > 0.0 || (allow_zero && value == 0.0));
            if ok {
                Ok(())
            } else {
                Err(Error::ParameterDomain { name, value })
            }
        };
        check("cbf", self.cbf, true)?;
        check("at", self.at, false)?;
        check("t1b", self.t1b, false)?;
        check("tau", self.tau, false)
    }

    #[cfg(test)]
    pub(crate) fn scaled_cbf(&self, factor: f64) -> Self {
        Self {
            cbf: self.cbf * factor,
            ..*self
        }
    }
}

/// Sample times of a multi-delay acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    times: Vec<f64>,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self::uniform(DEFAULT_N_POINTS, DEFAULT_SPACING_MS).expect("default protocol is valid")
    }
}

impl AcquisitionSpec {
    /// `n` samples at `spacing, 2·spacing, …, n·spacing`.
    pub fn uniform(n: usize, spacing: f64) -> Result<Self> {
        if n == 0 || !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::config(format!(
                "uniform acquisition needs n > 0 and spacing > 0 (got n={n}, spacing={spacing})"
            )));
        }
        Ok(Self {
            times: (1..=n).map(|i| spacing * i as f64).collect(),
        })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::config("acquisition needs at least one time point"));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::config("acquisition times must be finite and non-negative"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("acquisition times must be strictly increasing"));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_points(&self) -> usize {
        self.times.len()
    }

    /// Smallest gap between consecutive samples (the first gap is measured from 0).
    pub fn spacing(&self) -> f64 {
        let mut prev = 0.0;
        let mut min = f64::INFINITY;
        for &t in &self.times {
            if t > prev {
                min = min.min(t - prev);
            }
            prev = t;
        }
        min
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("non-empty by construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sharpness_k: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sharpness_k: DEFAULT_SHARPNESS,
        }
    }
}

impl SmoothingConfig {
    pub fn new(sharpness_k: f64) -> Result<Self> {
        if !(sharpness_k > 0.0 && sharpness_k.is_finite()) {
            return Err(Error::config(format!("sharpness must be > 0, got {sharpness_k}")));
        }
        Ok(Self { sharpness_k })
    }

    /// Smooth step `½(1 + tanh(k·x))`.
    pub fn gate(&self, x: f64) -> f64 {
        0.5 * (1.0 + (self.sharpness_k * x).tanh())
    }
}

/// Closed-form signal for a bolus arriving at `at` and lasting `tau`.
pub fn evaluate_signal(params: &HaemodynamicParams, t: f64) -> Result<f64> {
    params.validate()?;
    Ok(signal_raw(params.cbf, params.at, params.t1b, params.tau, t))
}

#[inline]
pub(crate) fn signal_raw(cbf: f64, at: f64, t1b: f64, tau: f64, t: f64) -> f64 {
    if t < at {
        0.0
    } else if t < at + tau {
        cbf * (t - at) * (-t / t1b).exp()
    } else {
        cbf * tau * (-t / t1b).exp()
    }
}

/// Branch-wise time derivative of [`evaluate_signal`]. Discontinuous at `at`
/// and `at + tau`; at a boundary the later branch is used.
pub fn evaluate_ode_rhs_exact(params: &HaemodynamicParams, t: f64) -> Result<f64> {
    params.validate()?;
    let HaemodynamicParams { cbf, at, t1b, tau } = *params;
    Ok(if t < at {
        0.0
    } else if t < at + tau {
        rising_branch(cbf, at, t1b, t)
    } else {
        decay_branch(cbf, t1b, tau, t)
    })
}

#[inline]
fn rising_branch(cbf: f64, at: f64, t1b: f64, t: f64) -> f64 {
    cbf * (-t / t1b).exp() * (1.0 - (t - at) / t1b)
}

#[inline]
fn decay_branch(cbf: f64, t1b: f64, tau: f64, t: f64) -> f64 {
    -cbf * (-t / t1b).exp() * tau / t1b
}

/// Gated blend `g₁·B₂ + g₂·B₃` with `g₁ = σ(t−AT)·σ(AT+τ−t)` and `g₂ = σ(t−AT−τ)`.
pub fn evaluate_ode_rhs_smoothed(
    params: &HaemodynamicParams,
    t: f64,
    cfg: &SmoothingConfig,
) -> Result<f64> {
    params.validate()?;
    Ok(smoothed_rhs_raw(params, t, cfg))
}

#[inline]
fn smoothed_rhs_raw(params: &HaemodynamicParams, t: f64, cfg: &SmoothingConfig) -> f64 {
    let HaemodynamicParams { cbf, at, t1b, tau } = *params;
    let g1 = cfg.gate(t - at) * cfg.gate(at + tau - t);
    let g2 = cfg.gate(t - at - tau);
    g1 * rising_branch(cbf, at, t1b, t) + g2 * decay_branch(cbf, t1b, tau, t)
}

/// Classical RK4 integration of the smoothed ODE from `S(0) = 0`, reporting
/// `S` at every acquisition time. Each inter-sample interval is split into
/// equal substeps no longer than `step`.
pub fn integrate_smoothed_ode(
    params: &HaemodynamicParams,
    cfg: &SmoothingConfig,
    spec: &AcquisitionSpec,
    step: f64,
) -> Result<Vec<f64>> {
    params.validate()?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config(format!("integration step must be > 0, got {step}")));
    }
    if step > spec.spacing() {
        return Err(Error::config(format!(
            "integration step {step} exceeds sample spacing {}",
            spec.spacing()
        )));
    }
    let rhs = |t: f64| smoothed_rhs_raw(params, t, cfg);
    let mut out = Vec::with_capacity(spec.n_points());
    let (mut t, mut s) = (0.0_f64, 0.0_f64);
    for &target in spec.times() {
        let span = target - t;
        if span > 0.0 {
            let n = (span / step).ceil().max(1.0) as usize;
            let h = span / n as f64;
            for i in 0..n {
                let t0 = t + h * i as f64;
                // The right-hand side does not depend on S, so the stages reduce to
                // evaluations at t0, t0 + h/2 (twice) and t0 + h.
                let k1 = rhs(t0);
                let k2 = rhs(t0 + 0.5 * h);
                let k3 = k2;
                let k4 = rhs(t0 + h);
                s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
        t = target;
        out.push(s);
    }
    Ok(out)
}

/// Peak of the closed-form signal, reached at `at + min(tau, t1b)`.
pub fn peak_signal(params: &HaemodynamicParams) -> f64 {
    let t_peak = params.at + params.tau.min(params.t1b);
    signal_raw(params.cbf, params.at, params.t1b, params.tau, t_peak)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference() -> HaemodynamicParams {
        HaemodynamicParams::new(0.01, 600.0, 1800.0).unwrap()
    }

    #[test]
    fn closed_form_branch_values() {
        let p = reference();
        assert_eq!(evaluate_signal(&p, 300.0).unwrap(), 0.0);
        // 0.01 * 600 * e^(-2/3) and 0.01 * 900 * e^(-10/9)
        assert_relative_eq!(evaluate_signal(&p, 1200.0).unwrap(), 3.080_502_714, max_relative = 1e-9);
        assert_relative_eq!(evaluate_signal(&p, 2000.0).unwrap(), 2.962_736_890, max_relative = 1e-9);
    }

    #[test]
    fn exact_rhs_branch_values() {
        let p = reference();
        assert_eq!(evaluate_ode_rhs_exact(&p, 300.0).unwrap(), 0.0);
        assert_relative_eq!(evaluate_ode_rhs_exact(&p, 1200.0).unwrap(), 0.003_422_780_794, max_relative = 1e-9);
        assert_relative_eq!(evaluate_ode_rhs_exact(&p, 2000.0).unwrap(), -0.001_645_964_939, max_relative = 1e-9);
    }

    #[test]
    fn exact_rhs_is_right_continuous() {
        let p = reference();
        let at_arrival = evaluate_ode_rhs_exact(&p, 600.0).unwrap();
        assert_relative_eq!(at_arrival, 0.01 * (-600.0_f64 / 1800.0).exp());
        let at_end = evaluate_ode_rhs_exact(&p, 1500.0).unwrap();
        assert_relative_eq!(at_end, -0.01 * (-1500.0_f64 / 1800.0).exp() * 0.5);
    }

    #[test]
    fn smoothed_rhs_is_half_at_arrival() {
        let p = reference();
        let cfg = SmoothingConfig::default();
        let b2 = 0.01 * (-600.0_f64 / 1800.0).exp();
        let v = evaluate_ode_rhs_smoothed(&p, 600.0, &cfg).unwrap();
        // σ(AT+τ−t) = σ(900) and σ(t−AT−τ) = σ(−900) are saturated.
        assert_relative_eq!(v, 0.5 * b2, max_relative = 1e-9);
    }

    #[test]
    fn smoothed_matches_exact_away_from_transitions() {
        let p = reference();
        let cfg = SmoothingConfig::default();
        for i in 0..=3600 {
            let t = i as f64;
            let far = (t - p.at).abs() * cfg.sharpness_k > 10.0
                && (t - p.at - p.tau).abs() * cfg.sharpness_k > 10.0;
            if !far {
                continue;
            }
            let e = evaluate_ode_rhs_exact(&p, t).unwrap();
            let s = evaluate_ode_rhs_smoothed(&p, t, &cfg).unwrap();
            assert!((s - e).abs() <= 1e-6 * e.abs() + 1e-10, "t={t}: {s} vs {e}");
        }
    }

    #[test]
    fn smoothing_error_is_localised_at_transitions() {
        let p = reference();
        let cfg = SmoothingConfig::default();
        let mut worst = (0.0, 0.0);
        let mut far_worst: f64 = 0.0;
        for i in 0..=36_000 {
            let t = i as f64 * 0.1;
            let d = (evaluate_ode_rhs_smoothed(&p, t, &cfg).unwrap()
                - evaluate_ode_rhs_exact(&p, t).unwrap())
            .abs();
            if d > worst.1 {
                worst = (t, d);
            }
            if (t - p.at).abs() > 100.0 && (t - p.at - p.tau).abs() > 100.0 {
                far_worst = far_worst.max(d);
            }
        }
        let near = (worst.0 - p.at).abs() <= 100.0 || (worst.0 - p.at - p.tau).abs() <= 100.0;
        assert!(near, "largest deviation at t={}", worst.0);
        assert!(far_worst < 1e-3 * worst.1);
    }

    #[test]
    fn rk4_matches_closed_form() {
        let p = reference();
        let spec = AcquisitionSpec::default();
        let s = integrate_smoothed_ode(&p, &SmoothingConfig::default(), &spec, 1.0).unwrap();
        let peak = peak_signal(&p);
        for (t, v) in spec.times().iter().zip(&s) {
            let exact = evaluate_signal(&p, *t).unwrap();
            assert!((v - exact).abs() <= 0.02 * peak, "t={t}: {v} vs {exact}");
        }
    }

    #[test]
    fn rk4_zero_source_and_linearity() {
        let spec = AcquisitionSpec::default();
        let cfg = SmoothingConfig::default();
        let zero = HaemodynamicParams::new(0.0, 600.0, 1800.0).unwrap();
        let s = integrate_smoothed_ode(&zero, &cfg, &spec, 1.0).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));

        let p = reference();
        let a = integrate_smoothed_ode(&p, &cfg, &spec, 1.0).unwrap();
        let b = integrate_smoothed_ode(&p.scaled_cbf(2.0), &cfg, &spec, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(2.0 * x, *y, max_relative = 1e-12);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(matches!(
            HaemodynamicParams::new(-1.0, 600.0, 1800.0),
            Err(Error::ParameterDomain { name: "cbf", .. })
        ));
        assert!(HaemodynamicParams::new(0.01, 0.0, 1800.0).is_err());
        assert!(HaemodynamicParams::new(0.01, 600.0, f64::NAN).is_err());
        let p = reference();
        let spec = AcquisitionSpec::default();
        let cfg = SmoothingConfig::default();
        assert!(matches!(integrate_smoothed_ode(&p, &cfg, &spec, 0.0), Err(Error::Config(_))));
        assert!(integrate_smoothed_ode(&p, &cfg, &spec, 301.0).is_err());
        assert!(SmoothingConfig::new(0.0).is_err());
        assert!(AcquisitionSpec::from_times(vec![300.0, 300.0]).is_err());
    }

    #[test]
    fn default_protocol() {
        let spec = AcquisitionSpec::default();
        assert_eq!(spec.n_points(), 12);
        assert_eq!(spec.times()[0], 300.0);
        assert_eq!(spec.last_time(), 3600.0);
        assert_eq!(spec.spacing(), 300.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn params() -> impl Strategy<Value = HaemodynamicParams> {
            (0.001f64..0.05, 100.0f64..2500.0, 500.0f64..4000.0)
                .prop_map(|(c, a, t)| HaemodynamicParams::new(c, a, t).unwrap())
        }

        proptest! {
            #[test]
            fn continuous_at_branch_boundaries(p in params()) {
                let eps = 1e-7;
                for b in [p.at, p.at + p.tau] {
                    let l = evaluate_signal(&p, b - eps).unwrap();
                    let r = evaluate_signal(&p, b + eps).unwrap();
                    prop_assert!((l - r).abs() < 1e-6 * peak_signal(&p).max(1e-12));
                }
            }

            #[test]
            fn linear_in_cbf(p in params(), t in 0.0f64..3600.0) {
                let q = p.scaled_cbf(2.0);
                let cfg = SmoothingConfig::default();
                prop_assert!((2.0 * evaluate_signal(&p, t).unwrap() - evaluate_signal(&q, t).unwrap()).abs() < 1e-12);
                prop_assert!((2.0 * evaluate_ode_rhs_exact(&p, t).unwrap() - evaluate_ode_rhs_exact(&q, t).unwrap()).abs() < 1e-15);
                prop_assert!((2.0 * evaluate_ode_rhs_smoothed(&p, t, &cfg).unwrap() - evaluate_ode_rhs_smoothed(&q, t, &cfg).unwrap()).abs() < 1e-15);
            }

            #[test]
            fn finite_difference_matches_exact_rhs(p in params(), t in 0.0f64..3600.0) {
                prop_assume!((t - p.at).abs() > 1.0 && (t - p.at - p.tau).abs() > 1.0);
                let h = 1e-3;
                let fd = (evaluate_signal(&p, t + h).unwrap() - evaluate_signal(&p, t - h).unwrap()) / (2.0 * h);
                let exact = evaluate_ode_rhs_exact(&p, t).unwrap();
                prop_assert!((fd - exact).abs() <= 1e-4 * exact.abs() + 1e-12, "fd={} exact={}", fd, exact);
            }
        }
    }
}
