//! Evaluation statistics and report assembly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{ParamMap, VoxelGrid};
use crate::roi::{Method, RoiFit};
use crate::signal::{evaluate_signal, HaemodynamicParams};

/// `(predicted − target) / target × 100`.
pub fn relative_error(predicted: f64, target: f64) -> Result<f64> {
    if target == 0.0 || !target.is_finite() {
        return Err(Error::UndefinedMetric(format!("relative error against target {target}")));
    }
    Ok((predicted - target) / target * 100.0)
}

/// True when the estimate is within one order of magnitude of the truth.
pub fn convergence_flag(cbf_est: f64, cbf_truth: f64) -> bool {
    let ratio = cbf_est / cbf_truth;
    (0.1..=10.0).contains(&ratio)
}

/// `|total − failed| / total × 100`.
pub fn convergence_rate(flags: &[bool]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::UndefinedMetric("convergence rate of an empty set".into()));
    }
    let failed = flags.iter().filter(|&&f| !f).count();
    Ok((flags.len() - failed) as f64 / flags.len() as f64 * 100.0)
}

/// Population variance of the 5-point Laplacian over interior voxels.
///
/// A voxel is interior when it and its four edge neighbours are in the mask
/// and finite. A single interior voxel has variance 0; none is an error.
pub fn laplacian_variance(map: &ParamMap, mask: &[bool]) -> Result<f64> {
    let (w, h) = (map.width, map.height);
    if mask.len() != w * h || map.values.len() != w * h {
        return Err(Error::Usage(format!(
            "map has {} values and mask {} for a {w}x{h} grid",
            map.values.len(),
            mask.len()
        )));
    }
    let ok = |x: usize, y: usize| mask[y * w + x] && map.get(x, y).is_finite();
    let mut filtered = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if ok(x, y) && ok(x - 1, y) && ok(x + 1, y) && ok(x, y - 1) && ok(x, y + 1) {
                filtered.push(
                    map.get(x - 1, y) + map.get(x + 1, y) + map.get(x, y - 1) + map.get(x, y + 1)
                        - 4.0 * map.get(x, y),
                );
            }
        }
    }
    if filtered.is_empty() {
        return Err(Error::UndefinedMetric("no interior voxels for the Laplacian".into()));
    }
    Ok(Summary::of(&filtered).std.powi(2))
}

/// Mean squared difference of two series.
pub fn signal_mse(predicted: &[f64], reference: &[f64]) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::Usage(format!(
            "series lengths differ: {} vs {}",
            predicted.len(),
            reference.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::UndefinedMetric("mse of empty series".into()));
    }
    Ok(predicted
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r).powi(2))
        .sum::<f64>()
        / predicted.len() as f64)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// NaN mean and std when `values` is empty.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelMetrics {
    /// Index of the run the voxel belongs to.
    pub run: usize,
    pub index: usize,
    pub converged: bool,
    pub cbf_re: Option<f64>,
    pub at_re: Option<f64>,
    pub t1b_re: Option<f64>,
    pub signal_mse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub runs: usize,
    pub voxels: usize,
    /// Voxels without a fit or outside the convergence band.
    pub failed: usize,
    pub convergence_rate: f64,
    /// Relative errors in percent, converged voxels only.
    pub cbf_re: Summary,
    pub at_re: Summary,
    pub t1b_re: Summary,
    /// Per-run values, summarised across runs.
    pub cbf_laplacian_variance: Summary,
    pub at_laplacian_variance: Summary,
    pub signal_mse: Summary,
    pub detail: Vec<VoxelMetrics>,
}

/// Pools one method's fits over several grids.
///
/// Every grid needs ground truth. Voxel statistics pool all voxels; Laplacian
/// variances are computed per run on maps with failed voxels removed.
pub fn evaluate_runs(runs: &[(&RoiFit, &VoxelGrid)]) -> Result<MetricsReport> {
    let Some((first, _)) = runs.first() else {
        return Err(Error::Usage("no runs to evaluate".into()));
    };
    let method = first.method;
    let mut detail = Vec::new();
    let mut cbf_lv = Vec::new();
    let mut at_lv = Vec::new();
    for (run, (fit, grid)) in runs.iter().enumerate() {
        if fit.method != method {
            return Err(Error::Usage(format!("mixed methods {method} and {}", fit.method)));
        }
        let gt = grid
            .ground_truth()
            .ok_or_else(|| Error::dataset("dataset has no ground truth"))?;
        if fit.width != grid.width() || fit.height != grid.height() || fit.voxels.len() != grid.n_masked() {
            return Err(Error::Usage("results do not match the dataset grid".into()));
        }
        let mut cbf_map = fit.cbf_map();
        let mut at_map = fit.at_map();
        let indices = grid.masked_indices();
        for (k, v) in fit.voxels.iter().enumerate() {
            if indices[k] != v.index {
                return Err(Error::Usage("results do not match the dataset mask".into()));
            }
            let mut m = VoxelMetrics {
                run,
                index: v.index,
                converged: false,
                cbf_re: None,
                at_re: None,
                t1b_re: None,
                signal_mse: None,
                error: v.error.clone(),
            };
            if let Some(r) = &v.result {
                let p = &r.params;
                m.converged = convergence_flag(p.cbf, gt.cbf_map[k]);
                let truth = HaemodynamicParams::with_tau(gt.cbf_map[k], gt.at_map[k], gt.t1b, p.tau)?;
                let reference = grid
                    .spec()
                    .times()
                    .iter()
                    .map(|&t| evaluate_signal(&truth, t))
                    .collect::<Result<Vec<_>>>()?;
                m.signal_mse = Some(signal_mse(&r.predicted_signal, &reference)?);
                if m.converged {
                    m.cbf_re = relative_error(p.cbf, gt.cbf_map[k]).ok();
                    m.at_re = relative_error(p.at, gt.at_map[k]).ok();
                    m.t1b_re = relative_error(p.t1b, gt.t1b).ok();
                }
            }
            if !m.converged {
                cbf_map.values[v.index] = f64::NAN;
                at_map.values[v.index] = f64::NAN;
            }
            detail.push(m);
        }
        if let Ok(v) = laplacian_variance(&cbf_map, grid.mask()) {
            cbf_lv.push(v);
        }
        if let Ok(v) = laplacian_variance(&at_map, grid.mask()) {
            at_lv.push(v);
        }
    }
    let flags: Vec<bool> = detail.iter().map(|d| d.converged).collect();
    let collect = |f: fn(&VoxelMetrics) -> Option<f64>| detail.iter().filter_map(f).collect::<Vec<_>>();
    Ok(MetricsReport {
        method,
        runs: runs.len(),
        voxels: detail.len(),
        failed: flags.iter().filter(|&&c| !c).count(),
        convergence_rate: convergence_rate(&flags).unwrap_or(f64::NAN),
        cbf_re: Summary::of(&collect(|d| d.cbf_re)),
        at_re: Summary::of(&collect(|d| d.at_re)),
        t1b_re: Summary::of(&collect(|d| d.t1b_re)),
        cbf_laplacian_variance: Summary::of(&cbf_lv),
        at_laplacian_variance: Summary::of(&at_lv),
        signal_mse: Summary::of(&collect(|d| d.signal_mse)),
        detail,
    })
}

/// Report for a single fit.
pub fn evaluate_fit(fit: &RoiFit, grid: &VoxelGrid) -> Result<MetricsReport> {
    evaluate_runs(&[(fit, grid)])
}

fn pm(s: &Summary, scale: f64, digits: usize) -> String {
    if s.n == 0 {
        "n/a".to_string()
    } else {
        format!("{:.*} ± {:.*}", digits, s.mean * scale, digits, s.std * scale)
    }
}

/// Aligned comparison table, one row per report.
///
/// Laplacian variances are shown ×10⁶ for CBF and raw for AT; MSE ×10⁶.
pub fn render_table(reports: &[MetricsReport], labels: &[String]) -> String {
    let header = [
        "run", "method", "voxels", "conv %", "CBF RE %", "AT RE %", "T1b RE %", "LV CBF e6", "LV AT", "MSE e6",
    ];
    let rows: Vec<[String; 10]> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            [
                labels.get(i).cloned().unwrap_or_default(),
                r.method.to_string(),
                r.voxels.to_string(),
                format!("{:.1}", r.convergence_rate),
                pm(&r.cbf_re, 1.0, 2),
                pm(&r.at_re, 1.0, 2),
                pm(&r.t1b_re, 1.0, 2),
                pm(&r.cbf_laplacian_variance, 1e6, 3),
                pm(&r.at_laplacian_variance, 1.0, 1),
                pm(&r.signal_mse, 1e6, 3),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}", w = *w))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
