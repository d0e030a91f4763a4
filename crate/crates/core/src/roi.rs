//! Whole-grid fitting with any of the four methods.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsf::{fit_voxel_lsf, fit_lsf_multi, LsfConfig};
use crate::phantom::{ParamMap, VoxelGrid};
use crate::pinn::{fit_voxel_pinn, FitResult, TrainConfig};
use crate::supinn::{fit_roi_supinn, select_branch_voxels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Lsf,
    LsfMulti,
    Pinn,
    Supinn,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Lsf, Method::LsfMulti, Method::Pinn, Method::Supinn];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lsf => "lsf",
            Method::LsfMulti => "lsf-multi",
            Method::Pinn => "pinn",
            Method::Supinn => "supinn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method `{s}` (expected lsf, lsf-multi, pinn or supinn)")))
    }
}

/// Outcome for one masked voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelFit {
    /// Row-major grid index.
    pub index: usize,
    pub result: Option<FitResult>,
    pub error: Option<String>,
}

impl VoxelFit {
    pub(crate) fn from_result(index: usize, r: Result<FitResult>) -> Self {
        match r {
            Ok(r) => Self {
                index,
                result: Some(r),
                error: None,
            },
            Err(e) => Self {
                index,
                result: None,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Per-voxel fits of one grid with one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFit {
    pub method: Method,
    pub width: usize,
    pub height: usize,
    /// Masked voxels in row-major order.
    pub voxels: Vec<VoxelFit>,
    /// Subject-level T1b: mean over the voxels that produced a fit.
    pub t1b: Option<f64>,
}

impl RoiFit {
    pub(crate) fn assemble(method: Method, grid: &VoxelGrid, voxels: Vec<VoxelFit>) -> Self {
        let t1bs: Vec<f64> = voxels
            .iter()
            .filter_map(|v| v.result.as_ref().map(|r| r.params.t1b))
            .collect();
        let t1b = (!t1bs.is_empty()).then(|| t1bs.iter().sum::<f64>() / t1bs.len() as f64);
        Self {
            method,
            width: grid.width(),
            height: grid.height(),
            voxels,
            t1b,
        }
    }

    pub fn map(&self, value: impl Fn(&FitResult) -> f64) -> ParamMap {
        let mut values = vec![f64::NAN; self.width * self.height];
        for v in &self.voxels {
            if let Some(r) = &v.result {
                values[v.index] = value(r);
            }
        }
        ParamMap {
            width: self.width,
            height: self.height,
            values,
        }
    }

    pub fn cbf_map(&self) -> ParamMap {
        self.map(|r| r.params.cbf)
    }

    pub fn at_map(&self) -> ParamMap {
        self.map(|r| r.params.at)
    }

    pub fn t1b_map(&self) -> ParamMap {
        self.map(|r| r.params.t1b)
    }

    /// Voxels whose fit returned an error.
    pub fn failures(&self) -> usize {
        self.voxels.iter().filter(|v| v.result.is_none()).count()
    }
}

/// Settings for [`fit_grid`]. `train.seed` also seeds companion selection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub train: TrainConfig,
    pub lsf: LsfConfig,
    /// Blood T1 for fixed-T1b least squares.
    pub t1b_fixed: Option<f64>,
}

/// Fits every masked voxel of `grid`. Per-voxel errors are recorded, not returned.
pub fn fit_grid(grid: &VoxelGrid, method: Method, opts: &FitOptions) -> Result<RoiFit> {
    match method {
        Method::Supinn => fit_roi_supinn(grid, &opts.train),
        Method::Pinn => fit_roi_pinn(grid, &opts.train),
        Method::Lsf => fit_roi_lsf(grid, &opts.lsf, opts.t1b_fixed),
        Method::LsfMulti => fit_roi_lsf_multi(grid, &opts.lsf, opts.train.seed),
    }
}

pub fn fit_roi_pinn(grid: &VoxelGrid, cfg: &TrainConfig) -> Result<RoiFit> {
    cfg.validate()?;
    let voxels = per_voxel(grid, |_, series| {
        fit_voxel_pinn(series, grid.spec(), cfg)
    });
    Ok(RoiFit::assemble(Method::Pinn, grid, voxels))
}

pub fn fit_roi_lsf(grid: &VoxelGrid, cfg: &LsfConfig, t1b_fixed: Option<f64>) -> Result<RoiFit> {
    cfg.validate()?;
    let voxels = per_voxel(grid, |_, series| {
        fit_voxel_lsf(series, grid.spec(), cfg, t1b_fixed)
    });
    Ok(RoiFit::assemble(Method::Lsf, grid, voxels))
}

pub fn fit_roi_lsf_multi(grid: &VoxelGrid, cfg: &LsfConfig, seed: u64) -> Result<RoiFit> {
    cfg.validate()?;
    let voxels = per_voxel(grid, |index, _| {
        let selection = select_branch_voxels(grid, index, seed)?;
        fit_lsf_multi(grid, &selection, cfg)
    });
    Ok(RoiFit::assemble(Method::LsfMulti, grid, voxels))
}

pub(crate) fn per_voxel<F>(grid: &VoxelGrid, fit: F) -> Vec<VoxelFit>
where
    F: Fn(usize, &[f64]) -> Result<FitResult> + Sync,
{
    let indices = grid.masked_indices();
    indices
        .par_iter()
        .zip(grid.signals().par_iter())
        .map(|(&index, series)| VoxelFit::from_result(index, fit(index, series.values())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_are_exact() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!(matches!("LSF".parse::<Method>(), Err(Error::Usage(_))));
        assert!(matches!("supin".parse::<Method>(), Err(Error::Usage(_))));
    }
}
