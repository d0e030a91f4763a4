//! Spatial-uncertainty weighting and the three-branch fit with a shared `T1b`.
//!
//! Each branch is a full single-voxel PINN with its own `cbf` and `at`. One
//! `T1b` trainable enters every branch's ODE residual, and the objective is the
//! sum of the branch objectives. Data residuals are weighted per time point by
//! the inverse spread of the signal among the voxel's in-mask neighbours,
//! rescaled per voxel into `[0.1, 1]`.

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::phantom::VoxelGrid;
use crate::pinn::{check_series, new_branch, train, FitResult, Model, PointSet, TrainConfig};
use crate::roi::{Method, RoiFit, VoxelFit};
use crate::signal::AcquisitionSpec;

/// Number of voxels in one joint fit.
pub const BRANCHES: usize = 3;
pub const MIN_WEIGHT: f64 = 0.1;
/// Floor on the neighbour standard deviation before inversion.
pub const STD_FLOOR: f64 = 1e-9;

/// Per-voxel, per-time-point data weights, indexed like the grid's masked voxels.
pub type UncertaintyWeights = Vec<Vec<f64>>;

/// `1 / std` of one time point's neighbour samples (population std, floored).
pub fn raw_uncertainty_weight(neighbours: &[f64]) -> f64 {
    let n = neighbours.len() as f64;
    let mean = neighbours.iter().sum::<f64>() / n;
    let var = neighbours.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    1.0 / var.sqrt().max(STD_FLOOR)
}

/// Maps raw weights onto `[0.1, 1]`, linearly in the uncertainty `1 / raw`.
///
/// The least uncertain time point gets 1 and the most uncertain 0.1. Equal
/// raw weights all become 1.
pub fn rescale_weights(raw: &[f64]) -> Vec<f64> {
    let std: Vec<f64> = raw.iter().map(|r| 1.0 / r).collect();
    let min = std.iter().copied().fold(f64::INFINITY, f64::min);
    let max = std.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = max > min;
    if !spread {
        return vec![1.0; raw.len()];
    }
    std.iter()
        .map(|&u| {
            if u == min {
                1.0
            } else {
                MIN_WEIGHT + (1.0 - MIN_WEIGHT) * (max - u) / (max - min)
            }
        })
        .collect()
}

/// Data weights for the voxel at grid index `index`.
///
/// Uses the 8-connected in-mask neighbours. A voxel without any falls back to
/// uniform weights.
pub fn compute_spatial_weights(grid: &VoxelGrid, index: usize) -> Result<Vec<f64>> {
    if grid.masked_position(index).is_none() {
        return Err(Error::Usage(format!("voxel {index} is outside the mask")));
    }
    let (w, h) = (grid.width() as isize, grid.height() as isize);
    let (x, y) = ((index % grid.width()) as isize, (index / grid.width()) as isize);
    let mut neighbours = Vec::with_capacity(8);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (nx, ny) = (x + dx, y + dy);
            if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                continue;
            }
            if let Some(series) = grid.series((ny * w + nx) as usize) {
                neighbours.push(series.values());
            }
        }
    }
    let n_points = grid.spec().n_points();
    if neighbours.is_empty() {
        return Ok(vec![1.0; n_points]);
    }
    let raw: Vec<f64> = (0..n_points)
        .map(|t| raw_uncertainty_weight(&neighbours.iter().map(|s| s[t]).collect::<Vec<_>>()))
        .collect();
    Ok(rescale_weights(&raw))
}

/// Weights for every masked voxel.
pub fn compute_all_weights(grid: &VoxelGrid) -> Result<UncertaintyWeights> {
    grid.masked_indices()
        .into_iter()
        .map(|i| compute_spatial_weights(grid, i))
        .collect()
}

/// A target voxel and the companions it is fitted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSelection {
    pub target: usize,
    pub companions: [usize; BRANCHES - 1],
    pub seed: u64,
}

impl BranchSelection {
    /// Target first, then companions.
    pub fn voxels(&self) -> [usize; BRANCHES] {
        [self.target, self.companions[0], self.companions[1]]
    }
}

/// Draws two distinct companions uniformly from the rest of the mask.
pub fn select_branch_voxels(grid: &VoxelGrid, target: usize, seed: u64) -> Result<BranchSelection> {
    if grid.masked_position(target).is_none() {
        return Err(Error::Usage(format!("target voxel {target} is outside the mask")));
    }
    let others: Vec<usize> = grid.masked_indices().into_iter().filter(|&i| i != target).collect();
    if others.len() < BRANCHES - 1 {
        return Err(Error::dataset(format!(
            "mask has {} voxels, a joint fit needs {BRANCHES}",
            others.len() + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(target as u64);
    let picked = rand::seq::index::sample(&mut rng, others.len(), BRANCHES - 1);
    Ok(BranchSelection {
        target,
        companions: [others[picked.index(0)], others[picked.index(1)]],
        seed,
    })
}

/// Result of one joint fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SupinnFit {
    /// One result per branch; every entry carries the shared `t1b`.
    pub branches: Vec<FitResult>,
    pub t1b: f64,
    pub loss_history: Vec<f64>,
    pub wall_time: f64,
}

/// Joint fit of explicit series and weights. All branches start from the
/// same network seed.
pub fn fit_branches(
    series: &[&[f64]],
    weights: &[Vec<f64>],
    spec: &AcquisitionSpec,
    cfg: &TrainConfig,
) -> Result<SupinnFit> {
    cfg.validate()?;
    if series.is_empty() || series.len() != weights.len() {
        return Err(Error::Usage("need one weight vector per branch series".into()));
    }
    for (s, w) in series.iter().zip(weights) {
        check_series(s, spec)?;
        if w.len() != s.len() {
            return Err(Error::Usage("weights and series lengths differ".into()));
        }
    }
    let start = Instant::now();
    let mut model = Model {
        branches: series
            .iter()
            .zip(weights)
            .map(|(s, w)| new_branch(s, w.clone(), spec, cfg, cfg.seed))
            .collect(),
        raw_t1b: 0.0,
        t1b_scale: cfg.init_t1b,
        t1b_frozen: false,
    };
    let points = PointSet::new(cfg.n_collocation, spec.last_time(), spec.times());
    let loss_history = train(&mut model, &points, cfg)?;
    let wall_time = start.elapsed().as_secs_f64();
    let branches = (0..model.branches.len())
        .map(|i| FitResult {
            params: model.branch_params(i, cfg.tau),
            loss_history: Vec::new(),
            predicted_signal: model.branches[i].net.evaluate(spec.times()).0,
            converged: true,
            wall_time,
        })
        .collect();
    Ok(SupinnFit {
        branches,
        t1b: model.t1b(),
        loss_history,
        wall_time,
    })
}

/// Joint fit of the selected voxels with their spatial weights.
pub fn fit_supinn(grid: &VoxelGrid, selection: &BranchSelection, cfg: &TrainConfig) -> Result<SupinnFit> {
    let voxels = selection.voxels();
    let mut series = Vec::with_capacity(BRANCHES);
    let mut weights = Vec::with_capacity(BRANCHES);
    for (k, &v) in voxels.iter().enumerate() {
        if voxels[..k].contains(&v) {
            return Err(Error::Usage(format!("voxel {v} selected twice")));
        }
        let s = grid
            .series(v)
            .ok_or_else(|| Error::Usage(format!("voxel {v} is outside the mask")))?;
        series.push(s.values());
        weights.push(compute_spatial_weights(grid, v)?);
    }
    fit_branches(&series, &weights, grid.spec(), cfg)
}

/// One joint fit per masked voxel, read out from the target's own branch.
/// The subject `T1b` is the mean of the runs' shared estimates.
pub fn fit_roi_supinn(grid: &VoxelGrid, cfg: &TrainConfig) -> Result<RoiFit> {
    cfg.validate()?;
    let indices = grid.masked_indices();
    let weights: HashMap<usize, Vec<f64>> = indices
        .iter()
        .copied()
        .zip(compute_all_weights(grid)?)
        .collect();
    let voxels = indices
        .par_iter()
        .map(|&target| {
            let run = || -> Result<FitResult> {
                let selection = select_branch_voxels(grid, target, cfg.seed)?;
                let voxels = selection.voxels();
                let series: Vec<&[f64]> = voxels
                    .iter()
                    .map(|&v| grid.series(v).expect("selection is inside the mask").values())
                    .collect();
                let w: Vec<Vec<f64>> = voxels.iter().map(|v| weights[v].clone()).collect();
                let fit = fit_branches(&series, &w, grid.spec(), cfg)?;
                let mut own = fit.branches.into_iter().next().expect("target branch");
                own.loss_history = fit.loss_history;
                Ok(own)
            };
            VoxelFit::from_result(target, run())
        })
        .collect();
    Ok(RoiFit::assemble(Method::Supinn, grid, voxels))
}
