//! Synthetic voxel grids and dataset persistence.
//!
//! A phantom holds smooth CBF and AT fields over a rectangular grid, one global
//! `T1b`, and a noisy signal series for every voxel inside the mask. Noise is
//! additive white Gaussian with a standard deviation given as a fraction of
//! the largest noiseless sample on the grid.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::signal::{evaluate_signal, AcquisitionSpec, HaemodynamicParams, DEFAULT_TAU_MS};

pub const SCHEMA_VERSION: u32 = 1;

/// Signal samples of one voxel, aligned to the acquisition times.
#[derive(Debug, Clone, PartialEq)]
pub struct PwiTimeSeries {
    values: Vec<f64>,
}

impl PwiTimeSeries {
    pub fn new(values: Vec<f64>, spec: &AcquisitionSpec) -> Result<Self> {
        if values.len() != spec.n_points() {
            return Err(Error::dataset(format!(
                "series has {} samples, acquisition has {}",
                values.len(),
                spec.n_points()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::dataset("series contains non-finite samples"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// True parameters of a synthetic grid, one entry per masked voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cbf_map: Vec<f64>,
    pub at_map: Vec<f64>,
    /// ms, shared by every voxel.
    pub t1b: f64,
}

/// A single-slice dataset. Signals and ground truth are stored for masked
/// voxels only, in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    width: usize,
    height: usize,
    mask: Vec<bool>,
    signal: Vec<PwiTimeSeries>,
    spec: AcquisitionSpec,
    ground_truth: Option<GroundTruth>,
}

impl VoxelGrid {
    pub fn new(
        width: usize,
        height: usize,
        mask: Vec<bool>,
        signal: Vec<PwiTimeSeries>,
        spec: AcquisitionSpec,
        ground_truth: Option<GroundTruth>,
    ) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::dataset(format!(
                "mask has {} entries for a {width}x{height} grid",
                mask.len()
            )));
        }
        let n = mask.iter().filter(|&&m| m).count();
        if signal.len() != n {
            return Err(Error::dataset(format!(
                "{} signal series for {n} masked voxels",
                signal.len()
            )));
        }
        if let Some(s) = signal.iter().find(|s| s.values.len() != spec.n_points()) {
            return Err(Error::dataset(format!(
                "series has {} samples, acquisition has {}",
                s.values.len(),
                spec.n_points()
            )));
        }
        if let Some(gt) = &ground_truth {
            if gt.cbf_map.len() != n || gt.at_map.len() != n {
                return Err(Error::dataset("ground-truth maps must cover exactly the masked voxels"));
            }
            if !(gt.t1b > 0.0 && gt.t1b.is_finite()) {
                return Err(Error::dataset(format!("ground-truth t1b must be > 0, got {}", gt.t1b)));
            }
        }
        Ok(Self {
            width,
            height,
            mask,
            signal,
            spec,
            ground_truth,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn spec(&self) -> &AcquisitionSpec {
        &self.spec
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.ground_truth.as_ref()
    }

    /// Series of the masked voxels in row-major order.
    pub fn signals(&self) -> &[PwiTimeSeries] {
        &self.signal
    }

    /// Row-major grid indices of the masked voxels.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn n_masked(&self) -> usize {
        self.signal.len()
    }

    pub fn in_mask(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.mask[y * self.width + x]
    }

    /// Position of grid index `index` within the masked-voxel ordering.
    pub fn masked_position(&self, index: usize) -> Option<usize> {
        if index >= self.mask.len() || !self.mask[index] {
            return None;
        }
        Some(self.mask[..index].iter().filter(|&&m| m).count())
    }

    /// Series at grid index `index`, `None` outside the mask.
    pub fn series(&self, index: usize) -> Option<&PwiTimeSeries> {
        self.masked_position(index).map(|k| &self.signal[k])
    }

    /// Spreads per-masked-voxel values over the full grid, NaN elsewhere.
    pub fn to_map(&self, masked_values: &[f64]) -> ParamMap {
        assert_eq!(masked_values.len(), self.n_masked(), "one value per masked voxel");
        let mut values = vec![f64::NAN; self.mask.len()];
        for (i, v) in self.masked_indices().into_iter().zip(masked_values) {
            values[i] = *v;
        }
        ParamMap {
            width: self.width,
            height: self.height,
            values,
        }
    }
}

/// A full-grid parameter map; NaN marks voxels without an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ParamMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    /// Row-major region of interest; `None` covers the whole grid.
    pub mask: Option<Vec<bool>>,
    pub cbf_range: (f64, f64),
    /// ms.
    pub at_range: (f64, f64),
    /// ms.
    pub t1b: f64,
    pub tau: f64,
    /// Gaussian filter width of the parameter fields, in voxels.
    pub smoothness: f64,
    /// Noise standard deviation as a fraction of the grid-wide peak noiseless signal.
    pub noise_std: f64,
    pub times_ms: Vec<f64>,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            mask: None,
            cbf_range: (0.005, 0.02),
            at_range: (400.0, 1400.0),
            t1b: 1800.0,
            tau: DEFAULT_TAU_MS,
            smoothness: 2.0,
            noise_std: 0.0,
            times_ms: AcquisitionSpec::default().times().to_vec(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("phantom grid must be at least 1x1"));
        }
        if let Some(mask) = &self.mask {
            if mask.len() != self.width * self.height {
                return Err(Error::config("phantom mask does not match the grid size"));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::config("phantom mask is empty"));
            }
        }
        for (name, (lo, hi)) in [("cbf_range", self.cbf_range), ("at_range", self.at_range)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config(format!("{name} must be positive and ordered, got ({lo}, {hi})")));
            }
        }
        for (name, v) in [("t1b", self.t1b), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::config("smoothness must be >= 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        AcquisitionSpec::from_times(self.times_ms.clone()).map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }
}

/// Builds a synthetic grid. Identical configurations give identical grids.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<VoxelGrid> {
    cfg.validate()?;
    let spec = AcquisitionSpec::from_times(cfg.times_ms.clone())?;
    let (w, h) = (cfg.width, cfg.height);
    let mask = cfg.mask.clone().unwrap_or_else(|| vec![true; w * h]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let cbf_field = smooth_field(&mut rng, w, h, cfg.smoothness);
    let at_field = smooth_field(&mut rng, w, h, cfg.smoothness);
    let masked: Vec<usize> = (0..w * h).filter(|&i| mask[i]).collect();
    let cbf_map = rescale(&masked.iter().map(|&i| cbf_field[i]).collect::<Vec<_>>(), cfg.cbf_range);
    let at_map = rescale(&masked.iter().map(|&i| at_field[i]).collect::<Vec<_>>(), cfg.at_range);

    let mut clean = Vec::with_capacity(masked.len());
    for (&cbf, &at) in cbf_map.iter().zip(&at_map) {
        let p = HaemodynamicParams::with_tau(cbf, at, cfg.t1b, cfg.tau)?;
        let series = spec
            .times()
            .iter()
            .map(|&t| evaluate_signal(&p, t))
            .collect::<Result<Vec<_>>>()?;
        clean.push(series);
    }
    let peak = clean.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    let sigma = cfg.noise_std * peak;
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
        for v in clean.iter_mut().flatten() {
            *v += noise.sample(&mut rng);
        }
    }
    let signal = clean
        .into_iter()
        .map(|v| PwiTimeSeries::new(v, &spec))
        .collect::<Result<Vec<_>>>()?;
    VoxelGrid::new(
        w,
        h,
        mask,
        signal,
        spec,
        Some(GroundTruth {
            cbf_map,
            at_map,
            t1b: cfg.t1b,
        }),
    )
}

/// Largest noiseless sample of a grid with ground truth.
pub fn peak_clean_signal(grid: &VoxelGrid, tau: f64) -> Option<f64> {
    let gt = grid.ground_truth()?;
    let mut peak = 0.0_f64;
    for (&cbf, &at) in gt.cbf_map.iter().zip(&gt.at_map) {
        for &t in grid.spec().times() {
            let p = HaemodynamicParams::with_tau(cbf, at, gt.t1b, tau).ok()?;
            peak = peak.max(evaluate_signal(&p, t).ok()?.abs());
        }
    }
    Some(peak)
}

/// White noise blurred by a separable Gaussian with reflecting edges.
fn smooth_field(rng: &mut ChaCha8Rng, w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let noise: Vec<f64> = (0..w * h).map(|_| StandardNormal.sample(rng)).collect();
    if sigma == 0.0 {
        return noise;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let period = 2 * n;
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - 1 - j;
        }
        j as usize
    };
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * noise[y * w + reflect(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * rows[reflect(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Min-max maps `values` onto `[lo, hi]`; a constant field lands on the midpoint.
fn rescale(values: &[f64], (lo, hi): (f64, f64)) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return vec![0.5 * (lo + hi); values.len()];
    }
    values
        .iter()
        .map(|v| (lo + (hi - lo) * (v - min) / (max - min)).clamp(lo, hi))
        .collect()
}

#[derive(Serialize)]
struct DatasetOut<'a> {
    schema_version: u32,
    times_ms: &'a [f64],
    width: usize,
    height: usize,
    mask: Vec<u8>,
    signal: Vec<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ground_truth: Option<&'a GroundTruth>,
}

/// Serialises a grid to the JSON dataset format.
pub fn dataset_to_json(grid: &VoxelGrid) -> String {
    let doc = DatasetOut {
        schema_version: SCHEMA_VERSION,
        times_ms: grid.spec.times(),
        width: grid.width,
        height: grid.height,
        mask: grid.mask.iter().map(|&m| m as u8).collect(),
        signal: grid.signal.iter().map(|s| s.values()).collect(),
        ground_truth: grid.ground_truth.as_ref(),
    };
    serde_json::to_string(&doc).expect("dataset serialisation cannot fail")
}

/// Parses the JSON dataset format. Errors name the offending field.
pub fn dataset_from_json(text: &str) -> Result<VoxelGrid> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    let version: u32 = field(&doc, "schema_version")?;
    if version != SCHEMA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let times: Vec<f64> = field(&doc, "times_ms")?;
    let width: usize = field(&doc, "width")?;
    let height: usize = field(&doc, "height")?;
    let mask: Vec<u8> = field(&doc, "mask")?;
    let signal: Vec<Vec<f64>> = field(&doc, "signal")?;
    let ground_truth: Option<GroundTruth> = match doc.get("ground_truth") {
        None | Some(Value::Null) => None,
        Some(_) => Some(field(&doc, "ground_truth")?),
    };
    let spec = AcquisitionSpec::from_times(times).map_err(|e| Error::Parse {
        field: "times_ms".into(),
        message: e.to_string(),
    })?;
    if let Some(bad) = mask.iter().find(|&&m| m > 1) {
        return Err(Error::Parse {
            field: "mask".into(),
            message: format!("entries must be 0 or 1, found {bad}"),
        });
    }
    let signal = signal
        .into_iter()
        .map(|v| PwiTimeSeries::new(v, &spec))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Parse {
            field: "signal".into(),
            message: e.to_string(),
        })?;
    VoxelGrid::new(
        width,
        height,
        mask.into_iter().map(|m| m == 1).collect(),
        signal,
        spec,
        ground_truth,
    )
}

fn field<T: for<'de> Deserialize<'de>>(doc: &Value, name: &str) -> Result<T> {
    let v = doc.get(name).ok_or_else(|| Error::Parse {
        field: name.into(),
        message: "missing".into(),
    })?;
    T::deserialize(v).map_err(|e| Error::Parse {
        field: name.into(),
        message: e.to_string(),
    })
}

pub fn save_dataset(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_json(grid))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    dataset_from_json(&fs::read_to_string(path)?)
}

/// CSV text of a map: `width,height` then one comma-separated line per row.
pub fn map_to_csv(map: &ParamMap) -> String {
    let mut out = format!("{},{}\n", map.width, map.height);
    for row in map.values.chunks(map.width.max(1)) {
        let cells: Vec<String> = row
            .iter()
            .map(|v| if v.is_nan() { "nan".to_string() } else { v.to_string() })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn map_from_csv(text: &str) -> Result<ParamMap> {
    let parse_err = |message: String| Error::Parse {
        field: "csv".into(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(format!("header: {e}")))?;
    let [width, height] = dims[..] else {
        return Err(parse_err(format!("header must be `width,height`, got `{header}`")));
    };
    let mut values = Vec::with_capacity(width * height);
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(parse_err(format!("row {row} has {} cells, expected {width}", cells.len())));
        }
        for c in cells {
            let c = c.trim();
            let v = if c.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                c.parse().map_err(|e| parse_err(format!("row {row}: `{c}`: {e}")))?
            };
            values.push(v);
        }
    }
    if values.len() != width * height {
        return Err(parse_err(format!("{} values for a {width}x{height} map", values.len())));
    }
    Ok(ParamMap { width, height, values })
}

pub fn write_map_csv(map: &ParamMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, map_to_csv(map))?;
    Ok(())
}
