//! Command-line surface: argument types and the four subcommands.
//!
//! Every subcommand reads an optional JSON config file and then applies flag
//! overrides, so a flag always wins over the file.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsf::LsfMode;
use crate::metrics::{evaluate_fit, render_table, MetricsReport};
use crate::phantom::{generate_phantom, load_dataset, save_dataset, write_map_csv, ParamMap, PhantomConfig};
use crate::roi::{fit_grid, FitOptions, Method, RoiFit};

/// Version tag of results and report files.
pub const RESULTS_VERSION: u32 = 1;
/// Loss histories in results files are thinned to at most this many points.
pub const MAX_HISTORY_POINTS: usize = 500;

#[derive(Debug, Parser)]
#[command(name = "asl-pinn", version, about = "Perfusion parameter mapping from multi-delay ASL signals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset (or one per noise level).
    Generate(GenerateArgs),
    /// Fit every masked voxel of a dataset.
    Fit(FitArgs),
    /// Score results against the dataset's ground truth.
    Evaluate(EvaluateArgs),
    /// Write parameter maps from a results file.
    ExportMaps(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Output dataset path. Sweeps insert `_std<value>` before the extension.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// JSON phantom configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Comma-separated noise levels; one dataset each.
    #[arg(long, value_delimiter = ',', conflicts_with = "noise_std")]
    pub noise_sweep: Vec<f64>,
    #[arg(long)]
    pub smoothness: Option<f64>,
    #[arg(long)]
    pub t1b: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// lsf, lsf-multi, pinn or supinn.
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// JSON fit options (`train`, `lsf`, `t1b_fixed`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; 0 uses every logical core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Fix blood T1 (ms) for least squares; implies fixed-t1b mode.
    #[arg(long)]
    pub t1b_fixed: Option<f64>,
    /// Iterations of the three training tiers, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub iterations: Option<Vec<usize>>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub n_collocation: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Results files; each is paired with the dataset at the same position.
    #[arg(long, required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    pub dataset: Vec<PathBuf>,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Also write 8-bit grayscale PNGs.
    #[arg(long)]
    pub png: bool,
}

/// Contents of `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub options: FitOptions,
    pub fit: RoiFit,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub report: MetricsReport,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        field: what.to_string(),
        message: format!("{}: {e}", path.display()),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// `data.json` with noise 0.1 becomes `data_std0.1.json`.
pub fn sweep_path(base: &Path, noise_std: f64) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}_std{noise_std}.{}", ext.to_string_lossy()),
        None => format!("{stem}_std{noise_std}"),
    };
    base.with_file_name(name)
}

/// Writes one dataset, or one per sweep level. Returns the paths written.
pub fn cmd_generate(args: &GenerateArgs) -> Result<Vec<PathBuf>> {
    let mut cfg: PhantomConfig = match &args.config {
        Some(p) => read_json(p, "phantom config")?,
        None => PhantomConfig::default(),
    };
    cfg.seed = args.seed;
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.height {
        cfg.height = v;
    }
    if let Some(v) = args.noise_std {
        cfg.noise_std = v;
    }
    if let Some(v) = args.smoothness {
        cfg.smoothness = v;
    }
    if let Some(v) = args.t1b {
        cfg.t1b = v;
    }
    let jobs: Vec<(PathBuf, PhantomConfig)> = if args.noise_sweep.is_empty() {
        vec![(args.output.clone(), cfg)]
    } else {
        args.noise_sweep
            .iter()
            .map(|&std| {
                (
                    sweep_path(&args.output, std),
                    PhantomConfig {
                        noise_std: std,
                        ..cfg.clone()
                    },
                )
            })
            .collect()
    };
    let mut written = Vec::new();
    for (path, cfg) in jobs {
        let grid = generate_phantom(&cfg)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        save_dataset(&grid, &path)?;
        println!(
            "{}: {}x{} grid, {} masked voxels, {} time points, noise std {}",
            path.display(),
            grid.width(),
            grid.height(),
            grid.n_masked(),
            grid.spec().n_points(),
            cfg.noise_std
        );
        written.push(path);
    }
    Ok(written)
}

/// Keeps every k-th entry plus the last, at most `max` entries.
pub fn thin_history(history: &[f64], max: usize) -> Vec<f64> {
    if history.len() <= max || max < 2 {
        return history.to_vec();
    }
    let stride = (history.len() - 1).div_ceil(max - 1);
    let mut out: Vec<f64> = history.iter().step_by(stride).copied().collect();
    if !(history.len() - 1).is_multiple_of(stride) {
        out.push(*history.last().expect("non-empty"));
    }
    out
}

/// Summary of a completed fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub results_path: PathBuf,
    pub voxels: usize,
    pub failures: usize,
}

fn fit_options(args: &FitArgs) -> Result<FitOptions> {
    let mut opts: FitOptions = match &args.config {
        Some(p) => read_json(p, "fit config")?,
        None => FitOptions::default(),
    };
    opts.train.seed = args.seed;
    if let Some(t) = args.t1b_fixed {
        opts.t1b_fixed = Some(t);
    }
    opts.lsf.mode = if opts.t1b_fixed.is_some() {
        LsfMode::FixedT1b
    } else {
        LsfMode::FreeT1b
    };
    if let Some(counts) = &args.iterations {
        let counts: [usize; 3] = counts
            .as_slice()
            .try_into()
            .map_err(|_| Error::Usage("--iterations takes exactly three counts".into()))?;
        opts.train = opts.train.with_iterations(counts);
    }
    if let Some(g) = args.gamma {
        opts.train.gamma = g;
    }
    if let Some(n) = args.n_collocation {
        opts.train.n_collocation = n;
    }
    opts.train.validate()?;
    opts.lsf.validate()?;
    Ok(opts)
}

/// Fits a dataset and writes `results.json` plus CSV maps to the output directory.
pub fn cmd_fit(args: &FitArgs) -> Result<FitOutcome> {
    let method: Method = args.method.parse()?;
    let opts = fit_options(args)?;
    let grid = load_dataset(&args.dataset)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    log::info!("fitting {} voxels with {method}", grid.n_masked());
    let mut fit = pool.install(|| fit_grid(&grid, method, &opts))?;
    for v in &mut fit.voxels {
        if let Some(r) = &mut v.result {
            r.loss_history = thin_history(&r.loss_history, MAX_HISTORY_POINTS);
        }
    }
    fs::create_dir_all(&args.output_dir)?;
    write_maps(&fit, &args.output_dir, false)?;
    let results_path = args.output_dir.join("results.json");
    let failures = fit.failures();
    let voxels = fit.voxels.len();
    write_json(
        &results_path,
        &ResultsFile {
            schema_version: RESULTS_VERSION,
            options: opts,
            fit,
        },
    )?;
    println!("{}: {voxels} voxels, {failures} failed", results_path.display());
    Ok(FitOutcome {
        results_path,
        voxels,
        failures,
    })
}

pub fn load_results(path: &Path) -> Result<ResultsFile> {
    let file: ResultsFile = read_json(path, "results")?;
    if file.schema_version != RESULTS_VERSION {
        return Err(Error::Version {
            found: file.schema_version,
            expected: RESULTS_VERSION,
        });
    }
    Ok(file)
}

/// Scores each results/dataset pair and writes `report.json` and `report.txt`.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<ReportFile> {
    if args.results.len() != args.dataset.len() {
        return Err(Error::Usage(format!(
            "{} results files but {} datasets",
            args.results.len(),
            args.dataset.len()
        )));
    }
    let mut rows = Vec::new();
    for (results, dataset) in args.results.iter().zip(&args.dataset) {
        let file = load_results(results)?;
        let grid = load_dataset(dataset)?;
        if grid.ground_truth().is_none() {
            return Err(Error::dataset(format!("{} has no ground truth", dataset.display())));
        }
        let label = dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        rows.push(ReportRow {
            label,
            report: evaluate_fit(&file.fit, &grid)?,
        });
    }
    let report = ReportFile {
        schema_version: RESULTS_VERSION,
        rows,
    };
    fs::create_dir_all(&args.output_dir)?;
    write_json(&args.output_dir.join("report.json"), &report)?;
    let (reports, labels): (Vec<_>, Vec<_>) = report.rows.iter().map(|r| (r.report.clone(), r.label.clone())).unzip();
    let table = render_table(&reports, &labels);
    fs::write(args.output_dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(report)
}

/// Linear 8-bit grayscale between the finite minimum and maximum; NaN is black.
pub fn map_to_png(map: &ParamMap, path: &Path) -> Result<()> {
    let finite = map.values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = image::GrayImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let v = map.get(x as usize, y as usize);
        let level = if v.is_finite() { ((v - lo) / span * 255.0).round() } else { 0.0 };
        image::Luma([level as u8])
    });
    img.save(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn write_maps(fit: &RoiFit, dir: &Path, png: bool) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, map) in [("cbf", fit.cbf_map()), ("at", fit.at_map()), ("t1b", fit.t1b_map())] {
        let csv = dir.join(format!("{name}.csv"));
        write_map_csv(&map, &csv)?;
        written.push(csv);
        if png {
            let img = dir.join(format!("{name}.png"));
            map_to_png(&map, &img)?;
            written.push(img);
        }
    }
    Ok(written)
}

/// Writes `cbf`, `at` and `t1b` maps as CSV (and PNG on request).
pub fn cmd_export_maps(args: &ExportArgs) -> Result<Vec<PathBuf>> {
    let file = load_results(&args.results)?;
    fs::create_dir_all(&args.output_dir)?;
    let written = write_maps(&file.fit, &args.output_dir, args.png)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

/// Process exit code for an error: 1 usage or configuration, 2 data.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) | Error::ParameterDomain { .. } => 1,
        _ => 2,
    }
}

/// Exit code 3 marks a fit that completed with per-voxel failures.
pub const EXIT_VOXEL_FAILURES: u8 = 3;

/// Runs a parsed command and returns the process exit code on success.
pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|_| 0),
        Command::Fit(a) => cmd_fit(a).map(|o| if o.failures > 0 { EXIT_VOXEL_FAILURES } else { 0 }),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| 0),
        Command::ExportMaps(a) => cmd_export_maps(a).map(|_| 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_paths_encode_the_level() {
        assert_eq!(sweep_path(Path::new("out/data.json"), 0.1), PathBuf::from("out/data_std0.1.json"));
        assert_eq!(sweep_path(Path::new("data"), 0.5), PathBuf::from("data_std0.5"));
    }

    #[test]
    fn history_thinning_keeps_the_ends() {
        let h: Vec<f64> = (0..50_001).map(f64::from).collect();
        let t = thin_history(&h, 500);
        assert!(t.len() <= 500);
        assert_eq!(t[0], 0.0);
        assert_eq!(*t.last().unwrap(), 50_000.0);
        assert_eq!(thin_history(&h[..10], 500).len(), 10);
        let odd: Vec<f64> = (0..11).map(f64::from).collect();
        assert_eq!(thin_history(&odd, 4), vec![0.0, 4.0, 8.0, 10.0]);
    }

    #[test]
    fn parser_accepts_the_four_subcommands() {
        for argv in [
            vec!["asl-pinn", "generate", "--output", "d.json", "--seed", "7"],
            vec!["asl-pinn", "fit", "--dataset", "d.json", "--method", "lsf", "--output-dir", "o", "--seed", "1"],
            vec!["asl-pinn", "evaluate", "--results", "r.json", "--dataset", "d.json", "--output-dir", "o"],
            vec!["asl-pinn", "export-maps", "--results", "r.json", "--output-dir", "o", "--png"],
        ] {
            Cli::try_parse_from(argv).unwrap();
        }
        assert!(Cli::try_parse_from(["asl-pinn", "generate", "--output", "d.json"]).is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Usage("x".into())), 1);
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Dataset("x".into())), 2);
        assert_eq!(exit_code(&Error::Version { found: 9, expected: 1 }), 2);
    }
}
