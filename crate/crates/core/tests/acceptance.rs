//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line each.
//!
//! The full run trains several hundred networks and takes a few hours on one
//! core. Set `ASL_PINN_ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero
//! exit status. `ASL_PINN_ACCEPTANCE_ITERATIONS=a,b,c` shortens training for
//! checking the harness itself; results are then not meaningful.

use std::collections::BTreeMap;
use std::process::Command;
use std::time::Instant;

use asl_pinn::lsf::LsfMode;
use asl_pinn::metrics::{evaluate_runs, relative_error, MetricsReport};
use asl_pinn::network::{MlpPinn, TrainablePhysical};
use asl_pinn::phantom::{generate_phantom, PhantomConfig, VoxelGrid};
use asl_pinn::pinn::{single_voxel_gradients, single_voxel_objective, TrainConfig};
use asl_pinn::roi::{fit_grid, FitOptions, Method, RoiFit};
use asl_pinn::signal::{
    evaluate_signal, integrate_smoothed_ode, peak_signal, AcquisitionSpec, HaemodynamicParams,
    SmoothingConfig,
};
use asl_pinn::supinn::{compute_all_weights, raw_uncertainty_weight, rescale_weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOISE_LEVELS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const SEEDS: [u64; 3] = [0, 1, 2];
const SWEEP_METHODS: [Method; 4] = [Method::Lsf, Method::LsfMulti, Method::Pinn, Method::Supinn];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Ok(spec) = std::env::var("ASL_PINN_ACCEPTANCE_ITERATIONS") {
        let counts: Vec<usize> = spec.split(',').map(|s| s.trim().parse().expect("iteration count")).collect();
        cfg = cfg.with_iterations(counts.try_into().expect("three iteration counts"));
    }
    cfg
}

fn options(seed: u64, t1b_fixed: Option<f64>) -> FitOptions {
    let mut opts = FitOptions {
        train: train_config(seed),
        ..FitOptions::default()
    };
    opts.t1b_fixed = t1b_fixed;
    opts.lsf.mode = if t1b_fixed.is_some() {
        LsfMode::FixedT1b
    } else {
        LsfMode::FreeT1b
    };
    opts
}

fn phantom(size: usize, noise_std: f64, seed: u64) -> VoxelGrid {
    generate_phantom(&PhantomConfig {
        width: size,
        height: size,
        noise_std,
        seed: 100 + seed,
        ..PhantomConfig::default()
    })
    .expect("phantom")
}

fn within(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= (rel * a.abs().max(b.abs())).max(abs)
}

// Smoothed ODE integrated with RK4 against the closed form.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let smoothing = SmoothingConfig::default();
    let times: Vec<f64> = (1..=720).map(|i| 5.0 * i as f64).collect();
    let spec = AcquisitionSpec::from_times(times).expect("grid");
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let p = HaemodynamicParams::new(
            rng.random_range(0.002..0.03),
            rng.random_range(200.0..2000.0),
            rng.random_range(1000.0..3000.0),
        )
        .expect("params");
        let rk4 = integrate_smoothed_ode(&p, &smoothing, &spec, 1.0).expect("rk4");
        let peak = peak_signal(&p);
        for (&t, s) in spec.times().iter().zip(rk4) {
            let exact = evaluate_signal(&p, t).expect("signal");
            worst = worst.max((s - exact).abs() / peak);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst <= 0.02 && secs < 1.0,
        format!("max deviation {:.3}% of peak over 50 draws, {secs:.2}s", worst * 100.0),
    )
}

// Reverse-mode objective gradients and the forward tangent against central differences.
fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = AcquisitionSpec::default();
    let cfg = TrainConfig::default();
    let (mut checked, mut bad) = (0usize, Vec::new());
    let mut check = |what: &str, analytic: f64, numeric: f64| {
        checked += 1;
        if !within(analytic, numeric, 1e-4, 1e-7) {
            bad.push(format!("{what}: {analytic:e} vs {numeric:e}"));
        }
    };
    for draw in 0..100 {
        let truth = HaemodynamicParams::new(
            rng.random_range(0.005..0.02),
            rng.random_range(400.0..1400.0),
            rng.random_range(1200.0..2400.0),
        )
        .expect("params");
        let series: Vec<f64> = spec
            .times()
            .iter()
            .map(|&t| evaluate_signal(&truth, t).expect("signal") + rng.random_range(-0.5..0.5))
            .collect();
        let weights: Vec<f64> = (0..series.len()).map(|_| rng.random_range(0.1..=1.0)).collect();
        let net = MlpPinn::glorot(rng.random(), 3600.0, rng.random_range(1.0..10.0));
        let mut phys = TrainablePhysical::at_scales(0.01, 900.0, 1800.0);
        phys.raw = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)];
        let g = single_voxel_gradients(&net, &phys, &series, &weights, &spec, &cfg).expect("gradients");
        let objective = |net: &MlpPinn, phys: &TrainablePhysical| {
            single_voxel_objective(net, phys, &series, &weights, &spec, &cfg).expect("objective")
        };
        let h = 1e-6;
        let analytic = [g.cbf[0], g.at[0], g.t1b];
        for (k, name) in ["cbf", "at", "t1b"].iter().enumerate() {
            let (mut up, mut down) = (phys, phys);
            up.raw[k] += h;
            down.raw[k] -= h;
            let numeric = (objective(&net, &up) - objective(&net, &down)) / (2.0 * h);
            check(&format!("draw {draw} {name}"), analytic[k].expect("trainable"), numeric);
        }
        for (t, grad) in g.nets[0].iter().enumerate() {
            for i in 0..grad.len() {
                let (mut up, mut down) = (net.clone(), net.clone());
                up.tensors_mut()[t].data_mut()[i] += h;
                down.tensors_mut()[t].data_mut()[i] -= h;
                let numeric = (objective(&up, &phys) - objective(&down, &phys)) / (2.0 * h);
                check(&format!("draw {draw} tensor {t}[{i}]"), grad.data()[i], numeric);
            }
        }
        let times: Vec<f64> = (0..5).map(|_| rng.random_range(10.0..3590.0)).collect();
        let (_, tangent) = net.evaluate(&times);
        for (&t, &d) in times.iter().zip(&tangent) {
            let dt = 1e-2;
            let numeric = (net.forward(t + dt) - net.forward(t - dt)) / (2.0 * dt);
            check(&format!("draw {draw} ds/dt at {t:.0}"), d, numeric);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!("{checked} gradient entries, {} mismatches, {secs:.1}s", bad.len());
    if let Some(first) = bad.first() {
        detail.push_str(&format!(" (first: {first})"));
    }
    Outcome::new(bad.is_empty() && secs < 10.0, detail)
}

fn max_abs_re(fit: &RoiFit, grid: &VoxelGrid, value: impl Fn(&HaemodynamicParams) -> f64, truth: impl Fn(usize) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, v) in fit.voxels.iter().enumerate() {
        debug_assert_eq!(grid.masked_indices()[k], v.index);
        worst = match &v.result {
            Some(r) => worst.max(relative_error(value(&r.params), truth(k)).expect("truth").abs()),
            None => f64::INFINITY,
        };
    }
    worst
}

fn max_wall_time(fit: &RoiFit) -> f64 {
    fit.voxels
        .iter()
        .filter_map(|v| v.result.as_ref().map(|r| r.wall_time))
        .fold(0.0, f64::max)
}

// Noiseless 4x4 recovery for all three per-voxel methods.
fn criterion_3() -> Outcome {
    let grid = phantom(4, 0.0, 0);
    let gt = grid.ground_truth().expect("ground truth").clone();
    let cbf = |k: usize| gt.cbf_map[k];
    let at = |k: usize| gt.at_map[k];
    let t1b = |_: usize| gt.t1b;

    let start = Instant::now();
    let lsf = fit_grid(&grid, Method::Lsf, &options(0, Some(gt.t1b))).expect("lsf");
    let lsf_secs = start.elapsed().as_secs_f64();
    let lsf_err = [
        max_abs_re(&lsf, &grid, |p| p.cbf, cbf),
        max_abs_re(&lsf, &grid, |p| p.at, at),
    ];
    eprintln!("  noiseless pinn...");
    let pinn = fit_grid(&grid, Method::Pinn, &options(0, None)).expect("pinn");
    let pinn_err = [
        max_abs_re(&pinn, &grid, |p| p.cbf, cbf),
        max_abs_re(&pinn, &grid, |p| p.at, at),
        max_abs_re(&pinn, &grid, |p| p.t1b, t1b),
    ];
    eprintln!("  noiseless supinn...");
    let supinn = fit_grid(&grid, Method::Supinn, &options(0, None)).expect("supinn");
    let supinn_err = [
        max_abs_re(&supinn, &grid, |p| p.cbf, cbf),
        max_abs_re(&supinn, &grid, |p| p.at, at),
        max_abs_re(&supinn, &grid, |p| p.t1b, t1b),
    ];
    let subject_t1b_err = supinn
        .t1b
        .map_or(f64::INFINITY, |v| relative_error(v, gt.t1b).expect("truth").abs());
    let (pinn_secs, supinn_secs) = (max_wall_time(&pinn), max_wall_time(&supinn));

    let pass = lsf_err.iter().all(|&e| e <= 0.1)
        && lsf_secs < 1.0
        && pinn_err[0] <= 5.0
        && pinn_err[1] <= 5.0
        && pinn_err[2] <= 10.0
        && supinn_err.iter().all(|&e| e <= 5.0)
        && subject_t1b_err <= 5.0
        && pinn_secs <= 60.0
        && supinn_secs <= 60.0;
    Outcome::new(
        pass,
        format!(
            "max |RE| %: lsf cbf {:.4} at {:.4} ({lsf_secs:.2}s); pinn cbf {:.2} at {:.2} t1b {:.2}; \
             supinn cbf {:.2} at {:.2} t1b {:.2} subject t1b {:.2}; slowest voxel pinn {pinn_secs:.1}s supinn {supinn_secs:.1}s",
            lsf_err[0], lsf_err[1], pinn_err[0], pinn_err[1], pinn_err[2], supinn_err[0], supinn_err[1], supinn_err[2],
            subject_t1b_err
        ),
    )
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_asl-pinn"))
        .args(args)
        .output()
        .expect("binary runs")
}

// generate, fit with SUPINN and evaluate twice; the report files must match byte for byte.
fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let iterations = std::env::var("ASL_PINN_ACCEPTANCE_ITERATIONS").ok();
    let run = |name: &str, jobs: &str| -> Result<Vec<u8>, String> {
        let root = dir.path().join(name);
        let p = |s: &str| root.join(s).to_str().expect("utf-8 path").to_owned();
        let step = |args: Vec<String>| {
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let out = bin(&args);
            if out.status.success() {
                Ok(())
            } else {
                Err(format!("{:?} failed: {}", args.first(), String::from_utf8_lossy(&out.stderr)))
            }
        };
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        step(s(&["generate", "--output", &p("d.json"), "--seed", "21", "--width", "2", "--height", "2", "--noise-std", "0.3"]))?;
        let mut fit = s(&["fit", "--dataset", &p("d.json"), "--method", "supinn", "--output-dir", &p("fit"), "--seed", "4", "--jobs", jobs]);
        if let Some(it) = &iterations {
            fit.extend(s(&["--iterations", it]));
        }
        step(fit)?;
        step(s(&["evaluate", "--results", &p("fit/results.json"), "--dataset", &p("d.json"), "--output-dir", &p("report")]))?;
        std::fs::read(p("report/report.json")).map_err(|e| e.to_string())
    };
    match (run("a", "1"), run("b", "2")) {
        (Ok(a), Ok(b)) => Outcome::new(a == b, format!("report.json {} bytes, identical: {}", a.len(), a == b)),
        (Err(e), _) | (_, Err(e)) => Outcome::new(false, e),
    }
}

// Hand-worked weight and rescaling bounds.
fn criterion_7() -> Outcome {
    let raw = raw_uncertainty_weight(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    let mut ok = raw == 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let r: Vec<f64> = (0..12).map(|_| rng.random_range(0.01..100.0)).collect();
        let w = rescale_weights(&r);
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = w.iter().copied().fold(f64::INFINITY, f64::min);
        ok &= max == 1.0 && min == 0.1 && w.iter().all(|v| (0.1..=1.0).contains(v));
    }
    ok &= rescale_weights(&[2.0; 12]).iter().all(|&v| v == 1.0);
    let grid = phantom(6, 0.3, 0);
    let all = compute_all_weights(&grid).expect("weights");
    for w in &all {
        ok &= w.iter().all(|v| (0.1..=1.0).contains(v));
        ok &= w.contains(&1.0) && w.contains(&0.1);
    }
    Outcome::new(
        ok,
        format!("raw weight {raw} for std 2; 1000 random rescalings and {} phantom voxels within [0.1, 1] with both ends hit", all.len()),
    )
}

type Sweep = BTreeMap<(u64, Method), MetricsReport>;

fn sweep_key(noise: f64) -> u64 {
    (noise * 10.0).round() as u64
}

fn run_sweep() -> Sweep {
    let mut out = Sweep::new();
    for &noise in &NOISE_LEVELS {
        // The 0.3 level doubles as the smoothness and convergence benchmark, so it
        // gets larger grids: 3 x 36 voxels.
        let size = if sweep_key(noise) == 3 { 6 } else { 4 };
        let grids: Vec<VoxelGrid> = SEEDS.iter().map(|&s| phantom(size, noise, s)).collect();
        for method in SWEEP_METHODS {
            let start = Instant::now();
            let fits: Vec<RoiFit> = SEEDS
                .iter()
                .zip(&grids)
                .map(|(&s, g)| fit_grid(g, method, &options(s, None)).expect("fit"))
                .collect();
            let runs: Vec<(&RoiFit, &VoxelGrid)> = fits.iter().zip(&grids).collect();
            let report = evaluate_runs(&runs).expect("evaluate");
            eprintln!(
                "  noise {noise}: {} on {} voxels in {:.0}s",
                method.as_str(),
                report.voxels,
                start.elapsed().as_secs_f64()
            );
            out.insert((sweep_key(noise), method), report);
        }
    }
    out
}

fn print_sweep(sweep: &Sweep) {
    println!("noise  method     voxels  conv %   CBF RE std  AT RE std  T1b RE std  LV CBF e6   LV AT      MSE");
    for ((key, method), r) in sweep {
        println!(
            "{:<6.1} {:<10} {:>6} {:>7.1} {:>12.2} {:>10.2} {:>11.2} {:>9.3} {:>9.1} {:>10.4}",
            *key as f64 / 10.0,
            method.as_str(),
            r.voxels,
            r.convergence_rate,
            r.cbf_re.std,
            r.at_re.std,
            r.t1b_re.std,
            r.cbf_laplacian_variance.mean * 1e6,
            r.at_laplacian_variance.mean,
            r.signal_mse.mean,
        );
    }
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

// Rank orders across the noise sweep.
fn criterion_4(sweep: &Sweep) -> Outcome {
    let get = |noise: f64, m: Method| &sweep[&(sweep_key(noise), m)];
    let mut a_fail = Vec::new();
    let mut b_fail = Vec::new();
    for &noise in &NOISE_LEVELS {
        let lsf = get(noise, Method::Lsf).cbf_re.std;
        let pinn = get(noise, Method::Pinn).cbf_re.std;
        let supinn = get(noise, Method::Supinn).cbf_re.std;
        if !(lsf > pinn && lsf > supinn) {
            a_fail.push(format!("{noise}"));
        }
        let ordered = supinn <= pinn;
        if !ordered {
            b_fail.push(format!("{noise}"));
        }
    }
    let spread = |m: Method, f: fn(&MetricsReport) -> f64| -> f64 {
        let ys: Vec<f64> = NOISE_LEVELS.iter().map(|&n| f(get(n, m))).collect();
        slope(&NOISE_LEVELS, &ys)
    };
    let at = |r: &MetricsReport| r.at_re.std;
    let t1b = |r: &MetricsReport| r.t1b_re.std;
    let growth = [
        spread(Method::Pinn, at),
        spread(Method::Lsf, at),
        spread(Method::Pinn, t1b),
        spread(Method::Lsf, t1b),
    ];
    let c = growth[0] < growth[1] && growth[2] < growth[3];
    let list = |v: &[String]| if v.is_empty() { "none".to_owned() } else { v.join(", ") };
    Outcome::new(
        a_fail.is_empty() && b_fail.is_empty() && c,
        format!(
            "(a) LSF largest CBF RE std, failing levels: {}; (b) SUPINN <= PINN, failing levels: {}; \
             (c) RE std growth per unit noise, AT pinn {:.1} vs lsf {:.1}, T1b pinn {:.1} vs lsf {:.1}",
            list(&a_fail),
            list(&b_fail),
            growth[0],
            growth[1],
            growth[2],
            growth[3]
        ),
    )
}

// Smoothness and signal error orderings at noise 0.3.
fn criterion_5(sweep: &Sweep) -> Outcome {
    let r = |m: Method| &sweep[&(3, m)];
    let lv_cbf = |m: Method| r(m).cbf_laplacian_variance.mean;
    let lv_at = |m: Method| r(m).at_laplacian_variance.mean;
    let mse = |m: Method| r(m).signal_mse.mean;
    let ordered = |f: &dyn Fn(Method) -> f64| {
        f(Method::Supinn) <= f(Method::Pinn) && f(Method::Pinn) < f(Method::LsfMulti) && f(Method::LsfMulti) < f(Method::Lsf)
    };
    let cbf_ok = ordered(&lv_cbf);
    let at_ok = ordered(&lv_at);
    let mse_ok = mse(Method::Supinn) <= mse(Method::Pinn)
        && mse(Method::Pinn) < mse(Method::Lsf)
        && mse(Method::Pinn) < mse(Method::LsfMulti);
    let show = |f: &dyn Fn(Method) -> f64, scale: f64| {
        [Method::Supinn, Method::Pinn, Method::LsfMulti, Method::Lsf]
            .iter()
            .map(|&m| format!("{} {:.3}", m.as_str(), f(m) * scale))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Outcome::new(
        cbf_ok && at_ok && mse_ok,
        format!(
            "LV CBF e6 [{}] {}; LV AT [{}] {}; MSE [{}] {}",
            show(&lv_cbf, 1e6),
            if cbf_ok { "ordered" } else { "not ordered" },
            show(&lv_at, 1.0),
            if at_ok { "ordered" } else { "not ordered" },
            show(&mse, 1.0),
            if mse_ok { "ordered" } else { "not ordered" },
        ),
    )
}

// Convergence over the noise-0.3 fits.
fn criterion_6(sweep: &Sweep) -> Outcome {
    let pinn = &sweep[&(3, Method::Pinn)];
    let supinn = &sweep[&(3, Method::Supinn)];
    let enough = pinn.voxels >= 100 && supinn.voxels >= 100;
    Outcome::new(
        enough && supinn.convergence_rate == 100.0 && pinn.convergence_rate >= 99.0,
        format!(
            "supinn {:.1}% of {}, pinn {:.1}% of {}",
            supinn.convergence_rate, supinn.voxels, pinn.convergence_rate, pinn.voxels
        ),
    )
}

fn main() {
    let start = Instant::now();
    if std::env::var("ASL_PINN_ACCEPTANCE_ITERATIONS").is_ok() {
        println!("note: training iterations overridden; results are not meaningful");
    }
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(7, criterion_7());
    eprintln!("criterion 3: noiseless recovery");
    report(3, criterion_3());
    eprintln!("criterion 8: end-to-end determinism");
    report(8, criterion_8());
    eprintln!("noise sweep");
    let sweep = run_sweep();
    print_sweep(&sweep);
    report(4, criterion_4(&sweep));
    report(5, criterion_5(&sweep));
    report(6, criterion_6(&sweep));

    results.sort_by_key(|(n, _)| *n);
    println!();
    for (n, o) in &results {
        println!("criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" });
    }
    let passed = results.iter().filter(|(_, o)| o.pass).count();
    println!("{passed}/{} criteria passed in {:.0}s", results.len(), start.elapsed().as_secs_f64());
    let strict = std::env::var("ASL_PINN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
