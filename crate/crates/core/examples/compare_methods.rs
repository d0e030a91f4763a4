//! Fits one small noisy phantom with all four methods and prints the metrics table.
//!
//! Uses a shortened training schedule; pass `full` for the complete one.

use asl_pinn::metrics::{evaluate_fit, render_table};
use asl_pinn::phantom::{generate_phantom, PhantomConfig};
use asl_pinn::roi::{fit_grid, FitOptions, Method};

fn main() -> anyhow::Result<()> {
    let full = std::env::args().any(|a| a == "full");
    let grid = generate_phantom(&PhantomConfig {
        width: 3,
        height: 3,
        noise_std: 0.3,
        seed: 2,
        ..PhantomConfig::default()
    })?;
    let mut opts = FitOptions::default();
    if !full {
        opts.train = opts.train.with_iterations([1_000, 3_000, 1_000]);
    }
    let mut reports = Vec::new();
    for method in Method::ALL {
        let fit = fit_grid(&grid, method, &opts)?;
        reports.push(evaluate_fit(&fit, &grid)?);
    }
    let labels = vec!["std 0.3".to_string(); reports.len()];
    print!("{}", render_table(&reports, &labels));
    Ok(())
}
