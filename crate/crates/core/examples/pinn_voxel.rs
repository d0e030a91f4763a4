//! Single-voxel PINN fit. Pass `full` for the complete 50 000-step schedule.

use asl_pinn::pinn::{fit_voxel_pinn, TrainConfig};
use asl_pinn::signal::{evaluate_signal, AcquisitionSpec, HaemodynamicParams};

fn main() -> anyhow::Result<()> {
    let full = std::env::args().any(|a| a == "full");
    let spec = AcquisitionSpec::default();
    let truth = HaemodynamicParams::new(0.012, 800.0, 1800.0)?;
    let series: Vec<f64> = spec
        .times()
        .iter()
        .map(|&t| evaluate_signal(&truth, t))
        .collect::<Result<_, _>>()?;
    let cfg = if full {
        TrainConfig::default()
    } else {
        TrainConfig::default().with_iterations([2_000, 6_000, 2_000])
    };
    let fit = fit_voxel_pinn(&series, &spec, &cfg)?;
    let p = fit.params;
    println!("{} iterations in {:.1}s", cfg.horizon(), fit.wall_time);
    println!("cbf {:.5} (true {:.5})", p.cbf, truth.cbf);
    println!("at  {:.1} (true {:.1})", p.at, truth.at);
    println!("t1b {:.1} (true {:.1})", p.t1b, truth.t1b);
    println!("final loss {:.3e}", fit.loss_history.last().copied().unwrap_or(f64::NAN));
    Ok(())
}
