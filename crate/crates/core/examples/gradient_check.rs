//! Reverse-mode objective gradients against central finite differences.

use asl_pinn::network::{MlpPinn, TrainablePhysical};
use asl_pinn::pinn::{single_voxel_gradients, single_voxel_objective, TrainConfig};
use asl_pinn::signal::{evaluate_signal, AcquisitionSpec, HaemodynamicParams};

fn main() -> anyhow::Result<()> {
    let spec = AcquisitionSpec::default();
    let truth = HaemodynamicParams::new(0.01, 900.0, 1800.0)?;
    let series: Vec<f64> = spec
        .times()
        .iter()
        .map(|&t| evaluate_signal(&truth, t))
        .collect::<Result<_, _>>()?;
    let net = MlpPinn::glorot(3, 3600.0, 10.0);
    let mut phys = TrainablePhysical::at_scales(0.008, 1000.0, 1600.0);
    phys.raw = [0.1, -0.2, 0.05];
    let cfg = TrainConfig::default();
    let w = vec![1.0; series.len()];
    let g = single_voxel_gradients(&net, &phys, &series, &w, &spec, &cfg)?;
    let h = 1e-6;
    let names = ["raw cbf", "raw at", "raw t1b"];
    let analytic = [g.cbf[0], g.at[0], g.t1b];
    for k in 0..3 {
        let (mut up, mut down) = (phys, phys);
        up.raw[k] += h;
        down.raw[k] -= h;
        let fd = (single_voxel_objective(&net, &up, &series, &w, &spec, &cfg)?
            - single_voxel_objective(&net, &down, &series, &w, &spec, &cfg)?)
            / (2.0 * h);
        let a = analytic[k].expect("not frozen");
        println!("{:>8}: reverse {a:+.6e}  central {fd:+.6e}", names[k]);
    }
    let (_, ds) = net.evaluate(&[1000.0]);
    let fd = (net.forward(1000.0 + 1e-3) - net.forward(1000.0 - 1e-3)) / 2e-3;
    println!("  ds/dt: forward {:+.6e}  central {fd:+.6e}", ds[0]);
    Ok(())
}
