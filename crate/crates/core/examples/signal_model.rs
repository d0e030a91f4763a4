//! Closed-form signal against RK4 integration of the smoothed kinetic ODE.

use asl_pinn::signal::{
    evaluate_signal, integrate_smoothed_ode, peak_signal, AcquisitionSpec, HaemodynamicParams, SmoothingConfig,
};

fn main() -> anyhow::Result<()> {
    let params = HaemodynamicParams::new(0.012, 800.0, 1800.0)?;
    let spec = AcquisitionSpec::default();
    let integrated = integrate_smoothed_ode(&params, &SmoothingConfig::default(), &spec, 1.0)?;
    let peak = peak_signal(&params);
    println!("{:>8} {:>12} {:>12} {:>10}", "t (ms)", "closed form", "RK4", "diff/peak");
    for (&t, &rk) in spec.times().iter().zip(&integrated) {
        let exact = evaluate_signal(&params, t)?;
        println!("{t:>8.0} {exact:>12.6} {rk:>12.6} {:>10.2e}", (exact - rk).abs() / peak);
    }
    Ok(())
}
