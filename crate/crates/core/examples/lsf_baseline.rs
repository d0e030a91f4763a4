//! Robust least squares in fixed- and free-T1b mode on a noisy voxel.

use asl_pinn::lsf::{fit_voxel_lsf, LsfConfig, LsfMode};
use asl_pinn::phantom::{generate_phantom, PhantomConfig};

fn main() -> anyhow::Result<()> {
    let grid = generate_phantom(&PhantomConfig {
        width: 1,
        height: 1,
        noise_std: 0.1,
        seed: 3,
        ..PhantomConfig::default()
    })?;
    let series = grid.signals()[0].values();
    let gt = grid.ground_truth().expect("synthetic");
    println!("truth: cbf {:.5} at {:.1} t1b {:.1}", gt.cbf_map[0], gt.at_map[0], gt.t1b);
    let free = fit_voxel_lsf(series, grid.spec(), &LsfConfig::default(), None)?;
    let fixed_cfg = LsfConfig {
        mode: LsfMode::FixedT1b,
        ..LsfConfig::default()
    };
    let fixed = fit_voxel_lsf(series, grid.spec(), &fixed_cfg, Some(gt.t1b))?;
    for (name, r) in [("free t1b", free), ("fixed t1b", fixed)] {
        let p = r.params;
        println!("{name:>9}: cbf {:.5} at {:.1} t1b {:.1} converged {}", p.cbf, p.at, p.t1b, r.converged);
    }
    Ok(())
}
