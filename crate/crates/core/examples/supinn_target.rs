//! Three-branch fit of one target voxel with two random companions. Takes
//! about half a minute.

use asl_pinn::phantom::{generate_phantom, PhantomConfig};
use asl_pinn::pinn::TrainConfig;
use asl_pinn::supinn::{compute_spatial_weights, fit_supinn, select_branch_voxels};

fn main() -> anyhow::Result<()> {
    let grid = generate_phantom(&PhantomConfig {
        width: 4,
        height: 4,
        noise_std: 0.2,
        seed: 1,
        ..PhantomConfig::default()
    })?;
    let target = 5;
    let selection = select_branch_voxels(&grid, target, 7)?;
    println!("branches: target {} companions {:?}", selection.target, selection.companions);
    let w = compute_spatial_weights(&grid, target)?;
    let cells: Vec<String> = w.iter().map(|v| format!("{v:.2}")).collect();
    println!("target data weights: {}", cells.join(" "));
    let cfg = TrainConfig::default();
    let fit = fit_supinn(&grid, &selection, &cfg)?;
    let gt = grid.ground_truth().expect("synthetic");
    let k = grid.masked_position(target).expect("in mask");
    let p = fit.branches[0].params;
    println!("target cbf {:.5} (true {:.5})", p.cbf, gt.cbf_map[k]);
    println!("target at  {:.1} (true {:.1})", p.at, gt.at_map[k]);
    println!("shared t1b {:.1} (true {:.1})", fit.t1b, gt.t1b);
    Ok(())
}
