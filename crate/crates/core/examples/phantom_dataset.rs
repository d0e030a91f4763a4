//! Generates a noisy phantom, saves it, and reloads it.

use asl_pinn::phantom::{generate_phantom, load_dataset, save_dataset, PhantomConfig};

fn main() -> anyhow::Result<()> {
    let cfg = PhantomConfig {
        width: 6,
        height: 6,
        noise_std: 0.2,
        seed: 42,
        ..PhantomConfig::default()
    };
    let grid = generate_phantom(&cfg)?;
    let path = std::env::temp_dir().join("asl_pinn_phantom.json");
    save_dataset(&grid, &path)?;
    let back = load_dataset(&path)?;
    assert_eq!(grid, back);
    let gt = grid.ground_truth().expect("synthetic data carry ground truth");
    println!("wrote {} ({} voxels)", path.display(), grid.n_masked());
    println!("true CBF map:");
    for row in grid.to_map(&gt.cbf_map).values.chunks(grid.width()) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("  {}", cells.join(" "));
    }
    Ok(())
}
