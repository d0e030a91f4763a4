//! The generate, fit, evaluate and export-maps steps driven through the library CLI layer.

use asl_pinn::cli::{cmd_evaluate, cmd_export_maps, cmd_fit, cmd_generate, EvaluateArgs, ExportArgs, FitArgs, GenerateArgs};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("asl_pinn_pipeline");
    let dataset = dir.join("phantom.json");
    cmd_generate(&GenerateArgs {
        output: dataset.clone(),
        seed: 7,
        config: None,
        width: Some(5),
        height: Some(5),
        noise_std: Some(0.1),
        noise_sweep: vec![],
        smoothness: None,
        t1b: None,
    })?;
    let fit_dir = dir.join("lsf");
    let outcome = cmd_fit(&FitArgs {
        dataset: dataset.clone(),
        method: "lsf".into(),
        output_dir: fit_dir.clone(),
        seed: 7,
        config: None,
        jobs: 0,
        t1b_fixed: None,
        iterations: None,
        gamma: None,
        n_collocation: None,
    })?;
    cmd_evaluate(&EvaluateArgs {
        results: vec![outcome.results_path.clone()],
        dataset: vec![dataset],
        output_dir: dir.join("report"),
    })?;
    cmd_export_maps(&ExportArgs {
        results: outcome.results_path,
        output_dir: dir.join("maps"),
        png: true,
    })?;
    Ok(())
}
