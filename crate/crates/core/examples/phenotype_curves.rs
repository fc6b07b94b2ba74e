// Groups units into phenotypes by k-means on their mean latent state and
// draws per-phenotype curves of the estimated mean outcome by action.
// Writes the curves as CSV and SVG into the directory given as argument.

use latent_match::eval::{svg_chart, write_curves_csv};
use latent_match::pipeline::{run_pipeline, RunConfig};

fn main() -> latent_match::Result<()> {
    let mut cfg = RunConfig { baselines: false, ..RunConfig::default() };
    cfg.dgp.n_units = 800;
    cfg.train.epochs = 10;
    let out = run_pipeline(&cfg, None)?;
    println!("k-means objective by iteration {:?}", out.phenotypes.objective.iter().map(|o| o.round()).collect::<Vec<_>>());
    for c in &out.curves {
        let n = c.points.first().map_or(0, |p| p.n);
        let means: Vec<String> = c.points.iter().map(|p| format!("{:.2}", p.mean)).collect();
        println!("{:<12} n={n:<4} peak at action {:?}: {}", c.group, c.peak(), means.join(" "));
    }
    if let Some(dir) = std::env::args().nth(1) {
        let dir = std::path::PathBuf::from(dir);
        std::fs::create_dir_all(&dir)?;
        write_curves_csv(&out.curves, &dir.join("curves.csv"))?;
        std::fs::write(dir.join("curves.svg"), svg_chart(&out.curves, "Mean estimate by phenotype"))?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
