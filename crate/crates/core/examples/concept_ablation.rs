// Re-runs the pipeline with restricted concept sets and with different
// look-back windows, and compares the resulting action curves to ALL.

use latent_match::eval::{concept_ablation, lookback_sensitivity};
use latent_match::history::ConceptSet;
use latent_match::pipeline::RunConfig;
use latent_match::synthgen::generate;

fn main() -> latent_match::Result<()> {
    let mut cfg = RunConfig { baselines: false, ..RunConfig::default() };
    cfg.dgp.n_units = 600;
    cfg.train.epochs = 8;
    let data = generate(&cfg.dgp_config())?;
    for name in ["ALL", "HEART", "ACTIVITY"] {
        let ab = concept_ablation(&cfg, &data, &ConceptSet::named(name)?, 30)?;
        let d: Vec<String> = ab.difference.iter().map(|x| format!("{x:+.3}")).collect();
        println!("{name:<9} minus ALL: {}", d.join(" "));
    }
    let report = lookback_sensitivity(&cfg, &data, &[30, 90, 180])?;
    let d: Vec<String> = report.max_deviation.iter().map(|x| format!("{x:.3}")).collect();
    println!("largest spread across 30/90/180-day look-backs: {}", d.join(" "));
    Ok(())
}
