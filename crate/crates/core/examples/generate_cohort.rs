// Generates a synthetic cohort with known counterfactual means, checks it
// against the dataset rules and shows one oracle row. Pass a directory to
// also write observations, outcomes and oracle files there.

use latent_match::commands::write_dataset;
use latent_match::domain::validate_dataset;
use latent_match::synthgen::{check_positivity, generate, DgpConfig};

fn main() -> latent_match::Result<()> {
    let cfg = DgpConfig { n_units: 300, seed: 7, ..DgpConfig::default() };
    let (data, oracle) = generate(&cfg)?;
    println!("{} units, {} concepts, {} observations, {} outcome records", data.unit_count(), data.concepts().len(), data.observations().len(), data.outcomes().len());
    println!("rule violations: {}", validate_dataset(&data).len());
    let pos = check_positivity(&oracle, cfg.positivity_floor);
    println!("positivity: {pos:?}");

    let row = &oracle.rows()[0];
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    println!("unit {} day {}", row.unit, row.time);
    println!("  state      {}", fmt(&row.z_star));
    println!("  propensity {}", fmt(&row.propensity));
    println!("  theta      {}", fmt(&row.theta));

    let mut counts = vec![0usize; data.action_count()];
    data.outcomes().iter().for_each(|r| counts[r.action] += 1);
    println!("actions taken {counts:?}");

    if let Some(dir) = std::env::args().nth(1) {
        std::fs::create_dir_all(&dir)?;
        write_dataset(std::path::Path::new(&dir), &data, &oracle)?;
        println!("wrote {dir}");
    }
    Ok(())
}
