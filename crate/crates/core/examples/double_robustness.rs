// Replaces one or both nuisance models of the DR estimate with fits on
// permuted labels and compares the per-action bias against the oracle.
// Arguments are `key=value` config overrides; `oracle=1` swaps the learned
// latent for the true state so only the nuisance models are in play, and
// `oracle=2` also uses the true propensities as the fitted ones.

use latent_match::config;
use latent_match::estimator::{fit_propensity, FnPropensity, PropensityScore};
use latent_match::eval::{latent_probe, nuisance_permutation, oracle_latent};
use latent_match::lsh::{build_index, default_width, LshParams};
use latent_match::pipeline::{run_pipeline, sub_seed, RunConfig};

fn main() -> latent_match::Result<()> {
    let mut cfg = RunConfig { baselines: false, ..RunConfig::default() };
    cfg.dgp.n_units = 4000;
    let mut use_oracle = 0;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap_or((&arg, ""));
        if k == "oracle" {
            use_oracle = v.parse().unwrap_or(0);
            continue;
        }
        config::set(&mut cfg, k, v)?;
    }
    let out = run_pipeline(&cfg, None)?;
    let probe = latent_probe(&out.train_latent, &out.test_latent, &out.oracle)?;
    println!("probe R2 per state dim {}", probe.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));

    let report = if use_oracle > 0 {
        let train = oracle_latent(&out.train_latent, &out.oracle)?;
        let test = oracle_latent(&out.test_latent, &out.oracle)?;
        let width = default_width(&train, sub_seed(cfg.seed, 3))?;
        let prop = fit_propensity(&train, out.dataset.action_count(), cfg.estimator.clip, cfg.propensity_iterations, cfg.propensity_rate, sub_seed(cfg.seed, 4))?;
        let index = build_index(train, LshParams { tables: cfg.lsh.tables, hashes: cfg.lsh.hashes, width, seed: sub_seed(cfg.seed, 3) })?;
        let mech = out.oracle.mechanism().clone();
        let truth = FnPropensity(move |z: &[f64], a: usize| mech.propensity(z)[a]);
        let prop: &dyn PropensityScore = if use_oracle == 2 { &truth } else { &prop };
        nuisance_permutation(&index, &test, prop, &out.oracle, &cfg)?
    } else {
        nuisance_permutation(&out.index, &out.test_latent, &out.propensity, &out.oracle, &cfg)?
    };
    for (name, bias) in &report.variants {
        println!("{name:<14} {}", bias.iter().map(|x| format!("{x:7.3}")).collect::<Vec<_>>().join(" "));
    }
    println!("single-permuted bias below half the double-permuted bias for {} of {} actions", report.holds, out.dataset.action_count());
    Ok(())
}
