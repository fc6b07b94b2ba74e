// Full run on generated data. Extra arguments are `key=value` config overrides,
// e.g. `cargo run --release --example end_to_end -- dgp.n_units=500`.

use std::time::Instant;

use latent_match::config;
use latent_match::eval::oracle_action_means;
use latent_match::pipeline::{run_pipeline, RunConfig};

fn main() -> latent_match::Result<()> {
    let mut cfg = RunConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap_or((&arg, ""));
        config::set(&mut cfg, k, v)?;
    }
    let start = Instant::now();
    let out = run_pipeline(&cfg, None)?;
    println!("{} train rows, {} test rows, {:.1}s", out.train_latent.len(), out.test_latent.len(), start.elapsed().as_secs_f64());
    if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
        println!("encoder loss {:.4} -> {:.4} (recon {:.4}, outcome {:.4}, kl {:.4}, mi {:.4})", first.total, last.total, last.recon, last.outcome, last.kl, last.mi);
    }
    let truth = oracle_action_means(&out.lmn, &out.oracle)?;
    println!("oracle  {}", fmt(&truth));
    for m in &out.metrics {
        let means = out.tables().iter().find(|t| t.method == m.method).map(|t| t.action_means()).unwrap_or_default();
        println!("{:<6} {}  rmse {:.3}  pehe {:.3}  gap {:.3}", m.method, fmt(&means), m.rmse, m.pehe, m.policy_value_gap);
    }
    println!("naive   {}", fmt(&out.naive.values));
    let f = out.factual;
    println!("factual: mean theta {:.3} vs observed {:.3} (se {:.3})", f.mean_theta_factual, f.mean_observed, f.standard_error);
    println!("test-outcome reads while fitting: {}", out.fitting_test_reads());
    for (stage, secs) in &out.timings {
        println!("  {stage:<16} {secs:6.2}s");
    }
    Ok(())
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:6.2}")).collect::<Vec<_>>().join(" ")
}
