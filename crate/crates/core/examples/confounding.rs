// Shows that the generated treatment assignment is confounded: treated-group
// means are biased, while IPW with the true propensities recovers the
// oracle action means.

use latent_match::estimator::{baseline_ipw, naive_means, FnPropensity};
use latent_match::eval::oracle_latent;
use latent_match::latent::{LatentTable, RowMeta};
use latent_match::synthgen::{generate, DgpConfig};

fn main() -> latent_match::Result<()> {
    let cfg = DgpConfig { n_units: 4000, ..DgpConfig::default() };
    let (data, oracle) = generate(&cfg)?;
    let mut rows = LatentTable::new(1);
    for r in data.outcomes() {
        rows.push(&[0.0], RowMeta { unit: r.unit, time: r.time, action: r.action, outcome: r.outcome })?;
    }
    let states = oracle_latent(&rows, &oracle)?;
    let mech = oracle.mechanism().clone();
    let truth = FnPropensity(move |z: &[f64], a: usize| mech.propensity(z)[a]);
    let (ipw, _) = baseline_ipw(&states, &[], data.action_count(), &truth, 0.0)?;
    let naive = naive_means(&states, data.action_count());
    println!("action  oracle   naive (bias/SE)    IPW (bias/SE)");
    for a in 0..data.action_count() {
        let o = oracle.rows().iter().map(|r| r.theta[a]).sum::<f64>() / oracle.rows().len() as f64;
        let z = |v: f64, se: f64| (v - o) / se;
        println!(
            "{a:>6} {o:>7.3} {:>7.3} ({:>6.1}) {:>8.3} ({:>6.1})",
            naive.values[a],
            z(naive.values[a], naive.standard_errors[a]),
            ipw.values[a],
            z(ipw.values[a], ipw.standard_errors[a])
        );
    }
    Ok(())
}
