// The doubly-robust neighbourhood formula on a four-row example small enough
// to check by hand, then on an indexed table.

use latent_match::domain::UnitId;
use latent_match::estimator::{dr_from_neighbors, estimate_all, ConstantPropensity, EstimatorConfig, FnPropensity};
use latent_match::latent::{LatentTable, RowMeta};
use latent_match::lsh::{build_index, LshParams, QueryConfig};

fn table(points: &[(f64, usize, f64)]) -> latent_match::Result<LatentTable> {
    let meta = points.iter().enumerate().map(|(i, p)| RowMeta { unit: UnitId(i as u32), time: 0, action: p.1, outcome: p.2 }).collect();
    LatentTable::from_rows(1, points.iter().map(|p| p.0).collect(), meta)
}

fn main() -> latent_match::Result<()> {
    let rows = table(&[(0.0, 1, 2.0), (1.0, 0, 7.0), (0.5, 1, 1.0), (2.0, 2, -3.0)])?;
    let q = |z: &[f64], _: usize| 1.0 + 2.0 * z[0];
    let e = FnPropensity(|z: &[f64], _: usize| 0.25 + 0.1 * z[0]);
    let d = dr_from_neighbors(&rows, &[0, 1, 2, 3], 1, &q, &e, 0.01)?;
    let by_hand = (5.0 + 3.0 + (2.0 - 10.0 / 3.0) + 5.0) / 4.0;
    println!("Q term {:.4} + correction {:.4} = {:.6} (by hand {by_hand:.6})", d.q_term, d.correction_term, d.theta_hat());

    let pts: Vec<(f64, usize, f64)> = (0..600)
        .map(|i| {
            let z = (i as f64 * 0.61).sin() * 2.0;
            let a = i % 3;
            (z, a, z + [0.0, 1.0, 2.0][a])
        })
        .collect();
    let train = table(&pts)?;
    let queries = table(&[(-1.0, 0, f64::NAN), (0.0, 0, f64::NAN), (1.0, 0, f64::NAN)])?;
    let index = build_index(train, LshParams { tables: 8, hashes: 2, width: 2.0, seed: 4 })?;
    let cfg = EstimatorConfig { query: QueryConfig::new(40), ..EstimatorConfig::default() };
    let theta = estimate_all(&queries, &index, 3, &ConstantPropensity(1.0 / 3.0), &cfg)?;
    for est in &theta.estimates {
        println!("z={:>4} a={} theta={:.3} (truth {:.1})", queries.row(est.unit.0 as usize)[0], est.action, est.theta_hat, queries.row(est.unit.0 as usize)[0] + est.action as f64);
    }
    Ok(())
}
