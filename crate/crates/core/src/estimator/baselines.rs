//! Comparison estimators: global outcome regression, Hájek-weighted IPW and
//! DR with neighbourhoods taken in raw feature space.

use serde::{Deserialize, Serialize};

use super::propensity::{clip, PropensityScore};
use super::ridge::ridge;
use super::{estimate_rows, Estimate, EstimatorConfig, ThetaTable};
use crate::error::{Error, Result};
use crate::latent::{LatentTable, RowMeta};
use crate::lsh::{brute_force_knn, NeighborMode, Neighbors};

/// One global ridge regression of the outcome on `(features, action one-hot)`,
/// evaluated at every action for every test row.
pub fn baseline_or(train: &LatentTable, test: &LatentTable, action_count: usize, ridge_strength: f64) -> Result<ThetaTable> {
    if train.dim() != test.dim() {
        return Err(Error::Dimension { expected: train.dim(), got: test.dim() });
    }
    let (dim, p) = (train.dim(), train.dim() + action_count);
    let mut x = vec![0.0; train.len() * p];
    let mut y = Vec::with_capacity(train.len());
    for (i, (z, m)) in train.iter().enumerate() {
        x[i * p..i * p + dim].copy_from_slice(z);
        x[i * p + dim + m.action] = 1.0;
        y.push(m.outcome);
    }
    let fit = ridge(&x, p, &y, ridge_strength)?;
    let mut row = vec![0.0; p];
    let mut estimates = Vec::with_capacity(test.len() * action_count);
    for (z, m) in test.iter() {
        row[..dim].copy_from_slice(z);
        for a in 0..action_count {
            row[dim..].iter_mut().enumerate().for_each(|(b, v)| *v = if a == b { 1.0 } else { 0.0 });
            let q = fit.predict(&row);
            estimates.push(Estimate {
                unit: m.unit,
                time: m.time,
                action: a,
                theta_hat: q,
                q_term: q,
                correction_term: 0.0,
                k_used: train.len(),
                fell_back: false,
            });
        }
    }
    Ok(ThetaTable::new("or", action_count, estimates))
}

/// Per-action population values with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSummary {
    pub values: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub treated: Vec<usize>,
}

/// Hájek estimator per action, `Σ wᵢYᵢ / Σ wᵢ` with `wᵢ = 1(Aᵢ = a)/ê(a|zᵢ)`,
/// over all of `train`; the values are broadcast to every test row.
pub fn baseline_ipw(
    train: &LatentTable,
    test: &[RowMeta],
    action_count: usize,
    prop: &dyn PropensityScore,
    clip_at: f64,
) -> Result<(ActionSummary, ThetaTable)> {
    let mut summary = ActionSummary { values: Vec::new(), standard_errors: Vec::new(), treated: Vec::new() };
    for a in 0..action_count {
        let (mut sw, mut swy, mut n) = (0.0, 0.0, 0usize);
        let mut treated = Vec::new();
        for (z, m) in train.iter() {
            if m.action == a {
                let w = 1.0 / clip(prop.score(z, a), clip_at);
                sw += w;
                swy += w * m.outcome;
                n += 1;
                treated.push((w, m.outcome));
            }
        }
        if n == 0 {
            return Err(Error::Positivity { action: a, context: "IPW training rows".into() });
        }
        let value = swy / sw;
        // linearised (sandwich) variance of a ratio estimator over all rows
        let var: f64 = treated.iter().map(|(w, y)| (w * (y - value)).powi(2)).sum::<f64>() / (sw * sw);
        summary.values.push(value);
        summary.standard_errors.push(var.sqrt());
        summary.treated.push(n);
    }
    let estimates = test
        .iter()
        .flat_map(|m| {
            let values = &summary.values;
            (0..action_count).map(move |a| Estimate {
                unit: m.unit,
                time: m.time,
                action: a,
                theta_hat: values[a],
                q_term: 0.0,
                correction_term: values[a],
                k_used: train.len(),
                fell_back: false,
            })
        })
        .collect();
    Ok((summary, ThetaTable::new("ipw", action_count, estimates)))
}

/// Unweighted treated-group means per action with their standard errors.
pub fn naive_means(train: &LatentTable, action_count: usize) -> ActionSummary {
    let mut summary = ActionSummary { values: Vec::new(), standard_errors: Vec::new(), treated: Vec::new() };
    for a in 0..action_count {
        let ys: Vec<f64> = train.metas().iter().filter(|m| m.action == a).map(|m| m.outcome).collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        summary.values.push(mean);
        summary.standard_errors.push((var / n).sqrt());
        summary.treated.push(ys.len());
    }
    summary
}

/// The DR formula with exact neighbourhoods in the raw feature space of
/// `train`/`test` (unrestricted mode) instead of the learned latent space.
pub fn baseline_local_aipw(
    train: &LatentTable,
    test: &LatentTable,
    action_count: usize,
    prop: &dyn PropensityScore,
    cfg: &EstimatorConfig,
) -> Result<ThetaTable> {
    if train.dim() != test.dim() {
        return Err(Error::Dimension { expected: train.dim(), got: test.dim() });
    }
    let k = cfg.query.k;
    let neighbours = |z: &[f64], _: usize| -> Result<Neighbors> {
        let items = brute_force_knn(train, z, 0, k, NeighborMode::Unrestricted)?;
        Ok(Neighbors { items, fell_back: false, examined: train.len() })
    };
    let cfg = EstimatorConfig { query: crate::lsh::QueryConfig { mode: NeighborMode::Unrestricted, ..cfg.query }, ..*cfg };
    estimate_rows(test, train, action_count, NeighborMode::Unrestricted, &neighbours, prop, &cfg, "laipw")
}

#[cfg(test)]
mod tests {
    use super::super::{estimate_all, ConstantPropensity, FnPropensity};
    use super::*;
    use crate::domain::UnitId;
    use crate::lsh::{build_index, LshParams, QueryConfig};

    fn table(points: &[(Vec<f64>, usize, f64)]) -> LatentTable {
        let dim = points[0].0.len();
        let meta = points.iter().enumerate().map(|(i, p)| RowMeta { unit: UnitId(i as u32), time: 0, action: p.1, outcome: p.2 }).collect();
        LatentTable::from_rows(dim, points.iter().flat_map(|p| p.0.clone()).collect(), meta).unwrap()
    }

    #[test]
    fn or_recovers_constant_action_levels() {
        let pts: Vec<(Vec<f64>, usize, f64)> = (0..60).map(|i| (vec![(i as f64).sin(), (i % 7) as f64], i % 3, [1.0, 4.0, -2.0][i % 3])).collect();
        let train = table(&pts);
        let t = baseline_or(&train, &train, 3, 1e-6).unwrap();
        for e in &t.estimates {
            assert!((e.theta_hat - [1.0, 4.0, -2.0][e.action]).abs() < 1e-3);
        }
    }

    #[test]
    fn ipw_with_constant_weights_is_the_treated_mean() {
        let pts: Vec<(Vec<f64>, usize, f64)> = (0..30).map(|i| (vec![i as f64], i % 3, (i * i % 11) as f64)).collect();
        let train = table(&pts);
        let (s, t) = baseline_ipw(&train, &train.metas()[..2], 3, &ConstantPropensity(1.0 / 3.0), 0.01).unwrap();
        let naive = naive_means(&train, 3);
        for a in 0..3 {
            assert!((s.values[a] - naive.values[a]).abs() < 1e-12);
        }
        assert_eq!(t.len(), 6);
        let all_one = table(&(0..5).map(|i| (vec![0.0], 0, i as f64)).collect::<Vec<_>>());
        let (s, _) = baseline_ipw(&all_one, &[], 1, &ConstantPropensity(1.0), 0.01).unwrap();
        assert!((s.values[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn local_aipw_with_everything_is_global_aipw() {
        let pts: Vec<(Vec<f64>, usize, f64)> = (0..40).map(|i| (vec![(i as f64 * 0.3).cos()], i % 2, i as f64 * 0.1)).collect();
        let train = table(&pts);
        let test = table(&pts[..3].to_vec());
        let cfg = EstimatorConfig { query: QueryConfig::new(40), ..EstimatorConfig::default() };
        let prop = FnPropensity(|z: &[f64], a: usize| if a == 1 { 0.4 + 0.1 * z[0] } else { 0.6 - 0.1 * z[0] });
        let t = baseline_local_aipw(&train, &test, 2, &prop, &cfg).unwrap();
        let ids: Vec<usize> = (0..40).collect();
        let q = super::super::fit_local_outcome(&train, &ids, 2, cfg.ridge).unwrap();
        for e in &t.estimates {
            let d = super::super::dr_from_neighbors(&train, &ids, e.action, &|z, a| q.predict(z, a), &prop, cfg.clip).unwrap();
            assert!((e.theta_hat - d.theta_hat()).abs() < 1e-12);
        }
    }

    #[test]
    fn local_aipw_matches_lmn_on_identical_geometry() {
        let pts: Vec<(Vec<f64>, usize, f64)> = (0..300)
            .map(|i| {
                let x = (i as f64 * 0.91).sin();
                let y = (i as f64 * 0.37).cos();
                (vec![x, y], i % 3, x + 2.0 * y + (i % 3) as f64)
            })
            .collect();
        let train = table(&pts);
        let test = table(&pts.iter().take(15).map(|p| (vec![p.0[0] + 0.01, p.0[1]], p.1, f64::NAN)).collect::<Vec<_>>());
        // one wide hash per table: every row is a candidate, so the LSH query is exact
        let index = build_index(train.clone(), LshParams { tables: 2, hashes: 1, width: 1e6, seed: 0 }).unwrap();
        let cfg = EstimatorConfig { query: QueryConfig::new(25), ..EstimatorConfig::default() };
        let prop = ConstantPropensity(1.0 / 3.0);
        let lmn = estimate_all(&test, &index, 3, &prop, &cfg).unwrap();
        let laipw = baseline_local_aipw(&train, &test, 3, &prop, &cfg).unwrap();
        for (a, b) in lmn.estimates.iter().zip(&laipw.estimates) {
            assert!((a.theta_hat - b.theta_hat).abs() < 1e-9);
        }
    }
}
