//! Doubly-robust local estimation of counterfactual means.
//!
//! For a query state `z` and action `a`, with neighbourhood `N` of size `k`,
//!
//! ```text
//! θ̂(a) = (1/k) Σ_{j∈N} [ Q̂(z_j, a) + 1(A_j = a) / ê(a|z_j) · (Y_j − Q̂(z_j, a)) ]
//! ```
//!
//! `Q̂` is a ridge fit on the neighbourhood over `(z, action one-hot)` and `ê` a
//! propensity model, clipped to `[δ, 1 − δ]`. Each estimate keeps the two means
//! separately so `theta_hat = q_term + correction_term` holds exactly.

mod baselines;
mod propensity;
mod ridge;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baselines::{baseline_ipw, baseline_local_aipw, baseline_or, naive_means, ActionSummary};
pub use propensity::{clip, fit_propensity, ConstantPropensity, FnPropensity, PropensityModel, PropensityScore, DEFAULT_CLIP};
pub use ridge::{ridge, RidgeFit};

use crate::domain::UnitId;
use crate::error::{Error, Result};
use crate::latent::{LatentTable, RowMeta};
use crate::lsh::{query_knn, LshIndex, NeighborMode, Neighbors, QueryConfig};

pub const DEFAULT_RIDGE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFit {
    /// Ridge on the neighbourhood's own outcomes.
    LocalRidge,
    /// Ridge on the neighbourhood's outcomes shuffled among its rows: a
    /// deliberately misspecified outcome model.
    PermutedLocalRidge { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityScope {
    /// The supplied model, fitted once on the training split.
    Global,
    /// Smoothed action frequencies of the neighbourhood, `(n_a + 1)/(k + A)`.
    Neighbourhood,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub query: QueryConfig,
    pub ridge: f64,
    pub clip: f64,
    pub outcome: OutcomeFit,
    pub propensity: PropensityScope,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            query: QueryConfig::new(100),
            ridge: DEFAULT_RIDGE,
            clip: DEFAULT_CLIP,
            outcome: OutcomeFit::LocalRidge,
            propensity: PropensityScope::Global,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.query.validate()?;
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(Error::config("estimator.ridge", "must be finite and > 0"));
        }
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(Error::config("estimator.clip", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Ridge model over `(z, action one-hot)` with an unpenalised intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeModel {
    pub dim: usize,
    pub action_count: usize,
    pub fit: RidgeFit,
    pub ridge: f64,
}

impl OutcomeModel {
    pub fn predict(&self, z: &[f64], action: usize) -> f64 {
        let (zc, ac) = self.fit.coefficients.split_at(self.dim);
        self.fit.intercept + zc.iter().zip(z).map(|(b, v)| b * v).sum::<f64>() + ac[action]
    }
}

/// Fits `Q̂` on the given rows of `rows`, optionally with shuffled outcomes.
pub fn fit_local_outcome(rows: &LatentTable, ids: &[usize], action_count: usize, ridge_strength: f64) -> Result<OutcomeModel> {
    let y: Vec<f64> = ids.iter().map(|&i| rows.meta(i).outcome).collect();
    fit_outcome_on(rows, ids, &y, action_count, ridge_strength)
}

fn fit_outcome_on(rows: &LatentTable, ids: &[usize], y: &[f64], action_count: usize, ridge_strength: f64) -> Result<OutcomeModel> {
    if ids.is_empty() {
        return Err(Error::Empty("outcome model neighbourhood"));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Lookup(format!("row {} has no observed outcome", ids[i])));
    }
    let dim = rows.dim();
    let p = dim + action_count;
    let mut x = vec![0.0; ids.len() * p];
    for (r, &i) in ids.iter().enumerate() {
        x[r * p..r * p + dim].copy_from_slice(rows.row(i));
        x[r * p + dim + rows.meta(i).action] = 1.0;
    }
    let fit = ridge(&x, p, y, ridge_strength)?;
    Ok(OutcomeModel { dim, action_count, fit, ridge: ridge_strength })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub unit: UnitId,
    pub time: i64,
    pub action: usize,
    pub theta_hat: f64,
    pub q_term: f64,
    pub correction_term: f64,
    pub k_used: usize,
    pub fell_back: bool,
}

/// The two means of the DR formula over a neighbourhood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrTerms {
    pub q_term: f64,
    pub correction_term: f64,
    pub k: usize,
}

impl DrTerms {
    pub fn theta_hat(&self) -> f64 {
        self.q_term + self.correction_term
    }
}

/// Evaluates the DR formula on neighbourhood `ids` of `rows` with a given `Q̂`
/// and propensity, the latter clipped to `[clip_at, 1 − clip_at]` (`clip_at = 0`
/// uses the propensity as is).
pub fn dr_from_neighbors(
    rows: &LatentTable,
    ids: &[usize],
    action: usize,
    q: &dyn Fn(&[f64], usize) -> f64,
    prop: &dyn PropensityScore,
    clip_at: f64,
) -> Result<DrTerms> {
    if ids.is_empty() {
        return Err(Error::Empty("DR neighbourhood"));
    }
    let (mut q_sum, mut c_sum) = (0.0, 0.0);
    for &j in ids {
        let z = rows.row(j);
        let m = rows.meta(j);
        let qj = q(z, action);
        q_sum += qj;
        if m.action == action {
            let e = clip(prop.score(z, action), clip_at);
            c_sum += (m.outcome - qj) / e;
        }
    }
    let k = ids.len() as f64;
    let terms = DrTerms { q_term: q_sum / k, correction_term: c_sum / k, k: ids.len() };
    if !terms.theta_hat().is_finite() {
        return Err(Error::NonFinite { component: "DR estimate" });
    }
    Ok(terms)
}

struct NeighbourhoodPropensity {
    probs: Vec<f64>,
}

impl NeighbourhoodPropensity {
    fn new(rows: &LatentTable, ids: &[usize], action_count: usize) -> Self {
        let mut counts = vec![1.0; action_count];
        for &i in ids {
            counts[rows.meta(i).action] += 1.0;
        }
        let total = (ids.len() + action_count) as f64;
        NeighbourhoodPropensity { probs: counts.into_iter().map(|c| c / total).collect() }
    }
}

impl PropensityScore for NeighbourhoodPropensity {
    fn score(&self, _: &[f64], action: usize) -> f64 {
        self.probs[action]
    }
}

fn shuffle_seed(seed: u64, meta: &RowMeta, action: usize) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [meta.unit.0 as u64, meta.time as u64, action as u64] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

/// Fits the configured `Q̂` on a neighbourhood and evaluates every requested action.
#[allow(clippy::too_many_arguments)]
fn estimates_for(
    rows: &LatentTable,
    query: &RowMeta,
    n: &Neighbors,
    actions: &[usize],
    action_count: usize,
    prop: &dyn PropensityScore,
    cfg: &EstimatorConfig,
    out: &mut Vec<Estimate>,
) -> Result<()> {
    let ids: Vec<usize> = n.items.iter().map(|x| x.0).collect();
    let model = match cfg.outcome {
        OutcomeFit::LocalRidge => fit_local_outcome(rows, &ids, action_count, cfg.ridge)?,
        OutcomeFit::PermutedLocalRidge { seed } => {
            let mut y: Vec<f64> = ids.iter().map(|&i| rows.meta(i).outcome).collect();
            y.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(seed, query, actions[0])));
            fit_outcome_on(rows, &ids, &y, action_count, cfg.ridge)?
        }
    };
    let local;
    let prop: &dyn PropensityScore = match cfg.propensity {
        PropensityScope::Global => prop,
        PropensityScope::Neighbourhood => {
            local = NeighbourhoodPropensity::new(rows, &ids, action_count);
            &local
        }
    };
    let q = |z: &[f64], a: usize| model.predict(z, a);
    for &a in actions {
        let t = dr_from_neighbors(rows, &ids, a, &q, prop, cfg.clip)?;
        out.push(Estimate {
            unit: query.unit,
            time: query.time,
            action: a,
            theta_hat: t.theta_hat(),
            q_term: t.q_term,
            correction_term: t.correction_term,
            k_used: t.k,
            fell_back: n.fell_back,
        });
    }
    Ok(())
}

fn check_neighbourhood(n: &Neighbors, action: usize, k: usize) -> Result<()> {
    if n.items.len() < k {
        return Err(Error::Starvation { action, available: n.items.len(), k });
    }
    Ok(())
}

/// One estimate for latent state `z` under `action`, neighbours from `index`.
pub fn dr_estimate(z: &[f64], query: RowMeta, action: usize, index: &LshIndex, prop: &dyn PropensityScore, cfg: &EstimatorConfig) -> Result<Estimate> {
    cfg.validate()?;
    let a_n = action_count_of(index.rows(), action);
    let n = query_knn(index, z, action, &cfg.query)?;
    check_neighbourhood(&n, action, cfg.query.k)?;
    let mut out = Vec::with_capacity(1);
    estimates_for(index.rows(), &query, &n, &[action], a_n, prop, cfg, &mut out)?;
    Ok(out.remove(0))
}

fn action_count_of(rows: &LatentTable, at_least: usize) -> usize {
    rows.metas().iter().map(|m| m.action + 1).max().unwrap_or(0).max(at_least + 1)
}

/// Shared driver: `neighbours(z, a)` supplies the neighbourhood of a query row
/// for action `a` (ignored in unrestricted mode, where one neighbourhood serves
/// all actions).
pub(crate) fn estimate_rows(
    queries: &LatentTable,
    rows: &LatentTable,
    action_count: usize,
    mode: NeighborMode,
    neighbours: &(dyn Fn(&[f64], usize) -> Result<Neighbors> + Sync),
    prop: &dyn PropensityScore,
    cfg: &EstimatorConfig,
    method: &str,
) -> Result<ThetaTable> {
    cfg.validate()?;
    let all: Vec<usize> = (0..action_count).collect();
    let per_row: Result<Vec<Vec<Estimate>>> = (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let z = queries.row(i);
            let meta = queries.meta(i);
            let mut out = Vec::with_capacity(action_count);
            match mode {
                NeighborMode::Unrestricted => {
                    let n = neighbours(z, 0)?;
                    check_neighbourhood(&n, 0, cfg.query.k)?;
                    estimates_for(rows, meta, &n, &all, action_count, prop, cfg, &mut out)?;
                }
                NeighborMode::ActionStratified => {
                    for a in 0..action_count {
                        let n = neighbours(z, a)?;
                        check_neighbourhood(&n, a, cfg.query.k)?;
                        estimates_for(rows, meta, &n, &[a], action_count, prop, cfg, &mut out)?;
                    }
                }
            }
            Ok(out)
        })
        .collect();
    Ok(ThetaTable::new(method, action_count, per_row?.concat()))
}

/// Estimates for every query row and every action, neighbours from the index.
pub fn estimate_all(queries: &LatentTable, index: &LshIndex, action_count: usize, prop: &dyn PropensityScore, cfg: &EstimatorConfig) -> Result<ThetaTable> {
    let neighbours = |z: &[f64], a: usize| query_knn(index, z, a, &cfg.query);
    estimate_rows(queries, index.rows(), action_count, cfg.query.mode, &neighbours, prop, cfg, "lmn")
}

/// Estimates for every (record, action), in record order then action order.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaTable {
    pub method: String,
    pub action_count: usize,
    pub estimates: Vec<Estimate>,
}

pub const THETA_HEADER: [&str; 8] = ["unit", "time", "action", "theta_hat", "q_term", "correction_term", "k_used", "fell_back"];

impl ThetaTable {
    pub fn new(method: &str, action_count: usize, estimates: Vec<Estimate>) -> Self {
        ThetaTable { method: method.to_string(), action_count, estimates }
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    /// `(unit, time, action) → θ̂`.
    pub fn lookup(&self) -> HashMap<(UnitId, i64, usize), f64> {
        self.estimates.iter().map(|e| ((e.unit, e.time, e.action), e.theta_hat)).collect()
    }

    /// Test-set mean of θ̂ per action.
    pub fn action_means(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.action_count];
        let mut n = vec![0usize; self.action_count];
        for e in &self.estimates {
            sum[e.action] += e.theta_hat;
            n[e.action] += 1;
        }
        sum.iter().zip(&n).map(|(s, &n)| if n > 0 { s / n as f64 } else { f64::NAN }).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(THETA_HEADER)?;
        for e in &self.estimates {
            w.write_record([
                e.unit.to_string(),
                e.time.to_string(),
                e.action.to_string(),
                e.theta_hat.to_string(),
                e.q_term.to_string(),
                e.correction_term.to_string(),
                e.k_used.to_string(),
                u8::from(e.fell_back).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, method: &str) -> Result<Self> {
        let bad = |message: String| Error::Format { path: path.to_path_buf(), message };
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.iter().collect::<Vec<_>>() != THETA_HEADER {
            return Err(bad("unexpected header".into()));
        }
        let mut estimates = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| f(i).parse::<f64>().map_err(|e| bad(format!("column {}: {e}", THETA_HEADER[i])));
            let int = |i: usize| f(i).parse::<i64>().map_err(|e| bad(format!("column {}: {e}", THETA_HEADER[i])));
            estimates.push(Estimate {
                unit: UnitId(int(0)? as u32),
                time: int(1)?,
                action: int(2)? as usize,
                theta_hat: num(3)?,
                q_term: num(4)?,
                correction_term: num(5)?,
                k_used: int(6)? as usize,
                fell_back: int(7)? != 0,
            });
        }
        let action_count = estimates.iter().map(|e| e.action + 1).max().unwrap_or(0);
        Ok(ThetaTable::new(method, action_count, estimates))
    }
}

/// Copy of `rows` with actions shuffled across rows, for fitting a
/// deliberately misspecified propensity model.
pub fn permute_actions(rows: &LatentTable, seed: u64) -> LatentTable {
    let mut actions: Vec<usize> = rows.metas().iter().map(|m| m.action).collect();
    actions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let meta = rows.metas().iter().zip(actions).map(|(m, a)| RowMeta { action: a, ..*m }).collect();
    LatentTable::from_rows(rows.dim(), rows.values().to_vec(), meta).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsh::{build_index, LshParams};

    fn rows(points: &[(f64, usize, f64)]) -> LatentTable {
        let meta = points.iter().enumerate().map(|(i, p)| RowMeta { unit: UnitId(i as u32), time: 0, action: p.1, outcome: p.2 }).collect();
        LatentTable::from_rows(1, points.iter().map(|p| p.0).collect(), meta).unwrap()
    }

    #[test]
    fn stratified_with_unit_propensity_and_zero_q_is_the_mean() {
        let t = rows(&[(0.0, 1, 2.0), (0.1, 1, 4.0)]);
        // ê ≡ 1 is only representable with clipping switched off
        let d = dr_from_neighbors(&t, &[0, 1], 1, &|_, _| 0.0, &ConstantPropensity(1.0), 0.0).unwrap();
        assert_eq!(d.q_term, 0.0);
        assert_eq!(d.theta_hat(), 3.0);
    }

    #[test]
    fn hand_evaluated_four_rows() {
        // rows: (z, A, Y), query action a = 1, Q̂(z, a) = 1 + 2z, ê(1|z) = 0.25 + 0.1z
        let t = rows(&[(0.0, 1, 2.0), (1.0, 0, 7.0), (0.5, 1, 1.0), (2.0, 2, -3.0)]);
        let q = |z: &[f64], _: usize| 1.0 + 2.0 * z[0];
        let e = FnPropensity(|z: &[f64], _: usize| 0.25 + 0.1 * z[0]);
        let d = dr_from_neighbors(&t, &[0, 1, 2, 3], 1, &q, &e, 0.01).unwrap();
        // summands: 1 + (2−1)/0.25 = 5; 3; 2 + (1−2)/0.3 = 2 − 10/3; 5
        let expected = (5.0 + 3.0 + (2.0 - 10.0 / 3.0) + 5.0) / 4.0;
        assert!((d.theta_hat() - expected).abs() < 1e-12);
        assert!((d.q_term - (1.0 + 3.0 + 2.0 + 5.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn exact_outcome_model_zeroes_the_correction() {
        let t = rows(&[(0.0, 0, 1.0), (1.0, 0, 3.0), (2.0, 0, 5.0)]);
        let d = dr_from_neighbors(&t, &[0, 1, 2], 0, &|z, _| 1.0 + 2.0 * z[0], &ConstantPropensity(0.3), 0.01).unwrap();
        assert_eq!(d.correction_term, 0.0);
        assert_eq!(d.theta_hat(), 3.0);
    }

    #[test]
    fn propensities_are_clipped() {
        let t = rows(&[(0.0, 0, 1.0)]);
        let d = dr_from_neighbors(&t, &[0], 0, &|_, _| 0.0, &ConstantPropensity(1e-9), 0.01).unwrap();
        assert_eq!(d.correction_term, 100.0);
    }

    #[test]
    fn local_outcome_model_recovers_linear_surface() {
        let pts: Vec<(f64, usize, f64)> = (0..30).map(|i| {
            let z = i as f64 / 10.0;
            let a = i % 3;
            (z, a, 2.0 - z + [0.0, 1.5, -0.5][a])
        }).collect();
        let t = rows(&pts);
        let ids: Vec<usize> = (0..30).collect();
        let m = fit_local_outcome(&t, &ids, 3, 1e-8).unwrap();
        let mse: f64 = t.iter().map(|(z, meta)| (m.predict(z, meta.action) - meta.outcome).powi(2)).sum::<f64>() / 30.0;
        assert!(mse < 1e-10);
        let constant = rows(&[(0.0, 0, 5.0), (1.0, 1, 5.0), (3.0, 0, 5.0)]);
        let m = fit_local_outcome(&constant, &[0, 1, 2], 2, 1e-8).unwrap();
        for a in 0..2 {
            assert!((m.predict(&[0.7], a) - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn estimate_all_is_complete_and_decomposes() {
        let pts: Vec<(f64, usize, f64)> = (0..200).map(|i| ((i as f64 * 0.37).sin() * 3.0, i % 4, (i as f64).cos())).collect();
        let train = rows(&pts);
        let queries = rows(&pts[..10].iter().map(|p| (p.0 + 0.01, p.1, f64::NAN)).collect::<Vec<_>>());
        let index = build_index(train, LshParams { tables: 6, hashes: 2, width: 4.0, seed: 1 }).unwrap();
        for mode in [NeighborMode::Unrestricted, NeighborMode::ActionStratified] {
            let cfg = EstimatorConfig { query: QueryConfig { mode, ..QueryConfig::new(20) }, ..EstimatorConfig::default() };
            let table = estimate_all(&queries, &index, 4, &ConstantPropensity(0.25), &cfg).unwrap();
            assert_eq!(table.len(), 40);
            for e in &table.estimates {
                assert_eq!(e.theta_hat, e.q_term + e.correction_term);
                assert_eq!(e.k_used, 20);
            }
            assert_eq!(table, estimate_all(&queries, &index, 4, &ConstantPropensity(0.25), &cfg).unwrap());
        }
    }

    #[test]
    fn theta_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = Estimate { unit: UnitId(3), time: 14, action: 2, theta_hat: 1.25, q_term: 1.0, correction_term: 0.25, k_used: 9, fell_back: true };
        let t = ThetaTable::new("lmn", 3, vec![e]);
        let path = dir.path().join("theta.csv");
        t.write_csv(&path).unwrap();
        assert_eq!(ThetaTable::read_csv(&path, "lmn").unwrap(), t);
    }
}
