//! Scoring against the oracle, phenotype grouping, effect curves and the
//! concept-set and look-back comparisons built on repeated pipeline runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, UnitId};
use crate::error::{Error, Result};
use crate::estimator::{estimate_all, fit_propensity, permute_actions, ridge, EstimatorConfig, OutcomeFit, PropensityScore, ThetaTable};
use crate::history::{ConceptSet, HistoryConfig};
use crate::latent::{squared_distance, LatentTable};
use crate::lsh::LshIndex;
use crate::pipeline::{run_pipeline, sub_seed, RunConfig};
use crate::synthgen::OracleTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub records: usize,
    pub rmse: f64,
    pub rmse_per_action: Vec<f64>,
    pub bias_per_action: Vec<f64>,
    /// Count of scored estimates per action, for re-aggregating the RMSE.
    pub n_per_action: Vec<usize>,
    pub pehe: f64,
    pub policy_value_gap: f64,
}

impl MetricsReport {
    /// Overall RMSE recomputed from the per-action parts.
    pub fn reaggregated_rmse(&self) -> f64 {
        let n: usize = self.n_per_action.iter().sum();
        let sse: f64 = self.rmse_per_action.iter().zip(&self.n_per_action).map(|(r, &n)| r * r * n as f64).sum();
        (sse / n.max(1) as f64).sqrt()
    }
}

/// Metrics of `theta` against the oracle. Row order of `theta` does not matter.
pub fn score(theta: &ThetaTable, oracle: &OracleTable) -> Result<MetricsReport> {
    let a_n = oracle.action_count();
    let mut by_record: BTreeMap<(UnitId, i64), Vec<Option<f64>>> = BTreeMap::new();
    for e in &theta.estimates {
        if e.action >= a_n {
            return Err(Error::Lookup(format!("action {} outside 0..{a_n}", e.action)));
        }
        by_record.entry((e.unit, e.time)).or_insert_with(|| vec![None; a_n])[e.action] = Some(e.theta_hat);
    }
    let missing: Vec<(u32, i64)> = by_record.keys().filter(|(u, t)| oracle.row(*u, *t).is_err()).map(|(u, t)| (u.0, *t)).collect();
    if !missing.is_empty() {
        return Err(Error::Coverage { missing });
    }
    let mut sse = vec![0.0; a_n];
    let mut err_sum = vec![0.0; a_n];
    let mut n = vec![0usize; a_n];
    let (mut pehe_sum, mut pehe_n) = (0.0, 0usize);
    let (mut policy_hat, mut policy_true, mut policy_n) = (0.0, 0.0, 0usize);
    for ((u, t), est) in &by_record {
        let truth = &oracle.row(*u, *t)?.theta;
        for a in 0..a_n {
            if let Some(v) = est[a] {
                let d = v - truth[a];
                sse[a] += d * d;
                err_sum[a] += d;
                n[a] += 1;
            }
        }
        for a in 0..a_n {
            for b in a + 1..a_n {
                if let (Some(x), Some(y)) = (est[a], est[b]) {
                    pehe_sum += ((x - y) - (truth[a] - truth[b])).powi(2);
                    pehe_n += 1;
                }
            }
        }
        let best = (0..a_n).fold(0, |b, a| if truth[a] < truth[b] { a } else { b });
        if let Some(v) = est[best] {
            policy_hat += v;
            policy_true += truth[best];
            policy_n += 1;
        }
    }
    let total: usize = n.iter().sum();
    let div = |s: f64, n: usize| if n > 0 { s / n as f64 } else { f64::NAN };
    Ok(MetricsReport {
        method: theta.method.clone(),
        records: by_record.len(),
        rmse: div(sse.iter().sum(), total).sqrt(),
        rmse_per_action: sse.iter().zip(&n).map(|(s, &n)| div(*s, n).sqrt()).collect(),
        bias_per_action: err_sum.iter().zip(&n).map(|(s, &n)| div(*s, n)).collect(),
        n_per_action: n,
        pehe: div(pehe_sum, pehe_n).sqrt(),
        policy_value_gap: (div(policy_hat, policy_n) - div(policy_true, policy_n)).abs(),
    })
}

/// Mean oracle θ per action over the records present in `theta`.
pub fn oracle_action_means(theta: &ThetaTable, oracle: &OracleTable) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; oracle.action_count()];
    let mut n = vec![0usize; oracle.action_count()];
    for e in &theta.estimates {
        sum[e.action] += oracle.row(e.unit, e.time)?.theta[e.action];
        n[e.action] += 1;
    }
    Ok(sum.iter().zip(&n).map(|(s, &n)| s / n.max(1) as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhenotypeAssignment {
    pub units: Vec<UnitId>,
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each iteration.
    pub objective: Vec<f64>,
}

impl PhenotypeAssignment {
    pub fn label(&self, unit: UnitId) -> Option<usize> {
        self.units.binary_search(&unit).ok().map(|i| self.labels[i])
    }
}

/// k-means over per-unit means of latent vectors, k-means++ seeding, at most
/// 100 Lloyd iterations.
pub fn assign_phenotypes(latent: &LatentTable, n_clusters: usize, seed: u64) -> Result<PhenotypeAssignment> {
    let dim = latent.dim();
    let mut sums: BTreeMap<UnitId, (Vec<f64>, usize)> = BTreeMap::new();
    for (z, m) in latent.iter() {
        let e = sums.entry(m.unit).or_insert_with(|| (vec![0.0; dim], 0));
        e.0.iter_mut().zip(z).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    if n_clusters == 0 || sums.len() < n_clusters {
        return Err(Error::config("eval.phenotypes", format!("need at least {n_clusters} units, have {}", sums.len())));
    }
    let units: Vec<UnitId> = sums.keys().copied().collect();
    let points: Vec<Vec<f64>> = sums.into_values().map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < n_clusters {
        let d: Vec<f64> = points.iter().map(|p| centers.iter().map(|c| squared_distance(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            d.iter().position(|&x| {
                target -= x;
                target < 0.0
            })
            .unwrap_or(points.len() - 1)
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[next].clone());
    }

    let nearest = |p: &[f64], centers: &[Vec<f64>]| -> (usize, f64) {
        centers.iter().enumerate().map(|(k, c)| (k, squared_distance(p, c))).fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b })
    };
    let mut labels = vec![usize::MAX; points.len()];
    let mut objective = Vec::new();
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (k, _) = nearest(p, &centers);
            if labels[i] != k {
                labels[i] = k;
                changed = true;
            }
        }
        let mut sum = vec![vec![0.0; dim]; n_clusters];
        let mut count = vec![0usize; n_clusters];
        for (p, &k) in points.iter().zip(&labels) {
            sum[k].iter_mut().zip(p).for_each(|(s, v)| *s += v);
            count[k] += 1;
        }
        for k in 0..n_clusters {
            if count[k] > 0 {
                centers[k] = sum[k].iter().map(|s| s / count[k] as f64).collect();
            }
        }
        objective.push(points.iter().zip(&labels).map(|(p, &k)| squared_distance(p, &centers[k])).sum());
        if !changed {
            break;
        }
    }
    Ok(PhenotypeAssignment { units, labels, centers, objective })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub action: usize,
    pub mean: f64,
    /// Sample SD across individuals.
    pub sd: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectCurve {
    pub group: String,
    pub points: Vec<CurvePoint>,
}

impl EffectCurve {
    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean).collect()
    }

    /// Action with the largest mean.
    pub fn peak(&self) -> Option<usize> {
        self.points.iter().max_by(|a, b| a.mean.total_cmp(&b.mean)).map(|p| p.action)
    }

    /// Curve from per-action values given directly, one individual each.
    pub fn from_means(group: &str, means: &[f64]) -> Self {
        EffectCurve {
            group: group.to_string(),
            points: means.iter().enumerate().map(|(a, &m)| CurvePoint { action: a, mean: m, sd: 0.0, n: 1 }).collect(),
        }
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

/// Per group and action, mean and SD across individuals of each individual's
/// mean θ̂. Units mapped to `None` are left out; groups with no units are
/// omitted and named in the returned warnings.
pub fn effect_curves(theta: &ThetaTable, group_of: &dyn Fn(UnitId) -> Option<String>, groups: &[String]) -> (Vec<EffectCurve>, Vec<String>) {
    // (group, unit, action) → (sum, n)
    let mut per_unit: BTreeMap<(String, UnitId, usize), (f64, usize)> = BTreeMap::new();
    for e in &theta.estimates {
        if let Some(g) = group_of(e.unit) {
            let s = per_unit.entry((g, e.unit, e.action)).or_insert((0.0, 0));
            s.0 += e.theta_hat;
            s.1 += 1;
        }
    }
    let mut values: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for ((g, _, a), (s, n)) in per_unit {
        values.entry((g, a)).or_default().push(s / n as f64);
    }
    let mut curves = Vec::new();
    let mut warnings = Vec::new();
    for g in groups {
        let points: Vec<CurvePoint> = (0..theta.action_count)
            .filter_map(|a| values.get(&(g.clone(), a)).map(|v| (a, v)))
            .map(|(a, v)| {
                let (mean, sd) = mean_sd(v);
                CurvePoint { action: a, mean, sd, n: v.len() }
            })
            .collect();
        if points.is_empty() {
            warnings.push(format!("group `{g}` has no individuals; curve omitted"));
        } else {
            curves.push(EffectCurve { group: g.clone(), points });
        }
    }
    (curves, warnings)
}

/// A single curve over every individual in `theta`.
pub fn overall_curve(theta: &ThetaTable, group: &str) -> EffectCurve {
    let name = group.to_string();
    let (mut curves, _) = effect_curves(theta, &|_| Some(name.clone()), std::slice::from_ref(&name));
    curves.pop().unwrap_or(EffectCurve { group: name, points: Vec::new() })
}

pub fn write_curves_csv(curves: &[EffectCurve], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "action", "mean_theta", "sd_theta", "n"])?;
    for c in curves {
        for p in &c.points {
            w.write_record([c.group.clone(), p.action.to_string(), p.mean.to_string(), p.sd.to_string(), p.n.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_differences_csv(group: &str, delta: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "action", "delta_vs_all"])?;
    for (a, d) in delta.iter().enumerate() {
        w.write_record([group.to_string(), a.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Self-contained SVG line chart with one polyline per curve.
pub fn svg_chart(curves: &[EffectCurve], title: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let all: Vec<&CurvePoint> = curves.iter().flat_map(|c| &c.points).collect();
    let max_a = all.iter().map(|p| p.action).max().unwrap_or(1).max(1) as f64;
    let lo = all.iter().map(|p| p.mean).fold(f64::INFINITY, f64::min);
    let hi = all.iter().map(|p| p.mean).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, lo.max(0.0) + 1.0) };
    let x = |a: usize| pad + (w - 2.0 * pad) * a as f64 / max_a;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, h - pad, w - pad);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    for a in 0..=max_a as usize {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{a}</text>"#, x(a), h - pad + 16.0);
    }
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"#, pad - 6.0, y(v) + 4.0);
    }
    for (i, c) in curves.iter().enumerate() {
        let colour = palette[i % palette.len()];
        let pts: Vec<String> = c.points.iter().map(|p| format!("{:.1},{:.1}", x(p.action), y(p.mean))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{colour}">{}</text>"#, w - pad + 4.0 - 90.0, pad + 14.0 * i as f64, escape(&c.group));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Result of re-running the pipeline with one concept set.
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub concept_set: String,
    pub lookback_days: i64,
    pub curve: EffectCurve,
    pub baseline: EffectCurve,
    /// Per action, mean θ̂ under the set minus mean θ̂ under ALL.
    pub difference: Vec<f64>,
}

fn lmn_curve(cfg: &RunConfig, data: &(Dataset, OracleTable), group: &str) -> Result<EffectCurve> {
    let out = run_pipeline(cfg, Some(data))?;
    Ok(overall_curve(&out.lmn, group))
}

fn with_history(cfg: &RunConfig, concepts: ConceptSet, lookback: i64) -> Result<RunConfig> {
    let mut c = RunConfig { baselines: false, ..cfg.clone() };
    let mut history = HistoryConfig::with_lookback(lookback);
    history.validate()?;
    history.concepts = concepts;
    c.features.history = history;
    Ok(c)
}

fn check_lookback(cfg: &RunConfig, lookback: i64) -> Result<()> {
    let horizon = cfg.dgp.horizon_days();
    if lookback > horizon {
        return Err(Error::config("ablate.lookbacks", format!("lookback {lookback} exceeds the generated horizon of {horizon} days")));
    }
    Ok(())
}

/// Re-runs the pipeline with `concepts` and with ALL, same seeds, and reports
/// the per-action difference of test-set mean θ̂.
pub fn concept_ablation(cfg: &RunConfig, data: &(Dataset, OracleTable), concepts: &ConceptSet, lookback: i64) -> Result<Ablation> {
    let base = baseline_curve(cfg, data, lookback)?;
    ablation_against(cfg, data, concepts, lookback, &base)
}

/// The ALL curve at `lookback`, for reuse across several concept sets.
pub fn baseline_curve(cfg: &RunConfig, data: &(Dataset, OracleTable), lookback: i64) -> Result<EffectCurve> {
    check_lookback(cfg, lookback)?;
    lmn_curve(&with_history(cfg, ConceptSet::all(), lookback)?, data, "ALL")
}

/// [`concept_ablation`] against a precomputed ALL curve.
pub fn ablation_against(cfg: &RunConfig, data: &(Dataset, OracleTable), concepts: &ConceptSet, lookback: i64, base: &EffectCurve) -> Result<Ablation> {
    check_lookback(cfg, lookback)?;
    let curve = if *concepts == ConceptSet::all() {
        EffectCurve { group: concepts.name.clone(), ..base.clone() }
    } else {
        lmn_curve(&with_history(cfg, concepts.clone(), lookback)?, data, &concepts.name)?
    };
    let difference = curve.means().iter().zip(base.means()).map(|(a, b)| a - b).collect();
    Ok(Ablation { concept_set: concepts.name.clone(), lookback_days: lookback, curve, baseline: base.clone(), difference })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LookbackReport {
    pub curves: Vec<(i64, EffectCurve)>,
    /// Per action, largest |mean θ̂| difference between any two look-backs.
    pub max_deviation: Vec<f64>,
}

pub fn lookback_sensitivity(cfg: &RunConfig, data: &(Dataset, OracleTable), lookbacks: &[i64]) -> Result<LookbackReport> {
    let mut curves: Vec<(i64, EffectCurve)> = Vec::new();
    let mut cache: HashMap<i64, EffectCurve> = HashMap::new();
    for &l in lookbacks {
        check_lookback(cfg, l)?;
        let curve = match cache.get(&l) {
            Some(c) => c.clone(),
            None => {
                let c = lmn_curve(&with_history(cfg, cfg.features.history.concepts.clone(), l)?, data, &format!("{l}d"))?;
                cache.insert(l, c.clone());
                c
            }
        };
        curves.push((l, curve));
    }
    let a_n = curves.first().map_or(0, |c| c.1.points.len());
    let max_deviation = (0..a_n)
        .map(|a| {
            let v: Vec<f64> = curves.iter().map(|c| c.1.points[a].mean).collect();
            v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x)) - v.iter().fold(f64::INFINITY, |m, x| m.min(*x))
        })
        .collect();
    Ok(LookbackReport { curves, max_deviation })
}

/// Per-action SD of test-set mean θ̂ across pipeline runs whose global seed is
/// `seed + i` for `i` in `0..replicates`, data regenerated each time.
pub fn seed_replicate_spread(cfg: &RunConfig, replicates: usize) -> Result<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = Vec::new();
    for i in 0..replicates as u64 {
        let mut c = RunConfig { baselines: false, ..cfg.clone() };
        c.seed = cfg.seed + i;
        let out = run_pipeline(&c, None)?;
        means.push(out.lmn.action_means());
    }
    let a_n = means.first().map_or(0, Vec::len);
    Ok((0..a_n).map(|a| mean_sd(&means.iter().map(|m| m[a]).collect::<Vec<_>>()).1).collect())
}

/// Test-set R² per oracle state dimension of a ridge probe fitted from the
/// train latent to Z*.
pub fn latent_probe(train: &LatentTable, test: &LatentTable, oracle: &OracleTable) -> Result<Vec<f64>> {
    let star = |t: &LatentTable| -> Result<Vec<Vec<f64>>> { t.metas().iter().map(|m| Ok(oracle.row(m.unit, m.time)?.z_star.clone())).collect() };
    let (ztr, zte) = (star(train)?, star(test)?);
    let dz = ztr.first().map_or(0, Vec::len);
    (0..dz)
        .map(|j| {
            let y: Vec<f64> = ztr.iter().map(|z| z[j]).collect();
            let fit = ridge(train.values(), train.dim(), &y, 1e-6)?;
            let y: Vec<f64> = zte.iter().map(|z| z[j]).collect();
            let (my, _) = mean_sd(&y);
            let sse: f64 = test.iter().zip(&y).map(|((z, _), y)| (fit.predict(z) - y).powi(2)).sum();
            let sst: f64 = y.iter().map(|y| (y - my).powi(2)).sum();
            Ok(1.0 - sse / sst)
        })
        .collect()
}

/// The same rows with their latent vectors replaced by the oracle Z*.
pub fn oracle_latent(rows: &LatentTable, oracle: &OracleTable) -> Result<LatentTable> {
    let mut out: Option<LatentTable> = None;
    for m in rows.metas() {
        let z = &oracle.row(m.unit, m.time)?.z_star;
        out.get_or_insert_with(|| LatentTable::new(z.len())).push(z, m.clone())?;
    }
    Ok(out.unwrap_or_else(|| LatentTable::new(0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub variants: Vec<(String, Vec<f64>)>,
    /// Actions where each single-permuted bias is below half the double-permuted one.
    pub holds: usize,
}

/// Per-action bias of the DR estimate when the outcome model, the propensity
/// model, or both are fitted on permuted action labels.
pub fn nuisance_permutation(
    index: &LshIndex,
    test: &LatentTable,
    propensity: &dyn PropensityScore,
    oracle: &OracleTable,
    cfg: &RunConfig,
) -> Result<PermutationReport> {
    let train = index.rows();
    let a_n = oracle.action_count();
    let shuffled = permute_actions(train, sub_seed(cfg.seed, 11));
    let bad_e = fit_propensity(&shuffled, a_n, cfg.estimator.clip, cfg.propensity_iterations, cfg.propensity_rate, sub_seed(cfg.seed, 4))?;
    let bad_q = EstimatorConfig { outcome: OutcomeFit::PermutedLocalRidge { seed: sub_seed(cfg.seed, 12) }, ..cfg.estimator };
    let runs: [(&str, &dyn PropensityScore, &EstimatorConfig); 4] =
        [("both fitted", propensity, &cfg.estimator), ("Q permuted", propensity, &bad_q), ("e permuted", &bad_e, &cfg.estimator), ("both permuted", &bad_e, &bad_q)];
    let mut variants = Vec::new();
    let mut truth = None;
    for (name, prop, est) in runs {
        let table = estimate_all(test, index, a_n, prop, est)?;
        let truth = match &truth {
            Some(t) => t,
            None => truth.insert(oracle_action_means(&table, oracle)?),
        };
        variants.push((name.to_string(), table.action_means().iter().zip(truth.iter()).map(|(m, o)| m - o).collect::<Vec<f64>>()));
    }
    let b = |v: usize, a: usize| variants[v].1[a].abs();
    let holds = (0..a_n).filter(|&a| b(1, a) < 0.5 * b(3, a) && b(2, a) < 0.5 * b(3, a)).count();
    Ok(PermutationReport { variants, holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::estimator::Estimate;
    use crate::synthgen::{generate, DgpConfig};
    use proptest::prelude::*;

    fn oracle_and_exact() -> (OracleTable, ThetaTable) {
        let (_, oracle) = generate(&DgpConfig { n_units: 30, ambient_dim: 8, ..DgpConfig::default() }).unwrap();
        let estimates = oracle
            .rows()
            .iter()
            .flat_map(|r| {
                (0..7).map(move |a| Estimate {
                    unit: r.unit,
                    time: r.time,
                    action: a,
                    theta_hat: r.theta[a],
                    q_term: r.theta[a],
                    correction_term: 0.0,
                    k_used: 1,
                    fell_back: false,
                })
            })
            .collect();
        (oracle, ThetaTable::new("exact", 7, estimates))
    }

    #[test]
    fn exact_estimates_score_zero() {
        let (oracle, t) = oracle_and_exact();
        let m = score(&t, &oracle).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.pehe, 0.0);
        assert_eq!(m.policy_value_gap, 0.0);
        assert!(m.bias_per_action.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn constant_shift_moves_bias_only() {
        let (oracle, mut t) = oracle_and_exact();
        t.estimates.iter_mut().for_each(|e| e.theta_hat += 1.0);
        let m = score(&t, &oracle).unwrap();
        assert!(m.bias_per_action.iter().all(|&b| (b - 1.0).abs() < 1e-12));
        assert!(m.pehe < 1e-12);
        assert!((m.rmse - 1.0).abs() < 1e-12);
        assert!((m.policy_value_gap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_record_hand_example() {
        let (oracle, _) = oracle_and_exact();
        let rows = &oracle.rows()[..2];
        // record 0 errs by +1 at action 0, record 1 by −2 at action 3
        let mut estimates = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            for a in 0..7 {
                let err = match (i, a) {
                    (0, 0) => 1.0,
                    (1, 3) => -2.0,
                    _ => 0.0,
                };
                estimates.push(Estimate { unit: r.unit, time: r.time, action: a, theta_hat: r.theta[a] + err, q_term: 0.0, correction_term: 0.0, k_used: 1, fell_back: false });
            }
        }
        let m = score(&ThetaTable::new("hand", 7, estimates), &oracle).unwrap();
        assert!((m.rmse - (5.0f64 / 14.0).sqrt()).abs() < 1e-12);
        assert!((m.bias_per_action[0] - 0.5).abs() < 1e-12);
        assert!((m.bias_per_action[3] + 1.0).abs() < 1e-12);
        // each erring action enters 6 of 21 pairs with that error
        assert!((m.pehe - ((6.0 * 1.0 + 6.0 * 4.0) / 42.0f64).sqrt()).abs() < 1e-12);
        assert!((m.reaggregated_rmse() - m.rmse).abs() < 1e-9);
    }

    #[test]
    fn missing_oracle_rows_are_listed() {
        let (oracle, mut t) = oracle_and_exact();
        t.estimates[0].unit = UnitId(9999);
        assert!(matches!(score(&t, &oracle), Err(Error::Coverage { missing }) if missing == vec![(9999, t.estimates[0].time)]));
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut values = Vec::new();
        let mut meta = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for u in 0..60u32 {
            let c = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)][(u % 3) as usize];
            for t in 0..2 {
                values.extend([c.0 + rng.random::<f64>(), c.1 + rng.random::<f64>()]);
                meta.push(crate::latent::RowMeta { unit: UnitId(u), time: t, action: 0, outcome: 0.0 });
            }
        }
        let table = LatentTable::from_rows(2, values, meta).unwrap();
        let p = assign_phenotypes(&table, 3, 1).unwrap();
        for u in 0..60u32 {
            for v in 0..60u32 {
                assert_eq!(u % 3 == v % 3, p.label(UnitId(u)) == p.label(UnitId(v)));
            }
        }
        assert!(p.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert_eq!(p, assign_phenotypes(&table, 3, 1).unwrap());
        let one = assign_phenotypes(&table, 1, 1).unwrap();
        assert!(one.labels.iter().all(|&l| l == 0));
        assert!(assign_phenotypes(&table, 61, 1).is_err());
    }

    #[test]
    fn flat_curve_and_group_offsets() {
        let estimates: Vec<Estimate> = (0..20u32)
            .flat_map(|u| {
                (0..3).map(move |a| Estimate {
                    unit: UnitId(u),
                    time: 0,
                    action: a,
                    theta_hat: if u < 10 { 2.0 } else { 2.0 + 3.0 * a as f64 },
                    q_term: 0.0,
                    correction_term: 0.0,
                    k_used: 1,
                    fell_back: false,
                })
            })
            .collect();
        let t = ThetaTable::new("x", 3, estimates);
        let groups = vec!["low".to_string(), "high".to_string(), "empty".to_string()];
        let (curves, warnings) = effect_curves(&t, &|u| Some(if u.0 < 10 { "low" } else { "high" }.to_string()), &groups);
        assert_eq!(curves.len(), 2);
        assert_eq!(warnings.len(), 1);
        assert!(curves[0].points.iter().all(|p| p.mean == 2.0 && p.sd == 0.0 && p.n == 10));
        for a in 0..3 {
            assert_eq!(curves[1].points[a].mean - curves[0].points[a].mean, 3.0 * a as f64);
        }
    }

    #[test]
    fn published_column_peaks_at_one() {
        let curve = EffectCurve::from_means("LMN", &[3.76, 10.42, 9.68, 4.54, 3.92, 4.46, 3.68]);
        assert_eq!(curve.peak(), Some(1));
        assert!(svg_chart(&[curve], "severity").contains("<polyline"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn score_ignores_row_order(seed in 0u64..500, shift in -3.0f64..3.0) {
            let (oracle, mut t) = oracle_and_exact();
            t.estimates.iter_mut().enumerate().for_each(|(i, e)| e.theta_hat += shift + (i % 5) as f64 * 0.1);
            let before = score(&t, &oracle).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            t.estimates.shuffle(&mut rng);
            prop_assert_eq!(score(&t, &oracle).unwrap(), before);
        }
    }
}
