//! The work behind each subcommand of the `latent-match` binary. Every command
//! writes under `<outdir>/<run-id>/` and finishes with a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config;
use crate::domain::{validate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::estimator::ThetaTable;
use crate::eval::{ablation_against, baseline_curve, svg_chart, write_curves_csv, write_differences_csv, Ablation};
use crate::history::ConceptSet;
use crate::latent::{LatentTable, RowMeta};
use crate::lsh::{brute_force_knn, build_index, default_width, query_knn, recall, LshParams, QueryConfig};
use crate::pipeline::{build_manifest, create_run_dir, read_manifest, run_pipeline, sub_seed, write_artifacts, write_manifest, Manifest, RunConfig};
use crate::synthgen::{generate, OracleTable};

pub const OBSERVATIONS_FILE: &str = "observations.jsonl";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const ORACLE_FILE: &str = "oracle.csv";

/// Generates a cohort and writes it with its oracle and config.
pub fn cmd_generate(cfg: &RunConfig) -> Result<(PathBuf, Manifest)> {
    cfg.validate()?;
    let (dataset, oracle) = generate(&cfg.dgp_config())?;
    let violations = validate_dataset(&dataset);
    if let Some(v) = violations.first() {
        return Err(Error::Layout(format!("generated dataset violates {v:?}")));
    }
    let dir = create_run_dir(cfg)?;
    write_dataset(&dir, &dataset, &oracle)?;
    fs::write(dir.join("config.txt"), config::render(cfg))?;
    Ok((dir.clone(), write_manifest(&dir)?))
}

pub fn write_dataset(dir: &Path, dataset: &Dataset, oracle: &OracleTable) -> Result<()> {
    dataset.write_jsonl(&dir.join(OBSERVATIONS_FILE), &dir.join(OUTCOMES_FILE))?;
    oracle.write_csv(&dir.join(ORACLE_FILE))
}

/// Runs the full pipeline and writes its artifacts.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<(PathBuf, Manifest)> {
    cfg.validate()?;
    let dir = create_run_dir(cfg)?;
    let out = run_pipeline(cfg, None)?;
    let manifest = write_artifacts(&out, &dir)?;
    Ok((dir, manifest))
}

/// Concept-set ablations over the cross-product of `sets` and `lookbacks`,
/// each against the ALL curve at the same look-back.
pub fn cmd_ablate(cfg: &RunConfig, sets: &[String], lookbacks: &[i64]) -> Result<(PathBuf, Vec<Ablation>)> {
    cfg.validate()?;
    let concept_sets = sets.iter().map(|s| ConceptSet::named(s)).collect::<Result<Vec<_>>>()?;
    if concept_sets.is_empty() || lookbacks.is_empty() {
        return Err(Error::config("ablate.sets", "need at least one concept set and one look-back"));
    }
    let horizon = cfg.dgp.horizon_days();
    if let Some(l) = lookbacks.iter().find(|&&l| l > horizon || l < 1) {
        return Err(Error::config("ablate.lookbacks", format!("look-back {l} outside 1..={horizon} days")));
    }
    let dir = create_run_dir(cfg)?;
    let data = generate(&cfg.dgp_config())?;
    let mut ablations = Vec::new();
    for &lookback in lookbacks {
        let base = baseline_curve(cfg, &data, lookback)?;
        for set in &concept_sets {
            let ab = ablation_against(cfg, &data, set, lookback, &base)?;
            let stem = format!("{}_{}d", ab.concept_set, lookback);
            write_curves_csv(&[ab.curve.clone(), ab.baseline.clone()], &dir.join(format!("curve_{stem}.csv")))?;
            write_differences_csv(&ab.concept_set, &ab.difference, &dir.join(format!("difference_{stem}.csv")))?;
            let title = format!("{} vs ALL, {lookback}-day look-back", ab.concept_set);
            fs::write(dir.join(format!("curve_{stem}.svg")), svg_chart(&[ab.curve.clone(), ab.baseline.clone()], &title))?;
            ablations.push(ab);
        }
    }
    fs::write(dir.join("config.txt"), config::render(cfg))?;
    write_manifest(&dir)?;
    Ok((dir, ablations))
}

#[derive(Clone, Debug)]
pub struct BenchSettings {
    pub points: usize,
    pub queries: usize,
    pub dim: usize,
    pub k: usize,
    pub tables: Vec<usize>,
    pub hashes: Vec<usize>,
    /// Multiples of the default width.
    pub width_scales: Vec<f64>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { points: 10_000, queries: 100, dim: 16, k: 10, tables: vec![12], hashes: vec![8], width_scales: vec![0.5, 1.0, 2.0] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub tables: usize,
    pub hashes: usize,
    pub width: f64,
    pub recall: f64,
    pub mean_candidates: f64,
    pub lsh_micros: f64,
    pub brute_micros: f64,
}

/// Recall@k and per-query latency of the index against exact search on
/// standard-normal points, swept over tables, hashes and width.
pub fn cmd_bench_lsh(cfg: &RunConfig, bench: &BenchSettings) -> Result<(PathBuf, Vec<BenchRow>)> {
    if bench.points == 0 || bench.queries == 0 || bench.dim == 0 || bench.k == 0 {
        return Err(Error::config("bench", "points, queries, dim and k must be at least 1"));
    }
    if bench.width_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::config("bench.widths", "width scales must be finite and > 0"));
    }
    let dir = create_run_dir(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 21));
    let mut draw = |n: usize| -> Result<LatentTable> {
        let values: Vec<f64> = (0..n * bench.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let meta = (0..n).map(|i| RowMeta { unit: crate::domain::UnitId(i as u32), time: 0, action: 0, outcome: 0.0 }).collect();
        LatentTable::from_rows(bench.dim, values, meta)
    };
    let rows = draw(bench.points)?;
    let queries = draw(bench.queries)?;
    let base_width = cfg.lsh.width.unwrap_or(default_width(&rows, sub_seed(cfg.seed, 3))?);
    let mut exact = Vec::new();
    let started = Instant::now();
    for (z, _) in queries.iter() {
        exact.push(brute_force_knn(&rows, z, 0, bench.k, crate::lsh::NeighborMode::Unrestricted)?);
    }
    let brute_micros = started.elapsed().as_secs_f64() * 1e6 / bench.queries as f64;
    let query = QueryConfig { k: bench.k, mode: crate::lsh::NeighborMode::Unrestricted, fallback: false, ..cfg.estimator.query };
    let mut out = Vec::new();
    for &tables in &bench.tables {
        for &hashes in &bench.hashes {
            for &scale in &bench.width_scales {
                let width = base_width * scale;
                let index = build_index(rows.clone(), LshParams { tables, hashes, width, seed: sub_seed(cfg.seed, 3) })?;
                let (mut hit, mut examined) = (0.0, 0usize);
                let started = Instant::now();
                for ((z, _), truth) in queries.iter().zip(&exact) {
                    let got = query_knn(&index, z, 0, &query)?;
                    examined += got.examined;
                    hit += recall(&got.items, truth);
                }
                let lsh_micros = started.elapsed().as_secs_f64() * 1e6 / bench.queries as f64;
                let n = bench.queries as f64;
                out.push(BenchRow { tables, hashes, width, recall: hit / n, mean_candidates: examined as f64 / n, lsh_micros, brute_micros });
            }
        }
    }
    let mut w = csv::Writer::from_path(dir.join("bench_lsh.csv"))?;
    w.write_record(["tables", "hashes", "width", "recall_at_k", "mean_candidates", "lsh_us_per_query", "brute_us_per_query"])?;
    for r in &out {
        w.write_record([
            r.tables.to_string(),
            r.hashes.to_string(),
            format!("{:.6}", r.width),
            format!("{:.4}", r.recall),
            format!("{:.1}", r.mean_candidates),
            format!("{:.1}", r.lsh_micros),
            format!("{:.1}", r.brute_micros),
        ])?;
    }
    w.flush()?;
    fs::write(dir.join("config.txt"), config::render(cfg))?;
    write_manifest(&dir)?;
    Ok((dir, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &str, failures: Vec<String>, ok_detail: String) -> CheckResult {
    match failures.first() {
        None => CheckResult { name: name.into(), passed: true, detail: ok_detail },
        Some(first) => CheckResult { name: name.into(), passed: false, detail: format!("{} problem(s), first: {first}", failures.len()) },
    }
}

/// Invariant suite over a pipeline run directory: manifest hashes, complete
/// θ̂ tables, `θ̂ = Q term + correction`, and propensities inside the clip band.
pub fn cmd_check(dir: &Path) -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let recorded = read_manifest(dir)?;
    let actual = build_manifest(dir)?;
    let listed: BTreeMap<&str, &str> = recorded.files.iter().map(|e| (e.path.as_str(), e.sha256.as_str())).collect();
    let found: BTreeMap<&str, &str> = actual.files.iter().map(|e| (e.path.as_str(), e.sha256.as_str())).collect();
    let mut failures = Vec::new();
    for (path, hash) in &listed {
        match found.get(path) {
            None => failures.push(format!("{path} missing")),
            Some(h) if h != hash => failures.push(format!("{path} hash differs")),
            Some(_) => {}
        }
    }
    failures.extend(found.keys().filter(|p| !listed.contains_key(*p)).map(|p| format!("{p} not in manifest")));
    checks.push(result("manifest", failures, format!("{} files match", listed.len())));

    let cfg = config::load(&dir.join("config.txt"))?;
    let a_n = cfg.dgp.action_count;
    let mut keys = BTreeSet::new();
    let mut r = csv::Reader::from_path(dir.join("latent_test.csv"))?;
    for rec in r.records() {
        let rec = rec?;
        keys.insert((rec.get(0).unwrap_or("").to_string(), rec.get(1).unwrap_or("").to_string()));
    }
    let mut tables = Vec::new();
    for entry in &recorded.files {
        if let Some(method) = entry.path.strip_prefix("theta_").and_then(|p| p.strip_suffix(".csv")) {
            tables.push(ThetaTable::read_csv(&dir.join(&entry.path), method)?);
        }
    }
    let mut failures = Vec::new();
    for t in &tables {
        let mut seen = BTreeSet::new();
        for e in &t.estimates {
            if !seen.insert((e.unit.to_string(), e.time, e.action)) {
                failures.push(format!("{}: duplicate ({}, {}, {})", t.method, e.unit, e.time, e.action));
            }
            if e.action >= a_n || !e.theta_hat.is_finite() {
                failures.push(format!("{}: bad entry ({}, {}, {})", t.method, e.unit, e.time, e.action));
            }
        }
        if seen.len() != keys.len() * a_n {
            failures.push(format!("{}: {} estimates for {} test rows x {a_n} actions", t.method, seen.len(), keys.len()));
        }
        for (u, time) in &keys {
            let time: i64 = time.parse().unwrap_or(i64::MIN);
            if (0..a_n).any(|a| !seen.contains(&(u.clone(), time, a))) {
                failures.push(format!("{}: row ({u}, {time}) incomplete", t.method));
                break;
            }
        }
    }
    if tables.is_empty() {
        failures.push("no theta tables".into());
    }
    checks.push(result("theta tables complete", failures, format!("{} tables x {} rows x {a_n} actions", tables.len(), keys.len())));

    let mut failures = Vec::new();
    for t in &tables {
        for e in &t.estimates {
            let gap = (e.theta_hat - (e.q_term + e.correction_term)).abs();
            if gap > 1e-9 * (1.0 + e.theta_hat.abs()) {
                failures.push(format!("{}: ({}, {}, {}) off by {gap:e}", t.method, e.unit, e.time, e.action));
            }
        }
    }
    checks.push(result("decomposition", failures, "theta = q_term + correction_term everywhere".into()));

    let delta = cfg.estimator.clip;
    let mut failures = Vec::new();
    let mut n = 0usize;
    let mut r = csv::Reader::from_path(dir.join("propensity_train.csv"))?;
    for rec in r.records() {
        let rec = rec?;
        let e: f64 = rec.get(3).unwrap_or("").parse().unwrap_or(f64::NAN);
        n += 1;
        if !(e >= delta && e <= 1.0 - delta) {
            failures.push(format!("row {n}: {e} outside [{delta}, {}]", 1.0 - delta));
        }
    }
    checks.push(result("propensity clipping", failures, format!("{n} values within [{delta}, {}]", 1.0 - delta)));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.outdir = dir.to_path_buf();
        cfg.dgp.n_units = 60;
        cfg.dgp.ambient_dim = 12;
        cfg.features.stub.dim = 32;
        cfg.features.text_dim = 32;
        cfg.hidden = 8;
        cfg.latent_dim = 4;
        cfg.train.epochs = 1;
        cfg.estimator.query.k = 8;
        cfg.propensity_iterations = 10;
        cfg
    }

    #[test]
    fn check_passes_on_a_fresh_run_and_catches_tampering() {
        let tmp = tempfile::tempdir().unwrap();
        let (dir, _) = cmd_pipeline(&small(tmp.path())).unwrap();
        let checks = cmd_check(&dir).unwrap();
        assert_eq!(checks.len(), 4);
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
        let path = dir.join("theta_lmn.csv");
        let text = fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().collect();
        fs::write(&path, cut[..cut.len() - 1].join("\n") + "\n").unwrap();
        let checks = cmd_check(&dir).unwrap();
        assert!(!checks[0].passed && !checks[1].passed);
        assert!(checks[2].passed && checks[3].passed);
    }

    #[test]
    fn generate_is_deterministic_and_refuses_reuse() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        cfg.run_id = Some("a".into());
        let (_, a) = cmd_generate(&cfg).unwrap();
        cfg.run_id = Some("b".into());
        let (_, b) = cmd_generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(cmd_generate(&cfg).unwrap_err().is_config());
    }

    #[test]
    fn ablate_rejects_unknown_sets_and_long_lookbacks() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(tmp.path());
        assert!(cmd_ablate(&cfg, &["LIVER".into()], &[30]).unwrap_err().is_config());
        assert!(cmd_ablate(&cfg, &["ALL".into()], &[cfg.dgp.horizon_days() + 1]).unwrap_err().is_config());
        assert!(!cfg.run_dir().exists());
    }

    #[test]
    fn bench_reports_one_row_per_setting() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(tmp.path());
        let bench = BenchSettings { points: 500, queries: 10, dim: 4, k: 5, tables: vec![2, 4], hashes: vec![2], width_scales: vec![1.0, 4.0] };
        let (dir, rows) = cmd_bench_lsh(&cfg, &bench).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.recall)));
        assert!(dir.join("bench_lsh.csv").exists());
    }
}
