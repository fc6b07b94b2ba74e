//! The end-to-end run: split, featurise, train the encoder, index the training
//! latents, fit the propensity model, estimate on the test split, run the
//! baselines and score everything against the oracle.
//!
//! Fitting stages only ever see `dataset.restrict(train units)`, and outcomes
//! reach any row through [`OutcomeAudit`], which counts reads of test-split
//! outcomes per stage.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Dataset, Role, SplitAssignment, SplitFractions, split_units};
use crate::encoder::{
    embed_rows, loss, save_checkpoint, train, write_loss_trace, Architecture, Batch, EncoderParams, EpochLoss, LossParts, LossWeights,
    TrainConfig, TrainData,
};
use crate::error::{Error, Result};
use crate::estimator::{
    baseline_ipw, baseline_local_aipw, baseline_or, estimate_all, fit_propensity, naive_means, ActionSummary, EstimatorConfig,
    PropensityModel, ThetaTable,
};
use crate::eval::{assign_phenotypes, effect_curves, score, svg_chart, write_curves_csv, EffectCurve, MetricsReport, PhenotypeAssignment};
use crate::features::{FeatureConfig, Featurizer, Rows};
use crate::latent::{LatentTable, RowMeta};
use crate::lsh::{build_index, default_width, LshIndex, LshParams};
use crate::synthgen::{generate, DgpConfig, OracleTable};

#[derive(Clone, Debug, PartialEq)]
pub struct LshSettings {
    pub tables: usize,
    pub hashes: usize,
    /// `None` picks the width from the training latents.
    pub width: Option<f64>,
}

impl Default for LshSettings {
    fn default() -> Self {
        LshSettings { tables: 12, hashes: 8, width: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Every stage seed derives from this one.
    pub seed: u64,
    pub outdir: PathBuf,
    /// Defaults to `seed-<seed>`.
    pub run_id: Option<String>,
    pub dgp: DgpConfig,
    pub split: SplitFractions,
    pub features: FeatureConfig,
    pub hidden: usize,
    pub latent_dim: usize,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub lsh: LshSettings,
    pub estimator: EstimatorConfig,
    pub propensity_iterations: usize,
    pub propensity_rate: f64,
    pub phenotypes: usize,
    /// Run the OR, IPW and local AIPW comparisons.
    pub baselines: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            outdir: PathBuf::from("runs"),
            run_id: None,
            dgp: DgpConfig::default(),
            split: SplitFractions::default(),
            features: FeatureConfig::default(),
            hidden: 64,
            latent_dim: 16,
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            lsh: LshSettings::default(),
            estimator: EstimatorConfig::default(),
            propensity_iterations: 200,
            propensity_rate: 1.0,
            phenotypes: 3,
            baselines: true,
        }
    }
}

/// Stage seeds: a splitmix step of the global seed and a stage tag.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.split.validate()?;
        self.features.history.validate()?;
        if self.features.stub.dim == 0 {
            return Err(Error::config("features.embed_dim", "must be at least 1"));
        }
        if self.features.text_dim == 0 {
            return Err(Error::config("features.text_dim", "must be at least 1"));
        }
        self.architecture(self.dgp.action_count).validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        LshParams { tables: self.lsh.tables, hashes: self.lsh.hashes, width: self.lsh.width.unwrap_or(1.0), seed: 0 }.validate()?;
        self.estimator.validate()?;
        if !(self.propensity_rate > 0.0 && self.propensity_rate.is_finite()) {
            return Err(Error::config("propensity.rate", "must be finite and > 0"));
        }
        if self.phenotypes == 0 {
            return Err(Error::config("eval.phenotypes", "must be at least 1"));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(Error::config("run_id", "must be a plain directory name"));
            }
        }
        Ok(())
    }

    pub fn architecture(&self, action_count: usize) -> Architecture {
        Architecture { embed_dim: self.features.stub.dim, hidden: self.hidden, latent_dim: self.latent_dim, action_count }
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("seed-{}", self.seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.outdir.join(self.run_id())
    }

    /// The generator config with the global seed applied.
    pub fn dgp_config(&self) -> DgpConfig {
        DgpConfig { seed: self.seed, ..self.dgp.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Featurize,
    Fit,
    Estimate,
    Score,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Featurize, Stage::Fit, Stage::Estimate, Stage::Score];

    /// Stages that must never read a test outcome.
    pub fn is_fitting(self) -> bool {
        self != Stage::Score
    }
}

const ROLES: [Role; 3] = [Role::Train, Role::Validation, Role::Test];

/// Sole path from stored outcomes to rows; counts reads per stage and role.
#[derive(Debug, Default)]
pub struct OutcomeAudit {
    reads: [[AtomicUsize; 3]; 4],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: Stage,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl OutcomeAudit {
    /// Fills `meta[i].outcome` from `dataset`, recording each read.
    pub fn attach(&self, stage: Stage, dataset: &Dataset, split: &SplitAssignment, meta: &mut [RowMeta]) -> Result<()> {
        let s = Stage::ALL.iter().position(|&x| x == stage).unwrap_or(0);
        for m in meta {
            let i = dataset.outcome_index(m.unit, m.time).ok_or_else(|| Error::Lookup(format!("no outcome for unit {} at day {}", m.unit, m.time)))?;
            let r = ROLES.iter().position(|&x| x == split.role(m.unit)).unwrap_or(0);
            self.reads[s][r].fetch_add(1, Ordering::Relaxed);
            m.outcome = dataset.outcomes()[i].outcome;
        }
        Ok(())
    }

    pub fn reads(&self, stage: Stage, role: Role) -> usize {
        let s = Stage::ALL.iter().position(|&x| x == stage).unwrap_or(0);
        let r = ROLES.iter().position(|&x| x == role).unwrap_or(0);
        self.reads[s][r].load(Ordering::Relaxed)
    }

    /// Test-split outcome reads made by fitting stages; zero in a clean run.
    pub fn fitting_test_reads(&self) -> usize {
        Stage::ALL.iter().filter(|s| s.is_fitting()).map(|&s| self.reads(s, Role::Test)).sum()
    }

    pub fn report(&self) -> Vec<AuditEntry> {
        Stage::ALL
            .iter()
            .map(|&stage| AuditEntry {
                stage,
                train: self.reads(stage, Role::Train),
                validation: self.reads(stage, Role::Validation),
                test: self.reads(stage, Role::Test),
            })
            .collect()
    }
}

/// Mean θ̂ at the factual action against the mean observed outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactualCheck {
    pub mean_theta_factual: f64,
    pub mean_observed: f64,
    pub standard_error: f64,
}

impl FactualCheck {
    pub fn within(&self, ses: f64) -> bool {
        (self.mean_theta_factual - self.mean_observed).abs() <= ses * self.standard_error
    }
}

pub struct PipelineOutput {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub oracle: OracleTable,
    pub split: SplitAssignment,
    pub featurizer: Featurizer,
    pub params: EncoderParams,
    pub trace: Vec<EpochLoss>,
    pub validation_loss: Option<LossParts>,
    pub train_latent: LatentTable,
    pub test_latent: LatentTable,
    pub index: LshIndex,
    pub propensity: PropensityModel,
    pub lmn: ThetaTable,
    pub baselines: Option<Baselines>,
    pub naive: ActionSummary,
    pub metrics: Vec<MetricsReport>,
    pub factual: FactualCheck,
    pub phenotypes: PhenotypeAssignment,
    pub curves: Vec<EffectCurve>,
    pub audit: Vec<AuditEntry>,
    /// Wall-clock seconds per stage; never written to artifacts.
    pub timings: Vec<(&'static str, f64)>,
}

pub struct Baselines {
    pub or: ThetaTable,
    pub ipw: ThetaTable,
    pub laipw: ThetaTable,
    pub ipw_summary: ActionSummary,
}

impl PipelineOutput {
    /// LMN first, then the baselines that were run.
    pub fn tables(&self) -> Vec<&ThetaTable> {
        let mut t = vec![&self.lmn];
        if let Some(b) = &self.baselines {
            t.extend([&b.or, &b.ipw, &b.laipw]);
        }
        t
    }

    pub fn metrics_for(&self, method: &str) -> Option<&MetricsReport> {
        self.metrics.iter().find(|m| m.method == method)
    }

    pub fn fitting_test_reads(&self) -> usize {
        self.audit.iter().filter(|e| e.stage.is_fitting()).map(|e| e.test).sum()
    }
}

fn latent_from(rows: &Rows, params: &EncoderParams) -> Result<LatentTable> {
    LatentTable::from_rows(params.arch.latent_dim, embed_rows(params, &rows.embeddings)?, rows.meta.clone())
}

fn text_table(rows: &Rows) -> Result<LatentTable> {
    LatentTable::from_rows(rows.text_dim, rows.text.clone(), rows.meta.clone())
}

/// Runs every stage in memory. `data` supplies a dataset and oracle; otherwise
/// one is generated from `cfg.dgp` with the global seed.
pub fn run_pipeline(cfg: &RunConfig, data: Option<&(Dataset, OracleTable)>) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str| {
        timings.push((name, clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let (dataset, oracle) = match data {
        Some((d, o)) => (d.clone(), o.clone()),
        None => generate(&cfg.dgp_config()).map_err(|e| e.in_stage("generate"))?,
    };
    lap("generate");
    let a_n = dataset.action_count();
    let audit = OutcomeAudit::default();

    let split = split_units(&dataset, cfg.split, sub_seed(cfg.seed, 1)).map_err(|e| e.in_stage("split"))?;
    let is = |role: Role| {
        let split = &split;
        move |u| split.role(u) == role
    };
    let fit_view = dataset.restrict(is(Role::Train));

    let stage = "featurize";
    let (featurizer, mut train_rows) = Featurizer::fit_featurize(&fit_view, cfg.features.clone(), |_| true, false).map_err(|e| e.in_stage(stage))?;
    let val_view = dataset.restrict(is(Role::Validation));
    let mut val_rows = featurizer.featurize(&val_view, |_| true, false).map_err(|e| e.in_stage(stage))?;
    let test_rows = featurizer.featurize(&dataset, is(Role::Test), false).map_err(|e| e.in_stage(stage))?;
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(Error::Empty("train or test rows").in_stage(stage));
    }

    lap("featurize");
    let stage = "encoder";
    audit.attach(Stage::Fit, &fit_view, &split, &mut train_rows.meta).map_err(|e| e.in_stage(stage))?;
    audit.attach(Stage::Fit, &val_view, &split, &mut val_rows.meta).map_err(|e| e.in_stage(stage))?;
    let actions: Vec<usize> = train_rows.meta.iter().map(|m| m.action).collect();
    let outcomes: Vec<f64> = train_rows.meta.iter().map(|m| m.outcome).collect();
    let data = TrainData { embeddings: &train_rows.embeddings, dim: train_rows.embed_dim, actions: &actions, outcomes: &outcomes };
    let train_cfg = TrainConfig { seed: sub_seed(cfg.seed, 2), ..cfg.train.clone() };
    let (params, trace) = train(&data, cfg.architecture(a_n), &train_cfg, &cfg.weights).map_err(|e| e.in_stage(stage))?;
    let validation_loss = if val_rows.is_empty() {
        None
    } else {
        let actions: Vec<usize> = val_rows.meta.iter().map(|m| m.action).collect();
        let y: Vec<f64> = val_rows.meta.iter().map(|m| (m.outcome - params.outcome_shift) / params.outcome_scale).collect();
        let noise = vec![0.0; val_rows.len() * params.arch.latent_dim];
        let batch = Batch { embeddings: &val_rows.embeddings, actions: &actions, outcomes: &y, noise: &noise };
        Some(loss(&params, &batch, &cfg.weights).map_err(|e| e.in_stage(stage))?)
    };

    lap("encoder");
    let stage = "index";
    let train_latent = latent_from(&train_rows, &params).map_err(|e| e.in_stage(stage))?;
    let test_latent = latent_from(&test_rows, &params).map_err(|e| e.in_stage(stage))?;
    let lsh_seed = sub_seed(cfg.seed, 3);
    let width = match cfg.lsh.width {
        Some(w) => w,
        None => default_width(&train_latent, lsh_seed).map_err(|e| e.in_stage(stage))?,
    };
    let index = build_index(train_latent.clone(), LshParams { tables: cfg.lsh.tables, hashes: cfg.lsh.hashes, width, seed: lsh_seed })
        .map_err(|e| e.in_stage(stage))?;

    lap("index");
    let stage = "propensity";
    let prop_seed = sub_seed(cfg.seed, 4);
    let propensity = fit_propensity(&train_latent, a_n, cfg.estimator.clip, cfg.propensity_iterations, cfg.propensity_rate, prop_seed)
        .map_err(|e| e.in_stage(stage))?;

    lap("propensity");
    let lmn = estimate_all(&test_latent, &index, a_n, &propensity, &cfg.estimator).map_err(|e| e.in_stage("estimate"))?;

    lap("estimate");
    let baselines = if cfg.baselines {
        let stage = "baselines";
        let train_text = text_table(&train_rows).map_err(|e| e.in_stage(stage))?;
        let test_text = text_table(&test_rows).map_err(|e| e.in_stage(stage))?;
        let or = baseline_or(&train_text, &test_text, a_n, cfg.estimator.ridge).map_err(|e| e.in_stage(stage))?;
        lap("or");
        let (ipw_summary, ipw) =
            baseline_ipw(&train_latent, test_latent.metas(), a_n, &propensity, cfg.estimator.clip).map_err(|e| e.in_stage(stage))?;
        let text_propensity = fit_propensity(&train_text, a_n, cfg.estimator.clip, cfg.propensity_iterations, cfg.propensity_rate, prop_seed)
            .map_err(|e| e.in_stage(stage))?;
        lap("text propensity");
        let laipw = baseline_local_aipw(&train_text, &test_text, a_n, &text_propensity, &cfg.estimator).map_err(|e| e.in_stage(stage))?;
        lap("laipw");
        Some(Baselines { or, ipw, laipw, ipw_summary })
    } else {
        None
    };
    let naive = naive_means(&train_latent, a_n);

    let stage = "score";
    let mut tables = vec![&lmn];
    if let Some(b) = &baselines {
        tables.extend([&b.or, &b.ipw, &b.laipw]);
    }
    let metrics = tables.iter().map(|t| score(t, &oracle)).collect::<Result<Vec<_>>>().map_err(|e| e.in_stage(stage))?;
    let mut factual_meta = test_latent.metas().to_vec();
    audit.attach(Stage::Score, &dataset, &split, &mut factual_meta).map_err(|e| e.in_stage(stage))?;
    let factual = factual_check(&lmn, &factual_meta);

    let phenotypes = assign_phenotypes(&test_latent, cfg.phenotypes, sub_seed(cfg.seed, 5)).map_err(|e| e.in_stage(stage))?;
    let groups: Vec<String> = (0..cfg.phenotypes).map(|k| format!("phenotype_{k}")).collect();
    let (curves, _) = effect_curves(&lmn, &|u| phenotypes.label(u).map(|k| format!("phenotype_{k}")), &groups);

    lap("score");
    Ok(PipelineOutput {
        config: cfg.clone(),
        dataset,
        oracle,
        split,
        featurizer,
        params,
        trace,
        validation_loss,
        train_latent,
        test_latent,
        index,
        propensity,
        lmn,
        baselines,
        naive,
        metrics,
        factual,
        phenotypes,
        curves,
        audit: audit.report(),
        timings,
    })
}

fn factual_check(lmn: &ThetaTable, observed: &[RowMeta]) -> FactualCheck {
    let lookup = lmn.lookup();
    let theta: Vec<f64> = observed.iter().filter_map(|m| lookup.get(&(m.unit, m.time, m.action)).copied()).collect();
    let y: Vec<f64> = observed.iter().map(|m| m.outcome).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (mt, my) = (mean(&theta), mean(&y));
    let n = y.len() as f64;
    let var_y = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    FactualCheck { mean_theta_factual: mt, mean_observed: my, standard_error: (var_y / n).sqrt() }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "latent-match-manifest/1";

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Hashes every file under `dir` except the manifest itself, sorted by path.
pub fn build_manifest(dir: &Path) -> Result<Manifest> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            if rel == MANIFEST_FILE {
                continue;
            }
            files.push(ManifestEntry { bytes: fs::metadata(&path)?.len(), sha256: sha256_file(&path)?, path: rel });
        }
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest { format: MANIFEST_FORMAT.into(), files })
}

pub fn write_manifest(dir: &Path) -> Result<Manifest> {
    let manifest = build_manifest(dir)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })
}

/// Creates a fresh run directory; an existing non-empty one is refused so run
/// ids stay unique per output directory.
pub fn create_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() {
        return Err(Error::config("run_id", format!("{} already exists; choose another run id", dir.display())));
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    methods: &'a [MetricsReport],
    factual: FactualCheck,
    factual_within_3se: bool,
    ipw: Option<&'a ActionSummary>,
    naive: &'a ActionSummary,
    oracle_means: Vec<f64>,
    lsh_width: f64,
    propensity_final_loss: Option<f64>,
    validation_loss: Option<[f64; 5]>,
    outcome_audit: &'a [AuditEntry],
    phenotype_method: &'static str,
    curve_dispersion: &'static str,
}

/// Writes every artifact of `out` into `dir` and then the manifest.
pub fn write_artifacts(out: &PipelineOutput, dir: &Path) -> Result<Manifest> {
    let p = |name: &str| dir.join(name);
    fs::write(p("config.txt"), crate::config::render(&out.config))?;
    out.split.write_csv(&p("split.csv"))?;
    crate::history::HistoryBuilder::new(&out.dataset, out.config.features.history.clone())?.layout().write_csv(&p("feature_layout.csv"))?;
    save_checkpoint(&out.params, &p("encoder.bin"))?;
    write_loss_trace(&out.trace, &p("loss_trace.csv"))?;
    out.train_latent.write_csv(&p("latent_train.csv"))?;
    out.test_latent.write_csv(&p("latent_test.csv"))?;
    out.index.save(&p("index.bin"))?;
    for t in out.tables() {
        t.write_csv(&p(&format!("theta_{}.csv", t.method)))?;
    }
    let validation_loss = out.validation_loss.map(|l| [l.total, l.recon, l.outcome, l.kl, l.mi]);
    let metrics = MetricsFile {
        methods: &out.metrics,
        factual: out.factual,
        factual_within_3se: out.factual.within(3.0),
        ipw: out.baselines.as_ref().map(|b| &b.ipw_summary),
        naive: &out.naive,
        oracle_means: crate::eval::oracle_action_means(&out.lmn, &out.oracle)?,
        lsh_width: out.index.params().width,
        propensity_final_loss: out.propensity.final_loss(),
        validation_loss,
        outcome_audit: &out.audit,
        phenotype_method: "k-means on per-unit mean latent vectors",
        curve_dispersion: "sample SD across individuals",
    };
    fs::write(p("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    let mut w = csv::Writer::from_path(p("phenotypes.csv"))?;
    w.write_record(["unit", "phenotype"])?;
    for (u, l) in out.phenotypes.units.iter().zip(&out.phenotypes.labels) {
        w.write_record([u.0.to_string(), l.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(p("propensity_train.csv"))?;
    w.write_record(["unit", "time", "action", "e_hat_clipped"])?;
    for (z, m) in out.train_latent.iter() {
        w.write_record([m.unit.to_string(), m.time.to_string(), m.action.to_string(), out.propensity.predict_clipped(z, m.action).to_string()])?;
    }
    w.flush()?;
    write_curves_csv(&out.curves, &p("curves_phenotype.csv"))?;
    fs::write(p("curves_phenotype.svg"), svg_chart(&out.curves, "LMN mean estimate by phenotype"))?;
    write_manifest(dir)
}
