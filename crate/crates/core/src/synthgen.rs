//! Synthetic longitudinal cohorts with known counterfactual means.
//!
//! Each unit carries a hidden state that follows a first-order autoregression
//! at weekly resolution. Observed concepts are a fixed random linear lift of
//! that state plus noise, so the state is recoverable from history but never
//! stored in the dataset. Treatment depends on the state only, which makes the
//! state a sufficient adjustment set; the outcome surface
//! `θ(z, a) = c_a + s_a·tanh(u_a·z)` is Lipschitz in the state with constant
//! `max_a |s_a|·‖u_a‖ ≤ L`.
//!
//! Concepts are grouped by name prefix (`heart_`, `breathing_`, `activity_`,
//! `records_`). Group `g` loads mainly on state dimensions `j ≡ g (mod 4)`.
//! Both the treatment logit and the outcome direction `u_a` lean on dimension 0
//! with a sign running from negative for the lowest action to positive for the
//! highest, so units tend to receive the actions that suit them and the
//! `heart_` group is the dominant confounder. Optional `noise_` concepts have
//! zero loading.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::domain::{Dataset, DatasetBuilder, UnitId};
use crate::error::{Error, Result};

/// Autoregressive coefficient of the weekly hidden state.
pub const STATE_AR: f64 = 0.8;

pub const CONCEPT_GROUPS: [&str; 4] = ["heart", "breathing", "activity", "records"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignmentMode {
    /// Each outcome time draws its action afresh from the true propensity.
    Independent,
    /// The action is the running maximum of per-step draws (cumulative doses).
    /// The stored propensity is that of the per-step draw, not of the realized action.
    RunningMax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgpConfig {
    pub n_units: usize,
    /// Outcome records per unit, inclusive range.
    pub steps_min: usize,
    pub steps_max: usize,
    pub latent_dim: usize,
    pub ambient_dim: usize,
    pub action_count: usize,
    pub confound_strength: f64,
    pub lipschitz_scale: f64,
    pub outcome_noise_sd: f64,
    pub positivity_floor: f64,
    pub seed: u64,
    pub observation_noise_sd: f64,
    /// Probability that a concept is recorded in a given week.
    pub observation_prob: f64,
    /// Weeks of observations before the first outcome.
    pub burn_in_weeks: usize,
    pub outcome_every_weeks: usize,
    /// Days of past state that drive treatment and outcome (0 or ≤ 7: current week only).
    pub memory_days: u32,
    /// Extra concepts with zero loading on the state.
    pub dead_concepts: usize,
    pub assignment: AssignmentMode,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_units: 2000,
            steps_min: 4,
            steps_max: 8,
            latent_dim: 4,
            ambient_dim: 100,
            action_count: 7,
            confound_strength: 1.5,
            lipschitz_scale: 2.0,
            outcome_noise_sd: 1.0,
            positivity_floor: 0.02,
            seed: 0,
            observation_noise_sd: 0.5,
            observation_prob: 0.6,
            burn_in_weeks: 8,
            outcome_every_weeks: 4,
            memory_days: 0,
            dead_concepts: 0,
            assignment: AssignmentMode::Independent,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(format!("dgp.{field}"), msg)) };
        check(self.n_units >= 1, "n_units", "must be at least 1")?;
        check(self.steps_min >= 1 && self.steps_min <= self.steps_max, "steps_min", "need 1 ≤ steps_min ≤ steps_max")?;
        check(self.latent_dim >= 1, "latent_dim", "must be at least 1")?;
        check(self.ambient_dim >= 1, "ambient_dim", "must be at least 1")?;
        check(self.ambient_dim + self.dead_concepts <= u16::MAX as usize, "ambient_dim", "too many concepts")?;
        check(self.action_count >= 2, "action_count", "must be at least 2")?;
        check(self.confound_strength >= 0.0 && self.confound_strength.is_finite(), "confound_strength", "must be finite and ≥ 0")?;
        check(self.lipschitz_scale >= 0.0 && self.lipschitz_scale.is_finite(), "lipschitz_scale", "must be finite and ≥ 0")?;
        check(self.outcome_noise_sd >= 0.0, "outcome_noise_sd", "must be ≥ 0")?;
        check(self.observation_noise_sd >= 0.0, "observation_noise_sd", "must be ≥ 0")?;
        check(
            self.positivity_floor > 0.0 && self.positivity_floor * self.action_count as f64 <= 1.0,
            "positivity_floor",
            "need 0 < δ and δ·A ≤ 1",
        )?;
        check(self.observation_prob > 0.0 && self.observation_prob <= 1.0, "observation_prob", "must lie in (0, 1]")?;
        check(self.outcome_every_weeks >= 1, "outcome_every_weeks", "must be at least 1")?;
        Ok(())
    }

    /// Day of the last possible outcome, i.e. the generated horizon.
    pub fn horizon_days(&self) -> i64 {
        7 * (self.burn_in_weeks + (self.steps_max - 1) * self.outcome_every_weeks) as i64
    }

    fn memory_weeks(&self) -> usize {
        (self.memory_days as usize / 7).max(1)
    }
}

/// Outcome surface and assignment weights shared by all units.
#[derive(Clone, Debug)]
pub struct Mechanism {
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
    /// Outcome directions, one unit-norm row of length `latent_dim` per action.
    pub directions: Vec<Vec<f64>>,
    /// Treatment logit weights, one row per action.
    pub assignment: Vec<Vec<f64>>,
    pub confound_strength: f64,
    pub positivity_floor: f64,
    pub lipschitz: f64,
}

impl Mechanism {
    fn draw(cfg: &DgpConfig, rng: &mut ChaCha8Rng) -> Self {
        let (a_n, d) = (cfg.action_count, cfg.latent_dim);
        let mut intercepts = Vec::with_capacity(a_n);
        let mut slopes = Vec::with_capacity(a_n);
        let mut directions = Vec::with_capacity(a_n);
        let mut assignment = Vec::with_capacity(a_n);
        let half = (a_n - 1) as f64 / 2.0;
        for a in 0..a_n {
            let x = a as f64 - 1.0;
            intercepts.push(4.0 + 6.0 * (-x * x / 2.0).exp());
            let mut u: Vec<f64> = (0..d).map(|_| 0.5 * normal(rng)).collect();
            u[0] += 2.0 * (a as f64 - half) / half;
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            directions.push(u);
            slopes.push(cfg.lipschitz_scale * (0.5 + 0.5 * rng.random::<f64>()));
            let mut w: Vec<f64> = (0..d).map(|_| 0.3 * normal(rng)).collect();
            w[0] += (a as f64 - half) / half;
            assignment.push(w);
        }
        Mechanism {
            intercepts,
            slopes,
            directions,
            assignment,
            confound_strength: cfg.confound_strength,
            positivity_floor: cfg.positivity_floor,
            lipschitz: cfg.lipschitz_scale,
        }
    }

    pub fn theta(&self, z: &[f64], action: usize) -> f64 {
        let proj: f64 = self.directions[action].iter().zip(z).map(|(u, z)| u * z).sum();
        self.intercepts[action] + self.slopes[action] * proj.tanh()
    }

    /// Floor-mixed softmax: `δ·A·uniform + (1 − δ·A)·softmax(κ·W z)`.
    pub fn propensity(&self, z: &[f64]) -> Vec<f64> {
        let a_n = self.assignment.len();
        let logits: Vec<f64> = self
            .assignment
            .iter()
            .map(|w| self.confound_strength * w.iter().zip(z).map(|(w, z)| w * z).sum::<f64>())
            .collect();
        let soft = softmax(&logits);
        let mix = self.positivity_floor * a_n as f64;
        soft.iter().map(|p| mix / a_n as f64 + (1.0 - mix) * p).collect()
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub unit: UnitId,
    pub time: i64,
    pub z_star: Vec<f64>,
    pub propensity: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Ground truth for every generated outcome record.
#[derive(Clone, Debug)]
pub struct OracleTable {
    rows: Vec<OracleRow>,
    index: HashMap<(UnitId, i64), usize>,
    action_count: usize,
    mechanism: Mechanism,
}

impl OracleTable {
    pub fn new(rows: Vec<OracleRow>, action_count: usize, mechanism: Mechanism) -> Self {
        let index = rows.iter().enumerate().map(|(i, r)| ((r.unit, r.time), i)).collect();
        OracleTable { rows, index, action_count, mechanism }
    }

    pub fn rows(&self) -> &[OracleRow] {
        &self.rows
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn mechanism(&self) -> &Mechanism {
        &self.mechanism
    }

    pub fn row(&self, unit: UnitId, time: i64) -> Result<&OracleRow> {
        self.index
            .get(&(unit, time))
            .map(|&i| &self.rows[i])
            .ok_or_else(|| Error::Lookup(format!("no oracle row for unit {unit} at time {time}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "unit,time,action,theta,propensity")?;
        for r in &self.rows {
            for a in 0..self.action_count {
                writeln!(w, "{},{},{},{},{}", r.unit, r.time, a, r.theta[a], r.propensity[a])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Stored `θ_{i,t}(a)`.
pub fn oracle_theta(oracle: &OracleTable, unit: UnitId, time: i64, action: usize) -> Result<f64> {
    if action >= oracle.action_count {
        return Err(Error::Lookup(format!("action {action} outside 0..{}", oracle.action_count)));
    }
    Ok(oracle.row(unit, time)?.theta[action])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositivityCheck {
    pub holds: bool,
    pub min_propensity: f64,
}

pub fn check_positivity(oracle: &OracleTable, delta: f64) -> PositivityCheck {
    let min = oracle.rows.iter().flat_map(|r| r.propensity.iter().copied()).fold(f64::INFINITY, f64::min);
    PositivityCheck { holds: min >= delta, min_propensity: min }
}

/// Names of the generated concepts, in generation order.
pub fn concept_names(cfg: &DgpConfig) -> Vec<String> {
    let mut names: Vec<String> = (0..cfg.ambient_dim)
        .map(|k| format!("{}_{:03}", CONCEPT_GROUPS[k % CONCEPT_GROUPS.len()], k / CONCEPT_GROUPS.len()))
        .collect();
    names.extend((0..cfg.dead_concepts).map(|k| format!("noise_{k:03}")));
    names
}

struct Lift {
    loadings: Vec<Vec<f64>>,
    offsets: Vec<f64>,
    scales: Vec<f64>,
}

impl Lift {
    fn draw(cfg: &DgpConfig, rng: &mut ChaCha8Rng) -> Self {
        let total = cfg.ambient_dim + cfg.dead_concepts;
        let mut loadings = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(total);
        let mut scales = Vec::with_capacity(total);
        for k in 0..total {
            let row = if k < cfg.ambient_dim {
                let group = k % CONCEPT_GROUPS.len();
                (0..cfg.latent_dim)
                    .map(|j| {
                        if j % CONCEPT_GROUPS.len() == group % cfg.latent_dim.min(CONCEPT_GROUPS.len()) {
                            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                            sign * (0.8 + 0.4 * rng.random::<f64>())
                        } else {
                            0.15 * normal(rng)
                        }
                    })
                    .collect()
            } else {
                vec![0.0; cfg.latent_dim]
            };
            loadings.push(row);
            offsets.push(100.0 * rng.random::<f64>());
            scales.push(1.0 + 9.0 * rng.random::<f64>());
        }
        Lift { loadings, offsets, scales }
    }
}

struct UnitDraw {
    observations: Vec<(i64, u16, f64)>,
    outcomes: Vec<(i64, usize, f64)>,
    oracle: Vec<OracleRow>,
}

fn unit_seed(seed: u64, unit: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut x = seed ^ unit.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn draw_unit(cfg: &DgpConfig, mech: &Mechanism, lift: &Lift, unit: usize) -> UnitDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(unit_seed(cfg.seed, unit as u64));
    let d = cfg.latent_dim;
    let steps = rng.random_range(cfg.steps_min..=cfg.steps_max);
    let outcome_weeks: Vec<usize> = (0..steps).map(|j| cfg.burn_in_weeks + j * cfg.outcome_every_weeks).collect();
    let weeks = outcome_weeks.last().copied().unwrap_or(0) + 1;
    let innovation = (1.0 - STATE_AR * STATE_AR).sqrt();

    let mut states: Vec<Vec<f64>> = Vec::with_capacity(weeks);
    let mut z: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    for w in 0..weeks {
        if w > 0 {
            for v in z.iter_mut() {
                *v = STATE_AR * *v + innovation * normal(&mut rng);
            }
        }
        states.push(z.clone());
    }

    let mut observations = Vec::new();
    for (w, state) in states.iter().enumerate() {
        let jitter: i64 = rng.random_range(-1..=1);
        let day = (7 * w as i64 + jitter).max(0);
        for (k, load) in lift.loadings.iter().enumerate() {
            if rng.random::<f64>() >= cfg.observation_prob {
                continue;
            }
            let signal: f64 = load.iter().zip(state).map(|(l, s)| l * s).sum();
            let raw = signal + cfg.observation_noise_sd * normal(&mut rng);
            observations.push((day, k as u16, lift.offsets[k] + lift.scales[k] * raw));
        }
    }

    let memory = cfg.memory_weeks();
    let mut outcomes = Vec::with_capacity(steps);
    let mut oracle = Vec::with_capacity(steps);
    let mut dose = 0usize;
    for &w in &outcome_weeks {
        let from = (w + 1).saturating_sub(memory);
        let mut eff = vec![0.0; d];
        for s in &states[from..=w] {
            for (e, v) in eff.iter_mut().zip(s) {
                *e += v;
            }
        }
        let span = (w + 1 - from) as f64;
        eff.iter_mut().for_each(|e| *e /= span);

        let propensity = mech.propensity(&eff);
        let draw = sample_categorical(&propensity, rng.random::<f64>());
        let action = match cfg.assignment {
            AssignmentMode::Independent => draw,
            AssignmentMode::RunningMax => {
                dose = dose.max(draw);
                dose
            }
        };
        let theta: Vec<f64> = (0..cfg.action_count).map(|a| mech.theta(&eff, a)).collect();
        let y = theta[action] + cfg.outcome_noise_sd * normal(&mut rng);
        let time = 7 * w as i64;
        outcomes.push((time, action, y));
        oracle.push(OracleRow { unit: UnitId(unit as u32), time, z_star: eff, propensity, theta });
    }
    UnitDraw { observations, outcomes, oracle }
}

fn sample_categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Generates a dataset and its oracle. Deterministic given the config.
pub fn generate(cfg: &DgpConfig) -> Result<(Dataset, OracleTable)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mech = Mechanism::draw(cfg, &mut rng);
    let lift = Lift::draw(cfg, &mut rng);

    let draws: Vec<UnitDraw> = (0..cfg.n_units).into_par_iter().map(|u| draw_unit(cfg, &mech, &lift, u)).collect();

    let mut builder = DatasetBuilder::new(cfg.action_count)
        .cumulative_actions(cfg.assignment == AssignmentMode::RunningMax)
        .units(cfg.n_units);
    let ids: Vec<_> = concept_names(cfg).iter().map(|n| builder.intern(n)).collect();
    let mut rows = Vec::new();
    for (u, draw) in draws.into_iter().enumerate() {
        let unit = UnitId(u as u32);
        for (t, k, v) in draw.observations {
            builder.observe_id(unit, t, ids[k as usize], v);
        }
        for (t, a, y) in draw.outcomes {
            builder.outcome(unit, t, a, y);
        }
        rows.extend(draw.oracle);
    }
    Ok((builder.build(), OracleTable::new(rows, cfg.action_count, mech)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_dataset;

    fn small(seed: u64) -> DgpConfig {
        DgpConfig { n_units: 60, ambient_dim: 12, seed, ..DgpConfig::default() }
    }

    #[test]
    fn no_confounding_gives_uniform_propensity() {
        let (_, oracle) = generate(&DgpConfig { confound_strength: 0.0, ..small(1) }).unwrap();
        for r in oracle.rows() {
            for p in &r.propensity {
                assert!((p - 1.0 / 7.0).abs() < 1e-12);
            }
        }
        let check = check_positivity(&oracle, 0.05);
        assert!((check.min_propensity - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_outcome_equals_theta_at_factual_action() {
        let (ds, oracle) = generate(&DgpConfig { outcome_noise_sd: 0.0, ..small(2) }).unwrap();
        for r in ds.outcomes() {
            assert_eq!(r.outcome, oracle_theta(&oracle, r.unit, r.time, r.action).unwrap());
        }
    }

    #[test]
    fn zero_lipschitz_scale_makes_theta_constant_per_action() {
        let (_, oracle) = generate(&DgpConfig { lipschitz_scale: 0.0, ..small(3) }).unwrap();
        let c = &oracle.mechanism().intercepts;
        for r in oracle.rows() {
            for a in 0..7 {
                assert_eq!(r.theta[a], c[a]);
            }
        }
    }

    #[test]
    fn theta_is_lipschitz_in_the_state() {
        let cfg = small(4);
        let (_, oracle) = generate(&cfg).unwrap();
        let rows = oracle.rows();
        for i in (0..rows.len()).step_by(3) {
            for j in (i + 1..rows.len()).step_by(7) {
                let dist = rows[i].z_star.iter().zip(&rows[j].z_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                for a in 0..7 {
                    assert!((rows[i].theta[a] - rows[j].theta[a]).abs() <= cfg.lipschitz_scale * dist + 1e-12);
                }
            }
        }
    }

    #[test]
    fn positivity_floor_holds_and_is_tight() {
        let (_, oracle) = generate(&DgpConfig { positivity_floor: 0.05, confound_strength: 3.0, ..small(5) }).unwrap();
        assert!(check_positivity(&oracle, 0.05).holds);
        assert!(!check_positivity(&oracle, 0.2).holds);
        for r in oracle.rows() {
            let sum: f64 = r.propensity.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(r.propensity.iter().all(|&p| p <= 1.0 - 0.05 * 6.0 + 1e-12));
        }
    }

    #[test]
    fn lookup_errors() {
        let (ds, oracle) = generate(&small(6)).unwrap();
        let r = ds.outcomes()[0];
        assert!(oracle_theta(&oracle, r.unit, r.time, 0).unwrap().is_finite());
        assert!(oracle_theta(&oracle, r.unit, r.time + 1, 0).is_err());
        assert!(oracle_theta(&oracle, r.unit, r.time, 7).is_err());
    }

    #[test]
    fn config_rejections() {
        assert!(generate(&DgpConfig { positivity_floor: 0.2, ..small(0) }).is_err());
        assert!(generate(&DgpConfig { latent_dim: 0, ..small(0) }).is_err());
        assert!(generate(&DgpConfig { outcome_noise_sd: -1.0, ..small(0) }).is_err());
        let err = generate(&DgpConfig { steps_min: 9, ..small(0) }).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn generated_data_is_valid_in_both_assignment_modes() {
        for mode in [AssignmentMode::Independent, AssignmentMode::RunningMax] {
            let (ds, oracle) = generate(&DgpConfig { assignment: mode, ..small(7) }).unwrap();
            assert!(validate_dataset(&ds).is_empty());
            assert_eq!(oracle.rows().len(), ds.outcomes().len());
            for u in 0..ds.unit_count() {
                let n = ds.unit_outcomes(UnitId(u as u32)).count();
                assert!((4..=8).contains(&n));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for i in 0..2 {
            let (ds, oracle) = generate(&small(8)).unwrap();
            let (o, r, c) = (dir.path().join(format!("o{i}")), dir.path().join(format!("r{i}")), dir.path().join(format!("c{i}")));
            ds.write_jsonl(&o, &r).unwrap();
            oracle.write_csv(&c).unwrap();
            bytes.push((std::fs::read(o).unwrap(), std::fs::read(r).unwrap(), std::fs::read(c).unwrap()));
        }
        assert!(bytes[0] == bytes[1]);
        let header = String::from_utf8(bytes[0].2.clone()).unwrap();
        assert!(header.starts_with("unit,time,action,theta,propensity\n"));
    }

    #[test]
    fn dead_concepts_are_pure_noise() {
        let cfg = DgpConfig { dead_concepts: 2, ..small(9) };
        let names = concept_names(&cfg);
        assert_eq!(names.len(), 14);
        assert_eq!(names[12], "noise_000");
        assert_eq!(names[0], "heart_000");
        assert_eq!(names[5], "breathing_001");
    }
}
