//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are dotted paths
//! such as `lsh.tables`; unknown keys and unparsable values are config errors
//! naming the key. Later assignments win, so applying the file and then the
//! command-line pairs gives flag > file > default.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::history::{ConceptSet, HistoryConfig};
use crate::lsh::NeighborMode;
use crate::estimator::PropensityScope;
use crate::pipeline::RunConfig;
use crate::synthgen::AssignmentMode;

/// Every key [`set`] accepts, in rendering order.
pub const KEYS: &[&str] = &[
    "seed",
    "outdir",
    "run_id",
    "dgp.n_units",
    "dgp.steps_min",
    "dgp.steps_max",
    "dgp.latent_dim",
    "dgp.ambient_dim",
    "dgp.action_count",
    "dgp.confound_strength",
    "dgp.lipschitz_scale",
    "dgp.outcome_noise_sd",
    "dgp.positivity_floor",
    "dgp.observation_noise_sd",
    "dgp.observation_prob",
    "dgp.burn_in_weeks",
    "dgp.outcome_every_weeks",
    "dgp.memory_days",
    "dgp.dead_concepts",
    "dgp.assignment",
    "split.train",
    "split.validation",
    "split.test",
    "history.lookback_days",
    "history.scales",
    "history.concepts",
    "features.embed_dim",
    "features.text_weight",
    "features.text_dim",
    "features.hash_seed",
    "encoder.hidden",
    "encoder.latent_dim",
    "encoder.learning_rate",
    "encoder.discriminator_rate",
    "encoder.epochs",
    "encoder.batch_size",
    "encoder.discriminator_steps",
    "encoder.lambda",
    "encoder.beta",
    "encoder.alpha",
    "lsh.tables",
    "lsh.hashes",
    "lsh.width",
    "estimator.k",
    "estimator.mode",
    "estimator.candidate_cap",
    "estimator.fallback",
    "estimator.ridge",
    "estimator.clip",
    "estimator.propensity_scope",
    "propensity.iterations",
    "propensity.rate",
    "eval.phenotypes",
    "eval.baselines",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(key, format!("expected true or false, got `{other}`"))),
    }
}

fn optional<T: std::str::FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>> {
    if value.trim() == none { Ok(None) } else { parse(key, value).map(Some) }
}

/// Applies one assignment to `cfg`.
pub fn set(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key {
        "seed" => cfg.seed = parse(key, v)?,
        "outdir" => cfg.outdir = PathBuf::from(v),
        "run_id" => cfg.run_id = if v.is_empty() { None } else { Some(v.to_string()) },
        "dgp.n_units" => cfg.dgp.n_units = parse(key, v)?,
        "dgp.steps_min" => cfg.dgp.steps_min = parse(key, v)?,
        "dgp.steps_max" => cfg.dgp.steps_max = parse(key, v)?,
        "dgp.latent_dim" => cfg.dgp.latent_dim = parse(key, v)?,
        "dgp.ambient_dim" => cfg.dgp.ambient_dim = parse(key, v)?,
        "dgp.action_count" => cfg.dgp.action_count = parse(key, v)?,
        "dgp.confound_strength" => cfg.dgp.confound_strength = parse(key, v)?,
        "dgp.lipschitz_scale" => cfg.dgp.lipschitz_scale = parse(key, v)?,
        "dgp.outcome_noise_sd" => cfg.dgp.outcome_noise_sd = parse(key, v)?,
        "dgp.positivity_floor" => cfg.dgp.positivity_floor = parse(key, v)?,
        "dgp.observation_noise_sd" => cfg.dgp.observation_noise_sd = parse(key, v)?,
        "dgp.observation_prob" => cfg.dgp.observation_prob = parse(key, v)?,
        "dgp.burn_in_weeks" => cfg.dgp.burn_in_weeks = parse(key, v)?,
        "dgp.outcome_every_weeks" => cfg.dgp.outcome_every_weeks = parse(key, v)?,
        "dgp.memory_days" => cfg.dgp.memory_days = parse(key, v)?,
        "dgp.dead_concepts" => cfg.dgp.dead_concepts = parse(key, v)?,
        "dgp.assignment" => {
            cfg.dgp.assignment = match v {
                "independent" => AssignmentMode::Independent,
                "running_max" => AssignmentMode::RunningMax,
                other => return Err(Error::config(key, format!("expected independent or running_max, got `{other}`"))),
            }
        }
        "split.train" => cfg.split.train = parse(key, v)?,
        "split.validation" => cfg.split.validation = parse(key, v)?,
        "split.test" => cfg.split.test = parse(key, v)?,
        "history.lookback_days" => {
            let concepts = cfg.features.history.concepts.clone();
            cfg.features.history = HistoryConfig { concepts, ..HistoryConfig::with_lookback(parse(key, v)?) };
        }
        "history.scales" => {
            cfg.features.history.scales = v.split(',').map(|s| parse(key, s)).collect::<Result<Vec<i64>>>()?;
        }
        "history.concepts" => cfg.features.history.concepts = ConceptSet::named(v).map_err(|_| Error::config(key, format!("undefined concept set `{v}`")))?,
        "features.embed_dim" => cfg.features.stub.dim = parse(key, v)?,
        "features.text_weight" => cfg.features.stub.text_weight = parse(key, v)?,
        "features.text_dim" => cfg.features.text_dim = parse(key, v)?,
        "features.hash_seed" => cfg.features.stub.seed = parse(key, v)?,
        "encoder.hidden" => cfg.hidden = parse(key, v)?,
        "encoder.latent_dim" => cfg.latent_dim = parse(key, v)?,
        "encoder.learning_rate" => cfg.train.learning_rate = parse(key, v)?,
        "encoder.discriminator_rate" => cfg.train.discriminator_rate = parse(key, v)?,
        "encoder.epochs" => cfg.train.epochs = parse(key, v)?,
        "encoder.batch_size" => cfg.train.batch_size = parse(key, v)?,
        "encoder.discriminator_steps" => cfg.train.discriminator_steps = parse(key, v)?,
        "encoder.lambda" => cfg.weights.lambda = parse(key, v)?,
        "encoder.beta" => cfg.weights.beta = parse(key, v)?,
        "encoder.alpha" => cfg.weights.alpha = parse(key, v)?,
        "lsh.tables" => cfg.lsh.tables = parse(key, v)?,
        "lsh.hashes" => cfg.lsh.hashes = parse(key, v)?,
        "lsh.width" => cfg.lsh.width = optional(key, v, "auto")?,
        "estimator.k" => cfg.estimator.query.k = parse(key, v)?,
        "estimator.mode" => cfg.estimator.query.mode = NeighborMode::parse(v).ok_or_else(|| Error::config(key, format!("unknown mode `{v}`")))?,
        "estimator.candidate_cap" => cfg.estimator.query.candidate_cap = optional(key, v, "none")?,
        "estimator.fallback" => cfg.estimator.query.fallback = parse_bool(key, v)?,
        "estimator.ridge" => cfg.estimator.ridge = parse(key, v)?,
        "estimator.clip" => cfg.estimator.clip = parse(key, v)?,
        "estimator.propensity_scope" => {
            cfg.estimator.propensity = match v {
                "global" => PropensityScope::Global,
                "neighbourhood" | "neighborhood" => PropensityScope::Neighbourhood,
                other => return Err(Error::config(key, format!("expected global or neighbourhood, got `{other}`"))),
            }
        }
        "propensity.iterations" => cfg.propensity_iterations = parse(key, v)?,
        "propensity.rate" => cfg.propensity_rate = parse(key, v)?,
        "eval.phenotypes" => cfg.phenotypes = parse(key, v)?,
        "eval.baselines" => cfg.baselines = parse_bool(key, v)?,
        other => return Err(Error::config(other, "unknown config key")),
    }
    Ok(())
}

/// `(key, value)` pairs of a config text, with line numbers for errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key=value, got `{line}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn apply(cfg: &mut RunConfig, pairs: &[(String, String)]) -> Result<()> {
    pairs.iter().try_for_each(|(k, v)| set(cfg, k, v))
}

pub fn from_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    apply(&mut cfg, &parse_pairs(text)?)?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    from_str(&std::fs::read_to_string(path)?)
}

fn value(cfg: &RunConfig, key: &str) -> String {
    let d = &cfg.dgp;
    let q = &cfg.estimator.query;
    match key {
        "seed" => cfg.seed.to_string(),
        "outdir" => cfg.outdir.display().to_string(),
        "run_id" => cfg.run_id(),
        "dgp.n_units" => d.n_units.to_string(),
        "dgp.steps_min" => d.steps_min.to_string(),
        "dgp.steps_max" => d.steps_max.to_string(),
        "dgp.latent_dim" => d.latent_dim.to_string(),
        "dgp.ambient_dim" => d.ambient_dim.to_string(),
        "dgp.action_count" => d.action_count.to_string(),
        "dgp.confound_strength" => d.confound_strength.to_string(),
        "dgp.lipschitz_scale" => d.lipschitz_scale.to_string(),
        "dgp.outcome_noise_sd" => d.outcome_noise_sd.to_string(),
        "dgp.positivity_floor" => d.positivity_floor.to_string(),
        "dgp.observation_noise_sd" => d.observation_noise_sd.to_string(),
        "dgp.observation_prob" => d.observation_prob.to_string(),
        "dgp.burn_in_weeks" => d.burn_in_weeks.to_string(),
        "dgp.outcome_every_weeks" => d.outcome_every_weeks.to_string(),
        "dgp.memory_days" => d.memory_days.to_string(),
        "dgp.dead_concepts" => d.dead_concepts.to_string(),
        "dgp.assignment" => match d.assignment {
            AssignmentMode::Independent => "independent".into(),
            AssignmentMode::RunningMax => "running_max".into(),
        },
        "split.train" => cfg.split.train.to_string(),
        "split.validation" => cfg.split.validation.to_string(),
        "split.test" => cfg.split.test.to_string(),
        "history.lookback_days" => cfg.features.history.lookback_days.to_string(),
        "history.scales" => cfg.features.history.scales.iter().map(i64::to_string).collect::<Vec<_>>().join(","),
        "history.concepts" => cfg.features.history.concepts.name.clone(),
        "features.embed_dim" => cfg.features.stub.dim.to_string(),
        "features.text_weight" => cfg.features.stub.text_weight.to_string(),
        "features.text_dim" => cfg.features.text_dim.to_string(),
        "features.hash_seed" => cfg.features.stub.seed.to_string(),
        "encoder.hidden" => cfg.hidden.to_string(),
        "encoder.latent_dim" => cfg.latent_dim.to_string(),
        "encoder.learning_rate" => cfg.train.learning_rate.to_string(),
        "encoder.discriminator_rate" => cfg.train.discriminator_rate.to_string(),
        "encoder.epochs" => cfg.train.epochs.to_string(),
        "encoder.batch_size" => cfg.train.batch_size.to_string(),
        "encoder.discriminator_steps" => cfg.train.discriminator_steps.to_string(),
        "encoder.lambda" => cfg.weights.lambda.to_string(),
        "encoder.beta" => cfg.weights.beta.to_string(),
        "encoder.alpha" => cfg.weights.alpha.to_string(),
        "lsh.tables" => cfg.lsh.tables.to_string(),
        "lsh.hashes" => cfg.lsh.hashes.to_string(),
        "lsh.width" => cfg.lsh.width.map_or("auto".into(), |w| w.to_string()),
        "estimator.k" => q.k.to_string(),
        "estimator.mode" => q.mode.as_str().into(),
        "estimator.candidate_cap" => q.candidate_cap.map_or("none".into(), |c| c.to_string()),
        "estimator.fallback" => q.fallback.to_string(),
        "estimator.ridge" => cfg.estimator.ridge.to_string(),
        "estimator.clip" => cfg.estimator.clip.to_string(),
        "estimator.propensity_scope" => match cfg.estimator.propensity {
            PropensityScope::Global => "global".into(),
            PropensityScope::Neighbourhood => "neighbourhood".into(),
        },
        "propensity.iterations" => cfg.propensity_iterations.to_string(),
        "propensity.rate" => cfg.propensity_rate.to_string(),
        "eval.phenotypes" => cfg.phenotypes.to_string(),
        "eval.baselines" => cfg.baselines.to_string(),
        _ => String::new(),
    }
}

/// Config text that parses back to `cfg`. Output location keys are left
/// out, so the text depends only on what the run computes.
pub fn render(cfg: &RunConfig) -> String {
    KEYS.iter()
        .filter(|k| !matches!(**k, "outdir" | "run_id"))
        .map(|k| format!("{k}={}\n", value(cfg, k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        set(&mut cfg, "lsh.width", "2.5").unwrap();
        set(&mut cfg, "history.lookback_days", "30").unwrap();
        set(&mut cfg, "estimator.mode", "action_stratified").unwrap();
        set(&mut cfg, "estimator.candidate_cap", "400").unwrap();
        set(&mut cfg, "dgp.assignment", "running_max").unwrap();
        let back = from_str(&render(&cfg)).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(from_str(&render(&RunConfig::default())).unwrap(), RunConfig::default());
    }

    #[test]
    fn later_assignments_win() {
        let mut cfg = from_str("# comment\nlsh.tables = 4\n\nlsh.tables=6\n").unwrap();
        assert_eq!(cfg.lsh.tables, 6);
        apply(&mut cfg, &[("lsh.tables".into(), "9".into())]).unwrap();
        assert_eq!(cfg.lsh.tables, 9);
    }

    #[test]
    fn errors_name_the_key() {
        let e = from_str("split.train=abc").unwrap_err();
        assert!(e.is_config() && e.to_string().contains("split.train"), "{e}");
        let e = from_str("lsh.bogus=1").unwrap_err();
        assert!(e.to_string().contains("lsh.bogus"));
        assert!(from_str("no equals sign").unwrap_err().is_config());
        assert!(from_str("history.concepts=LUNGS").unwrap_err().is_config());
    }

    #[test]
    fn every_key_is_settable() {
        for k in KEYS {
            let mut cfg = RunConfig::default();
            let v = value(&cfg, k);
            set(&mut cfg, k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }
}
