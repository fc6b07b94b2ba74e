//! Leakage-safe multi-scale history summaries.
//!
//! For an outcome at day `t`, each selected concept is summarised over the
//! closed windows `[t − s, t]` for every scale `s`. Nothing after `t` is ever
//! read. Summaries become a fixed-length feature vector (missing stats encoded
//! as `0.0` plus an indicator) and a line-oriented text rendering.

use std::fmt::Write as _;
use std::path::Path;

use crate::domain::{ConceptId, Dataset, UnitId};
use crate::error::{Error, Result};

pub const DEFAULT_LOOKBACK_DAYS: i64 = 180;
pub const DEFAULT_SCALES: [i64; 4] = [7, 30, 90, 180];
pub const STATS: [&str; 5] = ["mean", "std", "min", "max", "count"];

/// A named filter over concept names by prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptSet {
    pub name: String,
    /// Included prefixes; empty means every concept.
    pub include: Vec<String>,
    pub exclude: Vec<String>,
}

impl ConceptSet {
    pub const NAMED: [&'static str; 5] = ["ALL", "HEART", "BREATHING", "ACTIVITY", "RECORDS"];

    pub fn all() -> Self {
        ConceptSet { name: "ALL".into(), include: Vec::new(), exclude: Vec::new() }
    }

    pub fn custom(name: &str, include: &[&str]) -> Self {
        ConceptSet { name: name.into(), include: include.iter().map(|s| s.to_string()).collect(), exclude: Vec::new() }
    }

    /// `self` minus every concept starting with one of `prefixes`.
    pub fn excluding(mut self, name: &str, prefixes: &[&str]) -> Self {
        self.name = name.into();
        self.exclude.extend(prefixes.iter().map(|s| s.to_string()));
        self
    }

    pub fn named(name: &str) -> Result<Self> {
        let prefix = match name {
            "ALL" => return Ok(Self::all()),
            "HEART" => "heart_",
            "BREATHING" => "breathing_",
            "ACTIVITY" => "activity_",
            "RECORDS" => "records_",
            other => return Err(Error::config("concept_set", format!("undefined concept set `{other}`"))),
        };
        Ok(Self::custom(name, &[prefix]))
    }

    pub fn matches(&self, concept: &str) -> bool {
        let included = self.include.is_empty() || self.include.iter().any(|p| concept.starts_with(p.as_str()));
        included && !self.exclude.iter().any(|p| concept.starts_with(p.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryConfig {
    pub lookback_days: i64,
    pub scales: Vec<i64>,
    pub concepts: ConceptSet,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        HistoryConfig { lookback_days: DEFAULT_LOOKBACK_DAYS, scales: DEFAULT_SCALES.to_vec(), concepts: ConceptSet::all() }
    }
}

impl HistoryConfig {
    /// Default scales truncated to the lookback, with the lookback itself as the widest window.
    pub fn with_lookback(lookback_days: i64) -> Self {
        let mut scales: Vec<i64> = DEFAULT_SCALES.iter().copied().filter(|&s| s <= lookback_days).collect();
        if scales.last() != Some(&lookback_days) {
            scales.push(lookback_days);
        }
        HistoryConfig { lookback_days, scales, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback_days < 1 {
            return Err(Error::config("history.lookback_days", "must be positive"));
        }
        if self.scales.is_empty() || self.scales[0] < 1 {
            return Err(Error::config("history.scales", "need at least one positive scale"));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("history.scales", "scales must be strictly increasing"));
        }
        if *self.scales.last().unwrap() > self.lookback_days {
            return Err(Error::config("history.scales", "every scale must be ≤ lookback_days"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct WindowStats {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub count: u32,
}

impl WindowStats {
    /// Summary of a sample; `std` uses the `n − 1` divisor.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return WindowStats::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        WindowStats { mean: Some(mean), std, min: Some(min), max: Some(max), count: n as u32 }
    }

    fn optional(&self) -> [Option<f64>; 4] {
        [self.mean, self.std, self.min, self.max]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistorySummary {
    pub unit: UnitId,
    pub time: i64,
    pub concepts: Vec<String>,
    pub scales: Vec<i64>,
    /// Concept-major: `stats[c * scales.len() + s]`.
    pub stats: Vec<WindowStats>,
    pub prior_action: usize,
    pub prior_outcome: Option<f64>,
}

impl HistorySummary {
    pub fn get(&self, concept: usize, scale: usize) -> &WindowStats {
        &self.stats[concept * self.scales.len() + scale]
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == name)
    }
}

/// Bookkeeping from an instrumented build: which observation times were read.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HistoryTrace {
    pub contributing: usize,
    pub min_time: Option<i64>,
    pub max_time: Option<i64>,
}

/// Summarises histories of one dataset under one config.
#[derive(Debug)]
pub struct HistoryBuilder<'a> {
    dataset: &'a Dataset,
    config: HistoryConfig,
    selected: Vec<ConceptId>,
    names: Vec<String>,
}

impl<'a> HistoryBuilder<'a> {
    pub fn new(dataset: &'a Dataset, config: HistoryConfig) -> Result<Self> {
        config.validate()?;
        let selected: Vec<ConceptId> = (0..dataset.concepts().len())
            .map(|i| ConceptId(i as u16))
            .filter(|&c| config.concepts.matches(dataset.concept_name(c)))
            .collect();
        let names = selected.iter().map(|&c| dataset.concept_name(c).to_string()).collect();
        Ok(HistoryBuilder { dataset, config, selected, names })
    }

    pub fn config(&self) -> &HistoryConfig {
        &self.config
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout { concepts: self.names.clone(), scales: self.config.scales.clone() }
    }

    pub fn build(&self, unit: UnitId, time: i64) -> Result<HistorySummary> {
        self.build_traced(unit, time).map(|(s, _)| s)
    }

    pub fn build_traced(&self, unit: UnitId, time: i64) -> Result<(HistorySummary, HistoryTrace)> {
        if unit.index() >= self.dataset.unit_count() || self.dataset.outcome_index(unit, time).is_none() {
            return Err(Error::Lookup(format!("no outcome record for unit {unit} at time {time}")));
        }
        let n_scales = self.config.scales.len();
        let mut stats = vec![WindowStats::default(); self.selected.len() * n_scales];
        let mut trace = HistoryTrace::default();
        let start = time - self.config.lookback_days;
        let mut sel = 0;
        for series in self.dataset.unit_series(unit) {
            while sel < self.selected.len() && self.selected[sel] < series.concept {
                sel += 1;
            }
            if sel == self.selected.len() {
                break;
            }
            if self.selected[sel] != series.concept {
                continue;
            }
            let hi = series.times.partition_point(|&t| t <= time);
            let lo = series.times.partition_point(|&t| t < start);
            if hi > lo {
                trace.contributing += hi - lo;
                trace.min_time = Some(trace.min_time.map_or(series.times[lo], |m| m.min(series.times[lo])));
                trace.max_time = Some(trace.max_time.map_or(series.times[hi - 1], |m| m.max(series.times[hi - 1])));
            }
            for (s, &scale) in self.config.scales.iter().enumerate() {
                let from = series.times.partition_point(|&t| t < time - scale);
                stats[sel * n_scales + s] = WindowStats::of(&series.values[from.max(lo)..hi]);
            }
        }
        let prior = self.dataset.unit_outcomes(unit).take_while(|r| r.time < time).last();
        let summary = HistorySummary {
            unit,
            time,
            concepts: self.names.clone(),
            scales: self.config.scales.clone(),
            stats,
            prior_action: prior.map_or(0, |r| r.action),
            prior_outcome: prior.map(|r| r.outcome),
        };
        Ok((summary, trace))
    }
}

/// One-off summary; see [`HistoryBuilder`] for repeated queries.
pub fn build_history(dataset: &Dataset, unit: UnitId, time: i64, config: &HistoryConfig) -> Result<HistorySummary> {
    HistoryBuilder::new(dataset, config.clone())?.build(unit, time)
}

/// Fixed slot order: per concept, per scale, the five stats then four missing
/// indicators (mean, std, min, max); then prior action, prior outcome and its
/// missing indicator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub concepts: Vec<String>,
    pub scales: Vec<i64>,
}

const PER_WINDOW: usize = 9;
const TAIL: usize = 3;

impl FeatureLayout {
    pub fn len(&self) -> usize {
        self.concepts.len() * self.scales.len() * PER_WINDOW + TAIL
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// For each slot, the index of the slot flagging it missing, if it has one.
    pub fn missing_flags(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.len());
        for g in 0..self.concepts.len() * self.scales.len() {
            let base = g * PER_WINDOW;
            out.extend((0..4).map(|s| Some(base + 5 + s)));
            out.extend([None; 5]);
        }
        let n = self.len();
        out.extend([None, Some(n - 1), None]);
        out
    }

    /// `(concept, scale, stat)` per slot, as written to the layout manifest.
    pub fn slots(&self) -> Vec<(String, i64, String)> {
        let mut out = Vec::with_capacity(self.len());
        for c in &self.concepts {
            for &s in &self.scales {
                for stat in STATS {
                    out.push((c.clone(), s, stat.to_string()));
                }
                for stat in &STATS[..4] {
                    out.push((c.clone(), s, format!("{stat}_missing")));
                }
            }
        }
        for tail in ["prior_action", "prior_outcome", "prior_outcome_missing"] {
            out.push((String::new(), 0, tail.to_string()));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["slot_index", "concept", "scale", "stat"])?;
        for (i, (c, s, stat)) in self.slots().into_iter().enumerate() {
            w.write_record([i.to_string(), c, s.to_string(), stat])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn feature_vector(summary: &HistorySummary, layout: &FeatureLayout) -> Result<Vec<f64>> {
    if summary.concepts != layout.concepts {
        return Err(Error::Layout(format!(
            "summary has {} concepts, layout expects {}",
            summary.concepts.len(),
            layout.concepts.len()
        )));
    }
    if summary.scales != layout.scales {
        return Err(Error::Layout(format!("summary scales {:?} differ from layout {:?}", summary.scales, layout.scales)));
    }
    let mut v = Vec::with_capacity(layout.len());
    for st in &summary.stats {
        let opt = st.optional();
        v.extend(opt.iter().map(|o| o.unwrap_or(0.0)));
        v.push(st.count as f64);
        v.extend(opt.iter().map(|o| if o.is_some() { 0.0 } else { 1.0 }));
    }
    v.push(summary.prior_action as f64);
    v.push(summary.prior_outcome.unwrap_or(0.0));
    v.push(if summary.prior_outcome.is_some() { 0.0 } else { 1.0 });
    Ok(v)
}

fn fmt_stat(out: &mut String, v: Option<f64>) {
    match v {
        Some(x) => {
            let _ = write!(out, "{x:.2}");
        }
        None => out.push_str("na"),
    }
}

/// Deterministic text rendering: a header line, then one line per
/// (window, concept) with windows ascending and concepts in name order.
pub fn serialize_history_text(summary: &HistorySummary) -> String {
    let mut out = String::with_capacity(64 + summary.stats.len() * 72);
    let _ = write!(out, "UNIT {} TIME {} PRIOR_DOSES {} PRIOR_OUTCOME ", summary.unit, summary.time, summary.prior_action);
    fmt_stat(&mut out, summary.prior_outcome);
    out.push('\n');
    let mut order: Vec<usize> = (0..summary.concepts.len()).collect();
    order.sort_by(|&a, &b| summary.concepts[a].cmp(&summary.concepts[b]));
    for (s, scale) in summary.scales.iter().enumerate() {
        for &c in &order {
            let st = summary.get(c, s);
            let _ = write!(out, "WINDOW {scale}d | {} | mean=", summary.concepts[c]);
            fmt_stat(&mut out, st.mean);
            out.push_str(" std=");
            fmt_stat(&mut out, st.std);
            out.push_str(" min=");
            fmt_stat(&mut out, st.min);
            out.push_str(" max=");
            fmt_stat(&mut out, st.max);
            let _ = writeln!(out, " n={}", st.count);
        }
    }
    out
}
