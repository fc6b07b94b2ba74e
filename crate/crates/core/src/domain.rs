//! Longitudinal records: observations, treatments, outcomes and unit splits.
//!
//! A [`Dataset`] is immutable once built. Concept names are interned and sorted
//! lexicographically, so concept id order is also name order. Per-unit lookups
//! go through an index that is built lazily on first use.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of treatment levels (cumulative doses 0..=6).
pub const DEFAULT_ACTION_COUNT: usize = 7;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitId(pub u32);

impl UnitId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index into [`Dataset::concepts`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConceptId(pub u16);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub unit: UnitId,
    pub time: i64,
    pub concept: ConceptId,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub unit: UnitId,
    pub time: i64,
    pub action: usize,
    pub outcome: f64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    concepts: Vec<String>,
    observations: Vec<Observation>,
    outcomes: Vec<OutcomeRecord>,
    action_count: usize,
    unit_count: usize,
    cumulative_actions: bool,
    index: OnceLock<UnitIndex>,
}

/// One concept's observations for one unit, sorted by time.
#[derive(Clone, Copy, Debug)]
pub struct ConceptSeries<'a> {
    pub concept: ConceptId,
    pub times: &'a [i64],
    pub values: &'a [f64],
}

#[derive(Clone, Debug)]
struct UnitIndex {
    // columnar copy of observations ordered by (unit, concept, time)
    times: Vec<i64>,
    values: Vec<f64>,
    // per unit: (concept, start, end) into the columns
    series: Vec<Vec<(ConceptId, usize, usize)>>,
    // per unit: outcome indices ordered by time
    outcomes: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn concept_name(&self, id: ConceptId) -> &str {
        &self.concepts[id.0 as usize]
    }

    pub fn concept_id(&self, name: &str) -> Option<ConceptId> {
        self.concepts.binary_search_by(|c| c.as_str().cmp(name)).ok().map(|i| ConceptId(i as u16))
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn outcomes(&self) -> &[OutcomeRecord] {
        &self.outcomes
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn unit_count(&self) -> usize {
        self.unit_count
    }

    /// Whether actions are cumulative counts that may never decrease within a unit.
    pub fn cumulative_actions(&self) -> bool {
        self.cumulative_actions
    }

    /// Copy holding only the records of units for which `keep` is true. Concepts
    /// and unit numbering are unchanged, so ids stay valid across both datasets.
    pub fn restrict(&self, keep: impl Fn(UnitId) -> bool) -> Dataset {
        Dataset {
            concepts: self.concepts.clone(),
            observations: self.observations.iter().filter(|o| keep(o.unit)).copied().collect(),
            outcomes: self.outcomes.iter().filter(|r| keep(r.unit)).copied().collect(),
            action_count: self.action_count,
            unit_count: self.unit_count,
            cumulative_actions: self.cumulative_actions,
            index: OnceLock::new(),
        }
    }

    fn index(&self) -> &UnitIndex {
        self.index.get_or_init(|| UnitIndex::build(self))
    }

    /// Per-concept time series of a unit, in concept id order.
    pub fn unit_series(&self, unit: UnitId) -> impl Iterator<Item = ConceptSeries<'_>> + '_ {
        let index = self.index();
        let slots: &[(ConceptId, usize, usize)] = index.series.get(unit.index()).map(|v| v.as_slice()).unwrap_or(&[]);
        slots.iter().map(move |&(concept, start, end)| ConceptSeries {
            concept,
            times: &index.times[start..end],
            values: &index.values[start..end],
        })
    }

    /// Outcome records of a unit ordered by time.
    pub fn unit_outcomes(&self, unit: UnitId) -> impl Iterator<Item = &OutcomeRecord> + '_ {
        let ids: &[usize] = self.index().outcomes.get(unit.index()).map(|v| v.as_slice()).unwrap_or(&[]);
        ids.iter().map(move |&i| &self.outcomes[i])
    }

    /// Position in [`Dataset::outcomes`] of the record at `(unit, time)`.
    pub fn outcome_index(&self, unit: UnitId, time: i64) -> Option<usize> {
        let ids = self.index().outcomes.get(unit.index())?;
        let pos = ids.partition_point(|&i| self.outcomes[i].time < time);
        ids.get(pos).copied().filter(|&i| self.outcomes[i].time == time)
    }

    pub fn write_jsonl(&self, observations: &Path, outcomes: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(observations)?);
        for o in &self.observations {
            let line = ObservationLine { unit: o.unit.0, time: o.time, concept: self.concept_name(o.concept).to_string(), value: o.value };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(outcomes)?);
        for r in &self.outcomes {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads records from any number of JSON Lines files; each line is either an
    /// observation or an outcome record.
    pub fn read_jsonl(paths: &[&Path], action_count: usize, cumulative_actions: bool) -> Result<Dataset> {
        let mut builder = DatasetBuilder::new(action_count).cumulative_actions(cumulative_actions);
        for path in paths {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", n + 1),
                })?;
                match parsed {
                    Line::Observation(o) => builder.observe(UnitId(o.unit), o.time, &o.concept, o.value),
                    Line::Outcome(r) => builder.outcome(r.unit, r.time, r.action, r.outcome),
                }
            }
        }
        Ok(builder.build())
    }
}

#[derive(Serialize, Deserialize)]
struct ObservationLine {
    unit: u32,
    time: i64,
    concept: String,
    value: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Observation(ObservationLine),
    Outcome(OutcomeRecord),
}

impl UnitIndex {
    fn build(ds: &Dataset) -> Self {
        let mut order: Vec<usize> = (0..ds.observations.len()).collect();
        order.sort_by_key(|&i| {
            let o = &ds.observations[i];
            (o.unit, o.concept, o.time, i)
        });
        let mut times = Vec::with_capacity(order.len());
        let mut values = Vec::with_capacity(order.len());
        let mut series: Vec<Vec<(ConceptId, usize, usize)>> = vec![Vec::new(); ds.unit_count];
        let mut start = 0;
        for (pos, &i) in order.iter().enumerate() {
            let o = &ds.observations[i];
            times.push(o.time);
            values.push(o.value);
            let last = pos + 1 == order.len() || {
                let next = &ds.observations[order[pos + 1]];
                next.unit != o.unit || next.concept != o.concept
            };
            if last {
                if let Some(slot) = series.get_mut(o.unit.index()) {
                    slot.push((o.concept, start, pos + 1));
                }
                start = pos + 1;
            }
        }
        let mut outcomes: Vec<Vec<usize>> = vec![Vec::new(); ds.unit_count];
        for (i, r) in ds.outcomes.iter().enumerate() {
            if let Some(slot) = outcomes.get_mut(r.unit.index()) {
                slot.push(i);
            }
        }
        for ids in &mut outcomes {
            ids.sort_by_key(|&i| (ds.outcomes[i].time, i));
        }
        UnitIndex { times, values, series, outcomes }
    }
}

/// Incremental construction of a [`Dataset`].
#[derive(Debug)]
pub struct DatasetBuilder {
    names: Vec<String>,
    lookup: HashMap<String, u16>,
    observations: Vec<Observation>,
    outcomes: Vec<OutcomeRecord>,
    action_count: usize,
    unit_count: usize,
    cumulative_actions: bool,
}

impl DatasetBuilder {
    pub fn new(action_count: usize) -> Self {
        DatasetBuilder {
            names: Vec::new(),
            lookup: HashMap::new(),
            observations: Vec::new(),
            outcomes: Vec::new(),
            action_count,
            unit_count: 0,
            cumulative_actions: true,
        }
    }

    pub fn cumulative_actions(mut self, yes: bool) -> Self {
        self.cumulative_actions = yes;
        self
    }

    /// Declares at least `n` units, including units without any records.
    pub fn units(mut self, n: usize) -> Self {
        self.unit_count = self.unit_count.max(n);
        self
    }

    pub fn intern(&mut self, concept: &str) -> ConceptId {
        if let Some(&id) = self.lookup.get(concept) {
            return ConceptId(id);
        }
        let id = u16::try_from(self.names.len()).expect("more than 65535 concepts");
        self.names.push(concept.to_string());
        self.lookup.insert(concept.to_string(), id);
        ConceptId(id)
    }

    pub fn observe(&mut self, unit: UnitId, time: i64, concept: &str, value: f64) {
        let concept = self.intern(concept);
        self.observe_id(unit, time, concept, value);
    }

    pub fn observe_id(&mut self, unit: UnitId, time: i64, concept: ConceptId, value: f64) {
        self.unit_count = self.unit_count.max(unit.index() + 1);
        self.observations.push(Observation { unit, time, concept, value });
    }

    pub fn outcome(&mut self, unit: UnitId, time: i64, action: usize, outcome: f64) {
        self.unit_count = self.unit_count.max(unit.index() + 1);
        self.outcomes.push(OutcomeRecord { unit, time, action, outcome });
    }

    pub fn build(self) -> Dataset {
        // renumber concepts so id order matches name order
        let mut sorted: Vec<(usize, &String)> = self.names.iter().enumerate().collect();
        sorted.sort_by(|a, b| a.1.cmp(b.1));
        let mut remap = vec![0u16; self.names.len()];
        for (new, (old, _)) in sorted.iter().enumerate() {
            remap[*old] = new as u16;
        }
        let concepts = sorted.into_iter().map(|(_, n)| n.clone()).collect();
        let observations = self
            .observations
            .into_iter()
            .map(|o| Observation { concept: ConceptId(remap[o.concept.0 as usize]), ..o })
            .collect();
        Dataset {
            concepts,
            observations,
            outcomes: self.outcomes,
            action_count: self.action_count,
            unit_count: self.unit_count,
            cumulative_actions: self.cumulative_actions,
            index: OnceLock::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    UnknownUnit,
    NegativeTime,
    NonFiniteValue,
    NonFiniteOutcome,
    ActionOutOfRange,
    DuplicateOutcome,
    OutcomeTimeOrder,
    NonMonotoneAction,
    NoOutcomes,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::UnknownUnit => "unknown unit",
            Rule::NegativeTime => "negative time",
            Rule::NonFiniteValue => "non-finite observation value",
            Rule::NonFiniteOutcome => "non-finite outcome",
            Rule::ActionOutOfRange => "action out of range",
            Rule::DuplicateOutcome => "duplicate outcome",
            Rule::OutcomeTimeOrder => "outcome times not increasing",
            Rule::NonMonotoneAction => "non-monotone action",
            Rule::NoOutcomes => "unit without outcomes",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub unit: UnitId,
    pub time: Option<i64>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.time {
            Some(t) => write!(f, "unit {} time {}: {}", self.unit, t, self.rule),
            None => write!(f, "unit {}: {}", self.unit, self.rule),
        }
    }
}

/// Checks every dataset invariant and reports each violation; an empty report
/// means the dataset is well formed.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = ds.unit_count;
    for o in &ds.observations {
        if o.unit.index() >= n {
            out.push(Violation { unit: o.unit, time: Some(o.time), rule: Rule::UnknownUnit });
        }
        if o.time < 0 {
            out.push(Violation { unit: o.unit, time: Some(o.time), rule: Rule::NegativeTime });
        }
        if !o.value.is_finite() {
            out.push(Violation { unit: o.unit, time: Some(o.time), rule: Rule::NonFiniteValue });
        }
    }
    let mut per_unit: Vec<Vec<&OutcomeRecord>> = vec![Vec::new(); n];
    for r in &ds.outcomes {
        let v = |rule| Violation { unit: r.unit, time: Some(r.time), rule };
        if r.unit.index() >= n {
            out.push(v(Rule::UnknownUnit));
            continue;
        }
        if r.time < 0 {
            out.push(v(Rule::NegativeTime));
        }
        if !r.outcome.is_finite() {
            out.push(v(Rule::NonFiniteOutcome));
        }
        if r.action >= ds.action_count {
            out.push(v(Rule::ActionOutOfRange));
        }
        per_unit[r.unit.index()].push(r);
    }
    for (u, records) in per_unit.iter_mut().enumerate() {
        let unit = UnitId(u as u32);
        if records.is_empty() {
            out.push(Violation { unit, time: None, rule: Rule::NoOutcomes });
            continue;
        }
        if let Some(w) = records.windows(2).find(|w| w[1].time < w[0].time) {
            out.push(Violation { unit, time: Some(w[1].time), rule: Rule::OutcomeTimeOrder });
        }
        records.sort_by_key(|r| r.time);
        let mut last_action: Option<usize> = None;
        for (i, r) in records.iter().enumerate() {
            if i > 0 && records[i - 1].time == r.time {
                out.push(Violation { unit, time: Some(r.time), rule: Rule::DuplicateOutcome });
                continue;
            }
            if ds.cumulative_actions {
                if let Some(prev) = last_action {
                    if r.action < prev {
                        out.push(Violation { unit, time: Some(r.time), rule: Rule::NonMonotoneAction });
                    }
                }
            }
            last_action = Some(r.action);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "train" => Some(Role::Train),
            "validation" => Some(Role::Validation),
            "test" => Some(Role::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, validation: 0.1, test: 0.2 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("validation", self.validation), ("test", self.test)] {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::config(format!("split.{name}"), format!("fraction must be positive, got {f}")));
            }
        }
        let sum = self.train + self.validation + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Role of every unit; all records of a unit share its role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    roles: Vec<Role>,
}

impl SplitAssignment {
    pub fn new(roles: Vec<Role>) -> Self {
        SplitAssignment { roles }
    }

    pub fn role(&self, unit: UnitId) -> Role {
        self.roles[unit.index()]
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn units(&self, role: Role) -> impl Iterator<Item = UnitId> + '_ {
        self.roles.iter().enumerate().filter(move |(_, &r)| r == role).map(|(i, _)| UnitId(i as u32))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["unit", "role"])?;
        for (i, r) in self.roles.iter().enumerate() {
            w.write_record([i.to_string().as_str(), r.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bad = |m: &str| Error::Format { path: path.to_path_buf(), message: m.to_string() };
            let unit: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad unit"))?;
            let role = rec.get(1).and_then(Role::parse).ok_or_else(|| bad("bad role"))?;
            pairs.push((unit, role));
        }
        pairs.sort_by_key(|p| p.0);
        if pairs.iter().enumerate().any(|(i, p)| p.0 != i) {
            return Err(Error::Format { path: path.to_path_buf(), message: "units must be contiguous from 0".into() });
        }
        Ok(SplitAssignment { roles: pairs.into_iter().map(|p| p.1).collect() })
    }
}

/// Randomly partitions units into train/validation/test with the given fractions.
pub fn split_units(ds: &Dataset, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    split_unit_count(ds.unit_count(), fractions, seed)
}

pub fn split_unit_count(n: usize, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    fractions.validate()?;
    let n_train = ((fractions.train * n as f64).round() as usize).min(n);
    let n_val = ((fractions.validation * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut roles = vec![Role::Test; n];
    for (pos, &u) in order.iter().enumerate() {
        roles[u] = if pos < n_train {
            Role::Train
        } else if pos < n_train + n_val {
            Role::Validation
        } else {
            Role::Test
        };
    }
    Ok(SplitAssignment { roles })
}
