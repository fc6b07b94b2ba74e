//! From outcome records to encoder inputs.
//!
//! Each outcome record becomes a history summary, a numeric slot vector and a
//! text serialisation. Slots are standardised with statistics of the fitting
//! rows only, then the text and slots are hashed into the stub embedding. A
//! separate hashed term-frequency vector of the text alone serves the
//! text-feature baselines.

use rayon::prelude::*;

use crate::domain::{Dataset, UnitId};
use crate::encoder::{hashed_term_frequencies, stub_embed, StubEmbedding};
use crate::error::{Error, Result};
use crate::history::{feature_vector, serialize_history_text, HistoryBuilder, HistoryConfig};
use crate::latent::RowMeta;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub history: HistoryConfig,
    pub stub: StubEmbedding,
    /// Buckets of the text-only term-frequency vector.
    pub text_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { history: HistoryConfig::default(), stub: StubEmbedding::default(), text_dim: 512 }
    }
}

/// Featurised records, all buffers row-major.
#[derive(Clone, Debug, Default)]
pub struct Rows {
    pub meta: Vec<RowMeta>,
    pub embed_dim: usize,
    pub embeddings: Vec<f64>,
    pub text_dim: usize,
    pub text: Vec<f64>,
}

impl Rows {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn text_row(&self, i: usize) -> &[f64] {
        &self.text[i * self.text_dim..(i + 1) * self.text_dim]
    }
}

/// Slot standardisation fitted on one dataset, reusable on others.
#[derive(Clone, Debug)]
pub struct Featurizer {
    config: FeatureConfig,
    mean: Vec<f64>,
    scale: Vec<f64>,
    flags: Vec<Option<usize>>,
}

struct Raw {
    meta: RowMeta,
    slots: Vec<f64>,
    text: String,
}

fn raw_rows(dataset: &Dataset, builder: &HistoryBuilder, keep: &(dyn Fn(UnitId) -> bool + Sync), with_outcomes: bool) -> Result<Vec<Raw>> {
    let layout = builder.layout();
    dataset
        .outcomes()
        .par_iter()
        .filter(|r| keep(r.unit))
        .map(|r| {
            let summary = builder.build(r.unit, r.time)?;
            Ok(Raw {
                meta: RowMeta { unit: r.unit, time: r.time, action: r.action, outcome: if with_outcomes { r.outcome } else { f64::NAN } },
                slots: feature_vector(&summary, &layout)?,
                text: serialize_history_text(&summary),
            })
        })
        .collect()
}

impl Featurizer {
    /// Fits slot means and scales on the records of units where `keep` holds.
    pub fn fit(dataset: &Dataset, config: FeatureConfig, keep: impl Fn(UnitId) -> bool + Sync) -> Result<Self> {
        let builder = HistoryBuilder::new(dataset, config.history.clone())?;
        let raw = raw_rows(dataset, &builder, &keep, false)?;
        Self::from_raw(config, builder.layout().missing_flags(), &raw)
    }

    /// [`Featurizer::fit`] followed by [`Featurizer::featurize`] on the same
    /// records, building each history once.
    pub fn fit_featurize(dataset: &Dataset, config: FeatureConfig, keep: impl Fn(UnitId) -> bool + Sync, with_outcomes: bool) -> Result<(Self, Rows)> {
        let builder = HistoryBuilder::new(dataset, config.history.clone())?;
        let raw = raw_rows(dataset, &builder, &keep, with_outcomes)?;
        let featurizer = Self::from_raw(config, builder.layout().missing_flags(), &raw)?;
        let rows = featurizer.encode(&raw);
        Ok((featurizer, rows))
    }

    /// Value slots are standardised over the rows where they are present, so a
    /// missing value sits at the observed mean; flags and counts over all rows.
    fn from_raw(config: FeatureConfig, flags: Vec<Option<usize>>, raw: &[Raw]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("featurizer fitting rows"));
        }
        let width = flags.len();
        let present = |r: &Raw, j: usize| flags[j].is_none_or(|f| r.slots[f] == 0.0);
        let mut n = vec![0.0; width];
        let mut mean = vec![0.0; width];
        for r in raw {
            for j in 0..width {
                if present(r, j) {
                    n[j] += 1.0;
                    mean[j] += r.slots[j];
                }
            }
        }
        mean.iter_mut().zip(&n).for_each(|(m, n)| *m /= f64::max(*n, 1.0));
        let mut var = vec![0.0; width];
        for r in raw {
            for j in 0..width {
                if present(r, j) {
                    var[j] += (r.slots[j] - mean[j]).powi(2);
                }
            }
        }
        let scale = var.iter().zip(&n).map(|(v, n)| v / f64::max(*n, 1.0)).map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Ok(Featurizer { config, mean, scale, flags })
    }

    fn standardized(&self, slots: &[f64]) -> Vec<f64> {
        (0..slots.len())
            .map(|j| match self.flags[j] {
                Some(f) if slots[f] != 0.0 => 0.0,
                _ => (slots[j] - self.mean[j]) / self.scale[j],
            })
            .collect()
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// Rows for every outcome record of units where `keep` holds, in dataset order.
    pub fn featurize(&self, dataset: &Dataset, keep: impl Fn(UnitId) -> bool + Sync, with_outcomes: bool) -> Result<Rows> {
        let builder = HistoryBuilder::new(dataset, self.config.history.clone())?;
        if builder.layout().len() != self.mean.len() {
            return Err(Error::Layout(format!("dataset yields {} slots, featurizer was fitted on {}", builder.layout().len(), self.mean.len())));
        }
        let raw = raw_rows(dataset, &builder, &keep, with_outcomes)?;
        Ok(self.encode(&raw))
    }

    fn encode(&self, raw: &[Raw]) -> Rows {
        let (stub, text_dim) = (&self.config.stub, self.config.text_dim);
        let encoded: Vec<(Vec<f64>, Vec<f64>)> = raw
            .par_iter()
            .map(|r| {
                let slots = self.standardized(&r.slots);
                (stub_embed(&r.text, &slots, stub), text_features(&r.text, text_dim, stub.seed))
            })
            .collect();
        let mut rows = Rows { embed_dim: stub.dim, text_dim, ..Rows::default() };
        rows.embeddings.reserve(raw.len() * stub.dim);
        rows.text.reserve(raw.len() * text_dim);
        for (r, (e, t)) in raw.iter().zip(encoded) {
            rows.meta.push(r.meta);
            rows.embeddings.extend(e);
            rows.text.extend(t);
        }
        rows
    }
}

/// Sub-linear (`1 + ln tf`) term frequencies, L2-normalised.
pub fn text_features(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut tf = hashed_term_frequencies(text, dim, seed);
    tf.iter_mut().for_each(|v| *v = v.signum() * v.abs().ln_1p());
    let norm = tf.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        tf.iter_mut().for_each(|v| *v /= norm);
    }
    tf
}
