//! Alternating SGD: a discriminator step on detached samples, then a main step
//! on the composite loss that leaves the discriminator untouched.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{discriminator_grad_into, encode, loss_and_grad_into, Architecture, Batch, EncoderParams, Layers, LossWeights};
use crate::error::{Error, Result};

/// Loss above which training is abandoned.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub discriminator_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub discriminator_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.05, discriminator_rate: 0.05, epochs: 30, batch_size: 32, seed: 0, discriminator_steps: 1 }
    }
}

impl TrainConfig {
    /// Zero epochs is accepted and returns the initialisation.
    pub fn validate(&self) -> Result<()> {
        let rate = |v: f64| v > 0.0 && v.is_finite();
        if !rate(self.learning_rate) {
            return Err(Error::config("encoder.learning_rate", "must be finite and > 0"));
        }
        if !rate(self.discriminator_rate) {
            return Err(Error::config("encoder.discriminator_rate", "must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("encoder.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Epoch means of the loss terms, averaged over the epoch's mini-batches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub outcome: f64,
    pub kl: f64,
    pub mi: f64,
}

/// Training inputs: `embeddings` is row-major `n × dim`.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub embeddings: &'a [f64],
    pub dim: usize,
    pub actions: &'a [usize],
    pub outcomes: &'a [f64],
}

impl TrainData<'_> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn write_loss_trace(trace: &[EpochLoss], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "total", "recon", "outcome", "kl", "mi"])?;
    for t in trace {
        w.write_record([t.epoch.to_string(), t.total.to_string(), t.recon.to_string(), t.outcome.to_string(), t.kl.to_string(), t.mi.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn standardize(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

/// Trains from a seeded initialisation. Outcomes are standardised internally;
/// the affine map is stored in the returned parameters.
pub fn train(data: &TrainData, arch: Architecture, cfg: &TrainConfig, weights: &LossWeights) -> Result<(EncoderParams, Vec<EpochLoss>)> {
    cfg.validate()?;
    weights.validate()?;
    let mut params = EncoderParams::init(arch, cfg.seed)?;
    if data.is_empty() {
        return Err(Error::Empty("encoder training rows"));
    }
    if data.dim != arch.embed_dim || data.embeddings.len() != data.len() * data.dim || data.outcomes.len() != data.len() {
        return Err(Error::Dimension { expected: data.len() * arch.embed_dim, got: data.embeddings.len() });
    }
    let (shift, scale) = standardize(data.outcomes);
    params.outcome_shift = shift;
    params.outcome_scale = scale;
    let y: Vec<f64> = data.outcomes.iter().map(|v| (v - shift) / scale).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (e_dim, d) = (arch.embed_dim, arch.latent_dim);
    let bs = cfg.batch_size.min(data.len());
    let mut be = Vec::with_capacity(bs * e_dim);
    let mut ba = Vec::with_capacity(bs);
    let mut by = Vec::with_capacity(bs);
    let mut noise = Vec::with_capacity(bs * d);
    let mut grad = vec![0.0; params.values.len()];
    let disc = params.layers.discriminator();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochLoss { epoch, ..EpochLoss::default() };
        let mut seen = 0usize;
        for chunk in order.chunks(bs) {
            be.clear();
            ba.clear();
            by.clear();
            noise.clear();
            for &i in chunk {
                be.extend_from_slice(data.row(i));
                ba.push(data.actions[i]);
                by.push(y[i]);
            }
            noise.extend((0..chunk.len() * d).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
            let batch = Batch { embeddings: &be, actions: &ba, outcomes: &by, noise: &noise };

            for _ in 0..cfg.discriminator_steps {
                discriminator_grad_into(&params, &batch, &mut grad)?;
                for i in disc.clone() {
                    params.values[i] -= cfg.discriminator_rate * grad[i];
                }
            }
            let parts = loss_and_grad_into(&params, &batch, weights, &mut grad)?;
            for (i, (v, g)) in params.values.iter_mut().zip(&grad).enumerate() {
                if !disc.contains(&i) {
                    *v -= cfg.learning_rate * g;
                }
            }
            let w = chunk.len() as f64;
            acc.total += w * parts.total;
            acc.recon += w * parts.recon;
            acc.outcome += w * parts.outcome;
            acc.kl += w * parts.kl;
            acc.mi += w * parts.mi;
            seen += chunk.len();
            if !(parts.total.abs() <= DIVERGENCE_LIMIT) {
                trace.push(acc);
                return Err(Error::Divergence { epoch, total: parts.total, trace });
            }
        }
        let n = seen as f64;
        for v in [&mut acc.total, &mut acc.recon, &mut acc.outcome, &mut acc.kl, &mut acc.mi] {
            *v /= n;
        }
        trace.push(acc);
        if !params.is_finite() {
            return Err(Error::NonFinite { component: "encoder parameters" });
        }
    }
    Ok((params, trace))
}

/// Posterior means (`z = μ`) of row-major embeddings, row-major `n × d`.
pub fn embed_rows(params: &EncoderParams, embeddings: &[f64]) -> Result<Vec<f64>> {
    let e_dim = params.arch.embed_dim;
    if embeddings.len() % e_dim != 0 {
        return Err(Error::Dimension { expected: e_dim, got: embeddings.len() % e_dim });
    }
    let rows: Result<Vec<Vec<f64>>> = embeddings.par_chunks(e_dim).map(|e| encode(params, e, None).map(|o| o.z)).collect();
    Ok(rows?.concat())
}

/// Share of rows whose action the trained discriminator ranks first, at `z = μ`.
pub fn discriminator_accuracy(params: &EncoderParams, embeddings: &[f64], actions: &[usize]) -> Result<f64> {
    let z = embed_rows(params, embeddings)?;
    let d = params.arch.latent_dim;
    let hits = z
        .chunks(d)
        .zip(actions)
        .filter(|(z, &a)| {
            let p = params.discriminate(z);
            let best = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            best == a
        })
        .count();
    Ok(hits as f64 / actions.len().max(1) as f64)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    arch: Architecture,
    layers: Vec<(String, usize, usize)>,
    seed: u64,
    outcome_shift: f64,
    outcome_scale: f64,
    parameter_count: usize,
}

const FORMAT: &str = "latent-match-encoder/1";

/// One JSON header line, then the parameters as little-endian `f64`.
pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let header = Header {
        format: FORMAT.to_string(),
        arch: params.arch,
        layers: params.layers.named().iter().map(|(n, l)| (n.to_string(), l.inputs, l.outputs)).collect(),
        seed: params.seed,
        outcome_shift: params.outcome_shift,
        outcome_scale: params.outcome_scale,
        parameter_count: params.values.len(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bad = |message: String| Error::Format { path: path.to_path_buf(), message };
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown format {}", header.format)));
    }
    let layers = Layers::new(&header.arch);
    if layers.len() != header.parameter_count {
        return Err(bad(format!("header declares {} parameters, architecture needs {}", header.parameter_count, layers.len())));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * header.parameter_count {
        return Err(bad(format!("expected {} parameter bytes, found {}", 8 * header.parameter_count, bytes.len())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    Ok(EncoderParams {
        arch: header.arch,
        layers,
        values,
        seed: header.seed,
        outcome_shift: header.outcome_shift,
        outcome_scale: header.outcome_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, arch: &Architecture) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut e = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            for j in 0..arch.embed_dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                e.push(x * ((j + 1) as f64).sin() * 0.3 + 0.05 * noise);
            }
            a.push(i % arch.action_count);
            y.push(2.0 * x + (i % arch.action_count) as f64);
        }
        (e, a, y)
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let arch = Architecture { embed_dim: 8, hidden: 5, latent_dim: 2, action_count: 3 };
        let (e, a, y) = toy(20, &arch);
        let data = TrainData { embeddings: &e, dim: 8, actions: &a, outcomes: &y };
        let cfg = TrainConfig { epochs: 0, seed: 4, ..TrainConfig::default() };
        let (p, trace) = train(&data, arch, &cfg, &LossWeights::default()).unwrap();
        assert!(trace.is_empty());
        assert_eq!(p.values, EncoderParams::init(arch, 4).unwrap().values);
    }

    #[test]
    fn loss_falls_and_training_is_deterministic() {
        let arch = Architecture { embed_dim: 8, hidden: 8, latent_dim: 2, action_count: 3 };
        let (e, a, y) = toy(200, &arch);
        let data = TrainData { embeddings: &e, dim: 8, actions: &a, outcomes: &y };
        let cfg = TrainConfig { epochs: 10, ..TrainConfig::default() };
        let (p1, t1) = train(&data, arch, &cfg, &LossWeights::default()).unwrap();
        let (p2, t2) = train(&data, arch, &cfg, &LossWeights::default()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
        assert!(t1[9].total < t1[0].total);
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let arch = Architecture { embed_dim: 8, hidden: 8, latent_dim: 2, action_count: 3 };
        let (e, a, mut y) = toy(50, &arch);
        y[0] = 1e9;
        let data = TrainData { embeddings: &e, dim: 8, actions: &a, outcomes: &y };
        let cfg = TrainConfig { epochs: 5, learning_rate: 50.0, ..TrainConfig::default() };
        match train(&data, arch, &cfg, &LossWeights { lambda: 1e6, ..LossWeights::default() }) {
            Err(Error::Divergence { trace, .. }) => assert!(!trace.is_empty()),
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = Architecture { embed_dim: 8, hidden: 5, latent_dim: 2, action_count: 3 };
        let mut p = EncoderParams::init(arch, 9).unwrap();
        p.outcome_shift = 1.5;
        let path = dir.path().join("enc.bin");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }
}
