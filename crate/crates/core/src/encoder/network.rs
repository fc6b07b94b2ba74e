//! Parameters, forward pass, composite loss and its analytic gradient.
//!
//! All parameters live in one flat vector. Each dense layer stores its weight
//! matrix row-major (`out × in`) followed by its bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::softmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub embed_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub action_count: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { embed_dim: 256, hidden: 64, latent_dim: 16, action_count: 7 }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.hidden", self.hidden),
            ("encoder.latent_dim", self.latent_dim),
            ("encoder.action_count", self.action_count),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub offset: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Layer {
    pub fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn bias(&self) -> std::ops::Range<usize> {
        let w = self.offset + self.inputs * self.outputs;
        w..w + self.outputs
    }

    pub fn end(&self) -> usize {
        self.offset + (self.inputs + 1) * self.outputs
    }

    fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &p[self.weights()];
        let b = &p[self.bias()];
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            *yo = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates `dy ⊗ x` into the gradient and, if asked, writes `Wᵀ dy` into `dx`.
    fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        let (gw, gb) = g[self.offset..self.end()].split_at_mut(self.inputs * self.outputs);
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let row = &mut gw[o * self.inputs..(o + 1) * self.inputs];
            row.iter_mut().zip(x).for_each(|(r, xi)| *r += d * xi);
        }
        if let Some(dx) = dx {
            let w = &p[self.weights()];
            dx.iter_mut().for_each(|v| *v = 0.0);
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                dx.iter_mut().zip(row).for_each(|(v, wi)| *v += d * wi);
            }
        }
    }
}

/// Offsets of every layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layers {
    pub enc1: Layer,
    pub enc_mu: Layer,
    pub enc_lv: Layer,
    pub dec1: Layer,
    pub dec2: Layer,
    pub out1: Layer,
    pub out2: Layer,
    pub disc1: Layer,
    pub disc2: Layer,
}

impl Layers {
    pub fn new(a: &Architecture) -> Self {
        let mut offset = 0;
        let mut next = |inputs: usize, outputs: usize| {
            let l = Layer { offset, inputs, outputs };
            offset = l.end();
            l
        };
        let (e, h, d, n_a) = (a.embed_dim, a.hidden, a.latent_dim, a.action_count);
        Layers {
            enc1: next(e, h),
            enc_mu: next(h, d),
            enc_lv: next(h, d),
            dec1: next(d, h),
            dec2: next(h, e),
            out1: next(d + n_a, h),
            out2: next(h, 1),
            disc1: next(d, h),
            disc2: next(h, n_a),
        }
    }

    pub fn named(&self) -> [(&'static str, Layer); 9] {
        [
            ("enc1", self.enc1),
            ("enc_mu", self.enc_mu),
            ("enc_lv", self.enc_lv),
            ("dec1", self.dec1),
            ("dec2", self.dec2),
            ("out1", self.out1),
            ("out2", self.out2),
            ("disc1", self.disc1),
            ("disc2", self.disc2),
        ]
    }

    pub fn len(&self) -> usize {
        self.disc2.end()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters owned by the discriminator; the main step leaves these alone.
    pub fn discriminator(&self) -> std::ops::Range<usize> {
        self.disc1.offset..self.disc2.end()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub arch: Architecture,
    pub layers: Layers,
    pub values: Vec<f64>,
    pub seed: u64,
    /// Affine map from the outcome head's standardized scale back to outcome units.
    pub outcome_shift: f64,
    pub outcome_scale: f64,
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layers = Layers::new(&arch);
        let mut values = vec![0.0; layers.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, l) in layers.named() {
            let a = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for v in &mut values[l.weights()] {
                *v = rng.random_range(-a..a);
            }
        }
        Ok(EncoderParams { arch, layers, values, seed, outcome_shift: 0.0, outcome_scale: 1.0 })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_embedding(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.arch.embed_dim {
            return Err(Error::Dimension { expected: self.arch.embed_dim, got: e.len() });
        }
        Ok(())
    }

    /// Posterior mean and log-variance of one embedding.
    pub fn posterior(&self, e: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_embedding(e)?;
        let mut h1 = vec![0.0; self.arch.hidden];
        self.layers.enc1.forward(&self.values, e, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut mu = vec![0.0; self.arch.latent_dim];
        let mut lv = vec![0.0; self.arch.latent_dim];
        self.layers.enc_mu.forward(&self.values, &h1, &mut mu);
        self.layers.enc_lv.forward(&self.values, &h1, &mut lv);
        Ok((mu, lv))
    }

    /// Outcome head prediction in outcome units.
    pub fn predict_outcome(&self, z: &[f64], action: usize) -> f64 {
        let mut scratch = Scratch::new(&self.arch);
        self.outcome_head(z, action, &mut scratch);
        self.outcome_shift + self.outcome_scale * scratch.yhat
    }

    /// Discriminator class probabilities for a latent vector.
    pub fn discriminate(&self, z: &[f64]) -> Vec<f64> {
        let mut scratch = Scratch::new(&self.arch);
        self.discriminator(z, &mut scratch);
        softmax(&scratch.logits)
    }

    fn outcome_head(&self, z: &[f64], action: usize, s: &mut Scratch) {
        let d = self.arch.latent_dim;
        s.o_in[..d].copy_from_slice(z);
        s.o_in[d..].iter_mut().enumerate().for_each(|(i, v)| *v = if i == action { 1.0 } else { 0.0 });
        self.layers.out1.forward(&self.values, &s.o_in, &mut s.q1);
        s.q1.iter_mut().for_each(|v| *v = v.tanh());
        let mut y = [0.0];
        self.layers.out2.forward(&self.values, &s.q1, &mut y);
        s.yhat = y[0];
    }

    fn discriminator(&self, z: &[f64], s: &mut Scratch) {
        self.layers.disc1.forward(&self.values, z, &mut s.r1);
        s.r1.iter_mut().for_each(|v| *v = v.tanh());
        self.layers.disc2.forward(&self.values, &s.r1, &mut s.logits);
    }
}

/// Reparameterised sample: `z = μ + σ ⊙ ε` with `σ = exp(½ log σ²)`; `z = μ`
/// when no noise is given.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
}

pub fn encode(params: &EncoderParams, e: &[f64], noise: Option<&[f64]>) -> Result<Encoded> {
    let (mu, lv) = params.posterior(e)?;
    let sigma: Vec<f64> = lv.iter().map(|l| (0.5 * l).exp()).collect();
    let z = match noise {
        None => mu.clone(),
        Some(eps) => {
            if eps.len() != mu.len() {
                return Err(Error::Dimension { expected: mu.len(), got: eps.len() });
            }
            mu.iter().zip(&sigma).zip(eps).map(|((m, s), e)| m + s * e).collect()
        }
    };
    Ok(Encoded { mu, sigma, z })
}

/// `½ Σ (μ² + σ² − 1 − log σ²)` for one item.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu.iter().zip(log_var).map(|(m, l)| m * m + l.exp() - 1.0 - l).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.0, beta: 0.001, alpha: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("encoder.lambda", self.lambda), ("encoder.beta", self.beta), ("encoder.alpha", self.alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and ≥ 0"));
            }
        }
        Ok(())
    }
}

/// Items borrowed from row-major buffers: `embeddings` is `n × E`, `noise` is `n × d`.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub embeddings: &'a [f64],
    pub actions: &'a [usize],
    pub outcomes: &'a [f64],
    pub noise: &'a [f64],
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Empty("loss batch"));
        }
        for (expected, got) in [
            (n * arch.embed_dim, self.embeddings.len()),
            (n, self.outcomes.len()),
            (n * arch.latent_dim, self.noise.len()),
        ] {
            if expected != got {
                return Err(Error::Dimension { expected, got });
            }
        }
        if let Some(&a) = self.actions.iter().find(|&&a| a >= arch.action_count) {
            return Err(Error::Dimension { expected: arch.action_count, got: a + 1 });
        }
        Ok(())
    }
}

/// Batch means of the loss terms. `mi` is the mean log-probability the
/// discriminator assigns to the true action (negative cross-entropy).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub outcome: f64,
    pub kl: f64,
    pub mi: f64,
}

struct Scratch {
    h1: Vec<f64>,
    mu: Vec<f64>,
    lv: Vec<f64>,
    sigma: Vec<f64>,
    z: Vec<f64>,
    g1: Vec<f64>,
    ehat: Vec<f64>,
    o_in: Vec<f64>,
    q1: Vec<f64>,
    yhat: f64,
    r1: Vec<f64>,
    logits: Vec<f64>,
    // backward buffers
    d_e: Vec<f64>,
    d_h: Vec<f64>,
    d_h2: Vec<f64>,
    d_z: Vec<f64>,
    d_z2: Vec<f64>,
    d_oin: Vec<f64>,
    d_mu: Vec<f64>,
    d_lv: Vec<f64>,
    d_logits: Vec<f64>,
}

impl Scratch {
    fn new(a: &Architecture) -> Self {
        let (e, h, d, n_a) = (a.embed_dim, a.hidden, a.latent_dim, a.action_count);
        Scratch {
            h1: vec![0.0; h],
            mu: vec![0.0; d],
            lv: vec![0.0; d],
            sigma: vec![0.0; d],
            z: vec![0.0; d],
            g1: vec![0.0; h],
            ehat: vec![0.0; e],
            o_in: vec![0.0; d + n_a],
            q1: vec![0.0; h],
            yhat: 0.0,
            r1: vec![0.0; h],
            logits: vec![0.0; n_a],
            d_e: vec![0.0; e],
            d_h: vec![0.0; h],
            d_h2: vec![0.0; h],
            d_z: vec![0.0; d],
            d_z2: vec![0.0; d],
            d_oin: vec![0.0; d + n_a],
            d_mu: vec![0.0; d],
            d_lv: vec![0.0; d],
            d_logits: vec![0.0; n_a],
        }
    }
}

fn tanh_backward(d: &mut [f64], act: &[f64]) {
    d.iter_mut().zip(act).for_each(|(g, a)| *g *= 1.0 - a * a);
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[k] - lse
}

fn finite(v: f64, component: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { component })
    }
}

impl EncoderParams {
    fn forward_item(&self, e: &[f64], action: usize, noise: &[f64], s: &mut Scratch) {
        let l = &self.layers;
        l.enc1.forward(&self.values, e, &mut s.h1);
        s.h1.iter_mut().for_each(|v| *v = v.tanh());
        l.enc_mu.forward(&self.values, &s.h1, &mut s.mu);
        l.enc_lv.forward(&self.values, &s.h1, &mut s.lv);
        for j in 0..s.z.len() {
            s.sigma[j] = (0.5 * s.lv[j]).exp();
            s.z[j] = s.mu[j] + s.sigma[j] * noise[j];
        }
        l.dec1.forward(&self.values, &s.z, &mut s.g1);
        s.g1.iter_mut().for_each(|v| *v = v.tanh());
        l.dec2.forward(&self.values, &s.g1, &mut s.ehat);
        let z = std::mem::take(&mut s.z);
        self.outcome_head(&z, action, s);
        self.discriminator(&z, s);
        s.z = z;
    }

    fn item_parts(e: &[f64], action: usize, y: f64, s: &Scratch) -> LossParts {
        let recon = s.ehat.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        let outcome = (s.yhat - y) * (s.yhat - y);
        let kl = kl_divergence(&s.mu, &s.lv);
        let mi = log_softmax_at(&s.logits, action);
        LossParts { total: 0.0, recon, outcome, kl, mi }
    }

    /// Backward pass of `scale · (recon + λ·outcome + β·kl + α·mi)` for one item.
    #[allow(clippy::too_many_arguments)]
    fn backward_item(&self, e: &[f64], action: usize, y: f64, noise: &[f64], w: &LossWeights, scale: f64, s: &mut Scratch, g: &mut [f64]) {
        let l = &self.layers;
        let p = &self.values;
        s.d_z.iter_mut().for_each(|v| *v = 0.0);

        // reconstruction
        for (d, (eh, ei)) in s.d_e.iter_mut().zip(s.ehat.iter().zip(e)) {
            *d = 2.0 * scale * (eh - ei);
        }
        l.dec2.backward(p, g, &s.g1, &s.d_e, Some(&mut s.d_h));
        tanh_backward(&mut s.d_h, &s.g1);
        l.dec1.backward(p, g, &s.z, &s.d_h, Some(&mut s.d_z2));
        s.d_z.iter_mut().zip(&s.d_z2).for_each(|(a, b)| *a += b);

        // outcome head
        if w.lambda != 0.0 {
            let dy = [2.0 * scale * w.lambda * (s.yhat - y)];
            l.out2.backward(p, g, &s.q1, &dy, Some(&mut s.d_h));
            tanh_backward(&mut s.d_h, &s.q1);
            l.out1.backward(p, g, &s.o_in, &s.d_h, Some(&mut s.d_oin));
            s.d_z.iter_mut().zip(&s.d_oin).for_each(|(a, b)| *a += b);
        }

        // discriminator term: d/dlogits of log softmax[a] is onehot − p
        if w.alpha != 0.0 {
            let probs = softmax(&s.logits);
            for (k, d) in s.d_logits.iter_mut().enumerate() {
                let onehot = if k == action { 1.0 } else { 0.0 };
                *d = scale * w.alpha * (onehot - probs[k]);
            }
            l.disc2.backward(p, g, &s.r1, &s.d_logits, Some(&mut s.d_h));
            tanh_backward(&mut s.d_h, &s.r1);
            l.disc1.backward(p, g, &s.z, &s.d_h, Some(&mut s.d_z2));
            s.d_z.iter_mut().zip(&s.d_z2).for_each(|(a, b)| *a += b);
        }

        // reparameterisation and KL
        for j in 0..s.d_mu.len() {
            s.d_mu[j] = s.d_z[j] + scale * w.beta * s.mu[j];
            s.d_lv[j] = s.d_z[j] * noise[j] * 0.5 * s.sigma[j] + scale * w.beta * 0.5 * (s.sigma[j] * s.sigma[j] - 1.0);
        }
        l.enc_mu.backward(p, g, &s.h1, &s.d_mu, Some(&mut s.d_h));
        l.enc_lv.backward(p, g, &s.h1, &s.d_lv, Some(&mut s.d_h2));
        s.d_h.iter_mut().zip(&s.d_h2).for_each(|(a, b)| *a += b);
        tanh_backward(&mut s.d_h, &s.h1);
        l.enc1.backward(p, g, e, &s.d_h, None);
    }

    /// Discriminator cross-entropy gradient on detached latent samples.
    fn discriminator_backward(&self, action: usize, scale: f64, s: &mut Scratch, g: &mut [f64]) {
        let l = &self.layers;
        let probs = softmax(&s.logits);
        for (k, d) in s.d_logits.iter_mut().enumerate() {
            let onehot = if k == action { 1.0 } else { 0.0 };
            *d = scale * (probs[k] - onehot);
        }
        l.disc2.backward(&self.values, g, &s.r1, &s.d_logits, Some(&mut s.d_h));
        tanh_backward(&mut s.d_h, &s.r1);
        l.disc1.backward(&self.values, g, &s.z, &s.d_h, None);
    }
}

fn item<'a>(batch: &Batch<'a>, arch: &Architecture, i: usize) -> (&'a [f64], &'a [f64]) {
    let (e, d) = (arch.embed_dim, arch.latent_dim);
    (&batch.embeddings[i * e..(i + 1) * e], &batch.noise[i * d..(i + 1) * d])
}

fn finish(mut sum: LossParts, n: usize, w: &LossWeights) -> Result<LossParts> {
    let n = n as f64;
    sum.recon = finite(sum.recon / n, "recon")?;
    sum.outcome = finite(sum.outcome / n, "outcome")?;
    sum.kl = finite(sum.kl / n, "kl")?;
    sum.mi = finite(sum.mi / n, "mi")?;
    sum.total = finite(sum.recon + w.lambda * sum.outcome + w.beta * sum.kl + w.alpha * sum.mi, "total")?;
    Ok(sum)
}

fn accumulate(sum: &mut LossParts, p: LossParts) {
    sum.recon += p.recon;
    sum.outcome += p.outcome;
    sum.kl += p.kl;
    sum.mi += p.mi;
}

/// `total = recon + λ·outcome + β·kl + α·mi`, every term a batch mean.
pub fn loss(params: &EncoderParams, batch: &Batch, weights: &LossWeights) -> Result<LossParts> {
    batch.check(&params.arch)?;
    let mut s = Scratch::new(&params.arch);
    let mut sum = LossParts::default();
    for i in 0..batch.len() {
        let (e, noise) = item(batch, &params.arch, i);
        params.forward_item(e, batch.actions[i], noise, &mut s);
        accumulate(&mut sum, EncoderParams::item_parts(e, batch.actions[i], batch.outcomes[i], &s));
    }
    finish(sum, batch.len(), weights)
}

/// Loss and the analytic gradient of `total` with respect to every parameter,
/// discriminator included.
pub fn loss_and_grad(params: &EncoderParams, batch: &Batch, weights: &LossWeights) -> Result<(LossParts, Vec<f64>)> {
    let mut grad = vec![0.0; params.values.len()];
    let parts = loss_and_grad_into(params, batch, weights, &mut grad)?;
    Ok((parts, grad))
}

pub(crate) fn loss_and_grad_into(params: &EncoderParams, batch: &Batch, weights: &LossWeights, grad: &mut [f64]) -> Result<LossParts> {
    batch.check(&params.arch)?;
    let mut s = Scratch::new(&params.arch);
    let mut sum = LossParts::default();
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    for i in 0..batch.len() {
        let (e, noise) = item(batch, &params.arch, i);
        let (a, y) = (batch.actions[i], batch.outcomes[i]);
        params.forward_item(e, a, noise, &mut s);
        accumulate(&mut sum, EncoderParams::item_parts(e, a, y, &s));
        params.backward_item(e, a, y, noise, weights, scale, &mut s, grad);
    }
    finish(sum, batch.len(), weights)
}

/// Mean discriminator cross-entropy on detached samples and its gradient with
/// respect to the discriminator parameters (other entries stay zero).
pub(crate) fn discriminator_grad_into(params: &EncoderParams, batch: &Batch, grad: &mut [f64]) -> Result<f64> {
    batch.check(&params.arch)?;
    let mut s = Scratch::new(&params.arch);
    let scale = 1.0 / batch.len() as f64;
    let range = params.layers.discriminator();
    grad[range].iter_mut().for_each(|g| *g = 0.0);
    let mut ce = 0.0;
    for i in 0..batch.len() {
        let (e, noise) = item(batch, &params.arch, i);
        let a = batch.actions[i];
        let (mu, lv) = params.posterior(e)?;
        for j in 0..s.z.len() {
            s.z[j] = mu[j] + (0.5 * lv[j]).exp() * noise[j];
        }
        let z = std::mem::take(&mut s.z);
        params.discriminator(&z, &mut s);
        s.z = z;
        ce -= log_softmax_at(&s.logits, a);
        params.discriminator_backward(a, scale, &mut s, grad);
    }
    finite(ce * scale, "discriminator")
}

/// Largest `|g_a − g_fd| / max(1, |g_a|, |g_fd|)` over all parameters, with
/// central differences of step `step`.
pub fn grad_check(params: &EncoderParams, batch: &Batch, weights: &LossWeights, step: f64) -> Result<f64> {
    let (_, analytic) = loss_and_grad(params, batch, weights)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.values.len() {
        let base = params.values[i];
        probe.values[i] = base + step;
        let up = loss(&probe, batch, weights)?.total;
        probe.values[i] = base - step;
        let down = loss(&probe, batch, weights)?.total;
        probe.values[i] = base;
        let fd = (up - down) / (2.0 * step);
        let g = analytic[i];
        worst = worst.max((g - fd).abs() / 1f64.max(g.abs()).max(fd.abs()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> Architecture {
        Architecture { embed_dim: 12, hidden: 6, latent_dim: 3, action_count: 4 }
    }

    struct Owned {
        e: Vec<f64>,
        a: Vec<usize>,
        y: Vec<f64>,
        eps: Vec<f64>,
    }

    impl Owned {
        fn random(arch: &Architecture, n: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
            let e = (0..n * arch.embed_dim).map(|_| normal()).collect();
            let y = (0..n).map(|_| normal()).collect();
            let eps = (0..n * arch.latent_dim).map(|_| normal()).collect();
            let a = (0..n).map(|i| i % arch.action_count).collect();
            Owned { e, a, y, eps }
        }

        fn batch(&self) -> Batch<'_> {
            Batch { embeddings: &self.e, actions: &self.a, outcomes: &self.y, noise: &self.eps }
        }
    }

    fn perturbed(arch: Architecture, seed: u64) -> EncoderParams {
        let mut p = EncoderParams::init(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        p.values.iter_mut().for_each(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += 0.15 * n;
        });
        p
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_divergence(&[0.0; 5], &[0.0; 5]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reparameterisation() {
        let p = EncoderParams::init(small(), 3).unwrap();
        let e = vec![0.1; 12];
        let inf = encode(&p, &e, None).unwrap();
        assert_eq!(inf.z, inf.mu);
        let zero = encode(&p, &e, Some(&[0.0; 3])).unwrap();
        assert_eq!(zero.z, zero.mu);
        let eps = [0.3, -1.0, 2.0];
        let a = encode(&p, &e, Some(&eps)).unwrap();
        let b = encode(&p, &e, Some(&eps)).unwrap();
        assert_eq!(a, b);
        assert!(encode(&p, &e, Some(&[0.0; 2])).is_err());
        assert!(encode(&p, &e[..11], None).is_err());
    }

    #[test]
    fn unit_sigma_zero_mean_gives_noise() {
        let mut p = EncoderParams::init(small(), 3).unwrap();
        let (mu, lv) = (p.layers.enc_mu, p.layers.enc_lv);
        for r in [mu.weights(), mu.bias(), lv.weights(), lv.bias()] {
            p.values[r].iter_mut().for_each(|v| *v = 0.0);
        }
        let eps = [0.3, -1.0, 2.0];
        let out = encode(&p, &[0.5; 12], Some(&eps)).unwrap();
        assert_eq!(out.sigma, vec![1.0; 3]);
        assert_eq!(out.z, eps.to_vec());
    }

    #[test]
    fn zero_weights_reduce_to_reconstruction() {
        let arch = small();
        let p = perturbed(arch, 1);
        let data = Owned::random(&arch, 5, 2);
        let full = loss(&p, &data.batch(), &LossWeights { lambda: 0.0, beta: 0.0, alpha: 0.0 }).unwrap();
        assert_eq!(full.total, full.recon);
        assert!(full.kl >= 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = small();
        for seed in 0..3 {
            let p = perturbed(arch, seed);
            let data = Owned::random(&arch, 8, 10 + seed);
            let err = grad_check(&p, &data.batch(), &LossWeights { lambda: 1.3, beta: 0.7, alpha: 0.9 }, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn kl_gradient_is_closed_form() {
        // with every weight zero, μ = 0 and log σ² = 0 at every item, so only
        // the bias gradients of the posterior heads see the KL term
        let arch = small();
        let mut p = EncoderParams::init(arch, 0).unwrap();
        p.values.iter_mut().for_each(|v| *v = 0.0);
        let mu_bias = p.layers.enc_mu.bias();
        let lv_bias = p.layers.enc_lv.bias();
        p.values[mu_bias.clone()].copy_from_slice(&[0.5, -1.0, 2.0]);
        p.values[lv_bias.clone()].copy_from_slice(&[0.2, -0.4, 1.0]);
        let data = Owned { e: vec![0.0; 12], a: vec![1], y: vec![0.0], eps: vec![0.0; 3] };
        let w = LossWeights { lambda: 0.0, beta: 1.0, alpha: 0.0 };
        let (_, g) = loss_and_grad(&p, &data.batch(), &w).unwrap();
        for j in 0..3 {
            let mu = p.values[mu_bias.start + j];
            let lv: f64 = p.values[lv_bias.start + j];
            let sigma = (0.5 * lv).exp();
            assert!((g[mu_bias.start + j] - mu).abs() < 1e-12);
            // d/dlogσ² = (σ − 1/σ) · dσ/dlogσ² = (σ − 1/σ) · σ/2
            assert!((g[lv_bias.start + j] - (sigma - 1.0 / sigma) * sigma / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_weights_zero_their_gradients() {
        let arch = small();
        let p = perturbed(arch, 4);
        let data = Owned::random(&arch, 4, 5);
        let (_, g) = loss_and_grad(&p, &data.batch(), &LossWeights { lambda: 0.0, beta: 0.0, alpha: 0.0 }).unwrap();
        let l = p.layers;
        for r in [l.out1.offset..l.out2.end(), l.discriminator()] {
            assert!(g[r].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let arch = small();
        let p = perturbed(arch, 7);
        let data = Owned::random(&arch, 6, 8);
        let mut g = vec![0.0; p.values.len()];
        discriminator_grad_into(&p, &data.batch(), &mut g).unwrap();
        let mut probe = p.clone();
        for i in p.layers.discriminator() {
            let base = p.values[i];
            probe.values[i] = base + 1e-5;
            let up = discriminator_grad_into(&probe, &data.batch(), &mut vec![0.0; g.len()]).unwrap();
            probe.values[i] = base - 1e-5;
            let down = discriminator_grad_into(&probe, &data.batch(), &mut vec![0.0; g.len()]).unwrap();
            probe.values[i] = base;
            assert!((g[i] - (up - down) / 2e-5).abs() < 1e-6);
        }
    }
}
