//! Multinomial logistic propensity model on standardised features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::latent::{dot, LatentTable};
use crate::synthgen::softmax;

pub const DEFAULT_CLIP: f64 = 0.01;

/// Anything that assigns a treatment probability to a (vector, action) pair.
/// Returned values are unclipped; the estimator clips.
pub trait PropensityScore: Sync {
    fn score(&self, z: &[f64], action: usize) -> f64;
}

/// The same probability for every row and action.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPropensity(pub f64);

impl PropensityScore for ConstantPropensity {
    fn score(&self, _: &[f64], _: usize) -> f64 {
        self.0
    }
}

/// Wraps a closure, e.g. the generator's true propensity.
pub struct FnPropensity<F>(pub F);

impl<F: Fn(&[f64], usize) -> f64 + Sync> PropensityScore for FnPropensity<F> {
    fn score(&self, z: &[f64], action: usize) -> f64 {
        (self.0)(z, action)
    }
}

pub fn clip(p: f64, delta: f64) -> f64 {
    p.clamp(delta, 1.0 - delta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropensityModel {
    pub action_count: usize,
    pub dim: usize,
    /// Row-major `A × (dim + 1)`, last column the bias.
    pub weights: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub clip: f64,
    pub iterations: usize,
    /// Cross-entropy after every iteration, starting with the initial value.
    pub loss_trace: Vec<f64>,
}

impl PropensityModel {
    /// All-zero weights: every class gets `1/A`.
    pub fn uniform(dim: usize, action_count: usize, clip: f64) -> Self {
        PropensityModel {
            action_count,
            dim,
            weights: vec![0.0; action_count * (dim + 1)],
            feature_mean: vec![0.0; dim],
            feature_scale: vec![1.0; dim],
            clip,
            iterations: 0,
            loss_trace: Vec::new(),
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }

    fn standardize(&self, z: &[f64], x: &mut [f64]) {
        for j in 0..self.dim {
            x[j] = (z[j] - self.feature_mean[j]) / self.feature_scale[j];
        }
    }

    /// Logits of an already standardised row.
    fn logits_std(&self, x: &[f64], out: &mut [f64]) {
        let width = self.dim + 1;
        for (a, o) in out.iter_mut().enumerate() {
            let w = &self.weights[a * width..(a + 1) * width];
            *o = w[self.dim] + dot(&w[..self.dim], x);
        }
    }

    fn logits(&self, z: &[f64], out: &mut [f64]) {
        let mut x = vec![0.0; self.dim];
        self.standardize(z, &mut x);
        self.logits_std(&x, out);
    }

    /// Class probabilities before clipping; they sum to one.
    pub fn predict(&self, z: &[f64]) -> Vec<f64> {
        let mut l = vec![0.0; self.action_count];
        self.logits(z, &mut l);
        softmax(&l)
    }

    pub fn predict_clipped(&self, z: &[f64], action: usize) -> f64 {
        clip(self.predict(z)[action], self.clip)
    }

    pub fn accuracy(&self, rows: &LatentTable) -> f64 {
        let hits = rows
            .iter()
            .filter(|(z, m)| {
                let p = self.predict(z);
                (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b }) == m.action
            })
            .count();
        hits as f64 / rows.len().max(1) as f64
    }
}

impl PropensityScore for PropensityModel {
    fn score(&self, z: &[f64], action: usize) -> f64 {
        self.predict(z)[action]
    }
}

/// Mean cross-entropy over standardised rows `xs` (row-major `n × dim`).
fn loss_and_grad(model: &PropensityModel, xs: &[f64], actions: &[usize], grad: Option<&mut [f64]>) -> f64 {
    let (dim, a_n) = (model.dim, model.action_count);
    let width = dim + 1;
    let n = actions.len();
    let ids: Vec<usize> = (0..n).collect();
    let parts: Vec<(f64, Vec<f64>)> = ids
        .par_chunks(512)
        .map(|block| {
            let mut g = if grad.is_some() { vec![0.0; a_n * width] } else { Vec::new() };
            let mut l = vec![0.0; a_n];
            let mut ce = 0.0;
            for &i in block {
                let x = &xs[i * dim..(i + 1) * dim];
                model.logits_std(x, &mut l);
                let p = softmax(&l);
                let a = actions[i];
                ce -= p[a].max(1e-300).ln();
                if !g.is_empty() {
                    for k in 0..a_n {
                        let d = p[k] - if k == a { 1.0 } else { 0.0 };
                        let gk = &mut g[k * width..(k + 1) * width];
                        gk[..dim].iter_mut().zip(x).for_each(|(g, x)| *g += d * x);
                        gk[dim] += d;
                    }
                }
            }
            (ce, g)
        })
        .collect();
    let nf = n as f64;
    if let Some(grad) = grad {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (_, g) in &parts {
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b / nf);
        }
    }
    parts.iter().map(|(c, _)| c).sum::<f64>() / nf
}

/// Full-batch gradient descent on mean cross-entropy. A step that would raise
/// the loss is retried at half the rate, so the recorded loss never increases.
pub fn fit_propensity(train: &LatentTable, action_count: usize, clip: f64, iterations: usize, rate: f64, seed: u64) -> Result<PropensityModel> {
    if !(clip > 0.0 && clip < 0.5) {
        return Err(Error::config("estimator.clip", "must lie in (0, 0.5)"));
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::config("estimator.propensity_rate", "must be finite and > 0"));
    }
    if train.is_empty() {
        return Err(Error::Empty("propensity training rows"));
    }
    let mut counts = vec![0usize; action_count];
    for m in train.metas() {
        if m.action >= action_count {
            return Err(Error::Dimension { expected: action_count, got: m.action + 1 });
        }
        counts[m.action] += 1;
    }
    if let Some(a) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Positivity { action: a, context: "propensity training split".into() });
    }

    let dim = train.dim();
    let mut model = PropensityModel::uniform(dim, action_count, clip);
    let n = train.len() as f64;
    for (z, _) in train.iter() {
        model.feature_mean.iter_mut().zip(z).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; dim];
    for (z, _) in train.iter() {
        var.iter_mut().zip(z.iter().zip(&model.feature_mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    model.feature_scale = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.01..0.01));

    let mut xs = vec![0.0; train.len() * dim];
    for (i, x) in xs.chunks_exact_mut(dim.max(1)).enumerate().take(train.len()) {
        model.standardize(train.row(i), x);
    }
    let actions: Vec<usize> = train.metas().iter().map(|m| m.action).collect();
    let mut grad = vec![0.0; model.weights.len()];
    let mut loss = loss_and_grad(&model, &xs, &actions, Some(&mut grad));
    if !loss.is_finite() {
        return Err(Error::NonFinite { component: "propensity loss" });
    }
    model.loss_trace.push(loss);
    let mut step = rate;
    let mut trial = model.clone();
    for _ in 0..iterations {
        let mut accepted = false;
        for _ in 0..40 {
            trial.weights.iter_mut().zip(model.weights.iter().zip(&grad)).for_each(|(t, (w, g))| *t = w - step * g);
            let l = loss_and_grad(&trial, &xs, &actions, None);
            if l.is_finite() && l <= loss {
                std::mem::swap(&mut model.weights, &mut trial.weights);
                loss = loss_and_grad(&model, &xs, &actions, Some(&mut grad));
                accepted = true;
                step *= 1.1;
                break;
            }
            step *= 0.5;
        }
        model.iterations += 1;
        model.loss_trace.push(loss);
        if !accepted {
            break;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::UnitId;
    use crate::latent::RowMeta;

    fn table(points: &[(f64, f64, usize)]) -> LatentTable {
        let values = points.iter().flat_map(|p| [p.0, p.1]).collect();
        let meta = points.iter().enumerate().map(|(i, p)| RowMeta { unit: UnitId(i as u32), time: 0, action: p.2, outcome: 0.0 }).collect();
        LatentTable::from_rows(2, values, meta).unwrap()
    }

    #[test]
    fn zero_weights_are_uniform() {
        let m = PropensityModel::uniform(3, 7, 0.01);
        for p in m.predict(&[0.3, -2.0, 1.0]) {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn separable_two_actions_are_learned() {
        let pts: Vec<(f64, f64, usize)> = (0..40).map(|i| {
            let x = i as f64 / 10.0 - 2.0;
            (x + if i < 20 { -0.5 } else { 0.5 }, (i % 5) as f64, usize::from(i >= 20))
        }).collect();
        let t = table(&pts);
        let m = fit_propensity(&t, 2, 0.01, 500, 1.0, 0).unwrap();
        assert_eq!(m.accuracy(&t), 1.0);
        assert!(m.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        for (z, _) in t.iter() {
            for a in 0..2 {
                let p = m.predict_clipped(z, a);
                assert!((0.01..=0.99).contains(&p));
            }
            assert!((m.predict(z).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_action_is_a_positivity_error() {
        let t = table(&[(0.0, 0.0, 0), (1.0, 1.0, 0), (2.0, 0.0, 2)]);
        assert!(matches!(fit_propensity(&t, 3, 0.01, 10, 1.0, 0), Err(Error::Positivity { action: 1, .. })));
    }

    #[test]
    fn fit_is_deterministic() {
        let pts: Vec<(f64, f64, usize)> = (0..60).map(|i| ((i as f64).sin(), (i as f64 * 0.7).cos(), i % 3)).collect();
        let t = table(&pts);
        assert_eq!(fit_propensity(&t, 3, 0.01, 50, 1.0, 5).unwrap(), fit_propensity(&t, 3, 0.01, 50, 1.0, 5).unwrap());
    }
}
