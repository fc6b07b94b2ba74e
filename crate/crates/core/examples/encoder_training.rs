// Trains the variational encoder on featurised synthetic histories, checks
// its gradients against finite differences and reports how much of the true
// state a linear probe recovers from the latents.

use latent_match::encoder::{discriminator_accuracy, embed_rows, grad_check, train, Architecture, Batch, LossWeights, TrainConfig, TrainData};
use latent_match::features::{FeatureConfig, Featurizer};
use latent_match::estimator::ridge;
use latent_match::synthgen::{generate, DgpConfig};

fn main() -> latent_match::Result<()> {
    let (data, oracle) = generate(&DgpConfig { n_units: 600, ..DgpConfig::default() })?;
    let (_, rows) = Featurizer::fit_featurize(&data, FeatureConfig::default(), |_| true, true)?;
    let actions: Vec<usize> = rows.meta.iter().map(|m| m.action).collect();
    let outcomes: Vec<f64> = rows.meta.iter().map(|m| m.outcome).collect();
    let arch = Architecture { embed_dim: rows.embed_dim, hidden: 32, latent_dim: 8, action_count: data.action_count() };
    let weights = LossWeights::default();
    let input = TrainData { embeddings: &rows.embeddings, dim: rows.embed_dim, actions: &actions, outcomes: &outcomes };
    let (params, trace) = train(&input, arch, &TrainConfig { epochs: 15, ..TrainConfig::default() }, &weights)?;
    for e in trace.iter().step_by(3) {
        println!("epoch {:>2} total {:.4} recon {:.4} outcome {:.4} kl {:.4} mi {:.4}", e.epoch, e.total, e.recon, e.outcome, e.kl, e.mi);
    }

    let n = 16;
    let noise = vec![0.3; n * arch.latent_dim];
    let batch = Batch { embeddings: &rows.embeddings[..n * rows.embed_dim], actions: &actions[..n], outcomes: &outcomes[..n], noise: &noise };
    println!("gradient check max relative error {:.2e}", grad_check(&params, &batch, &weights, 1e-5)?);
    println!("discriminator accuracy {:.3}", discriminator_accuracy(&params, &rows.embeddings, &actions)?);

    let z = embed_rows(&params, &rows.embeddings)?;
    for j in 0..oracle.rows()[0].z_star.len() {
        let y: Vec<f64> = rows.meta.iter().map(|m| oracle.row(m.unit, m.time).map(|r| r.z_star[j])).collect::<latent_match::Result<_>>()?;
        let fit = ridge(&z, arch.latent_dim, &y, 1e-6)?;
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let sse: f64 = y.iter().enumerate().map(|(i, v)| (fit.predict(&z[i * arch.latent_dim..(i + 1) * arch.latent_dim]) - v).powi(2)).sum();
        let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        println!("in-sample probe R2 for state dim {j}: {:.3}", 1.0 - sse / sst);
    }
    Ok(())
}
