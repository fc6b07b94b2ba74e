//! Variational bottleneck from history embeddings to low-dimensional latent states.
//!
//! The network has four parts sharing one parameter vector: a posterior
//! `E → h → (μ, log σ²)`, a decoder `d → h → E`, an outcome head
//! `(d + A) → h → 1` and an action discriminator `d → h → A`. Hidden layers use
//! `tanh`. Training minimises
//! `recon + λ·outcome + β·KL + α·mi`, where `mi` is the discriminator's
//! log-likelihood of the true action, so the encoder is pushed to hide the
//! action while the discriminator, updated separately, tries to recover it.

mod network;
mod stub;
mod train;

pub use network::{
    encode, grad_check, kl_divergence, loss, loss_and_grad, Architecture, Batch, Encoded, EncoderParams, Layer, Layers, LossParts,
    LossWeights,
};
pub use stub::{hashed_term_frequencies, stub_embed, tokens, StubEmbedding};
pub use train::{
    discriminator_accuracy, embed_rows, load_checkpoint, save_checkpoint, train, write_loss_trace, EpochLoss, TrainConfig, TrainData,
    DIVERGENCE_LIMIT,
};

use crate::domain::{Dataset, Role, SplitAssignment};
use crate::error::Result;
use crate::features::Featurizer;
use crate::latent::LatentTable;

/// Inference-mode latent table (`z = μ`) with one row per outcome record of
/// units in `role`. Query rows carry a `NaN` outcome unless `with_outcomes`.
pub fn embed_dataset(
    params: &EncoderParams,
    featurizer: &Featurizer,
    dataset: &Dataset,
    split: &SplitAssignment,
    role: Role,
    with_outcomes: bool,
) -> Result<LatentTable> {
    let rows = featurizer.featurize(dataset, |u| split.role(u) == role, with_outcomes)?;
    let z = embed_rows(params, &rows.embeddings)?;
    LatentTable::from_rows(params.arch.latent_dim, z, rows.meta)
}
