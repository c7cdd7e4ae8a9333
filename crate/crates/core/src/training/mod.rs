//! Objectives, the optimization loop, and checkpointing.

mod checkpoint;
mod losses;
mod model;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_FORMAT_VERSION};
pub use losses::{kl_categorical, kl_categorical_on_tape, reconstruction_nll, reconstruction_nll_on_tape};
pub use model::{CnriModel, EncoderKind, LatentSource, ModelDims};
pub use trainer::{
    batch_loss, batch_loss_grads, sample_loss, sample_loss_at, sample_loss_grads, train,
    train_fold, write_history_csv, EpochStats, FoldOutcome, LossBreakdown,
};

use serde::{Deserialize, Serialize};

use crate::encoders::Regime;
use crate::error::{Error, Result};

/// Hyperparameters of one training run. Defaults are the small-data preset
/// (encoder 64, decoder 128 hidden units); [`TrainingConfig::large_preset`]
/// switches to the full sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub dropout: f64,
    /// Concrete-relaxation temperature used during training.
    pub temperature: f64,
    /// Emission variance of the Gaussian output model.
    pub sigma_sq: f64,
    /// Number of edge types K (type 0 is the designated non-edge). For the
    /// factorised encoder this is the number of gate heads.
    pub edge_types: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    /// Prior over edge types for the variational objectives, channel order
    /// `[non-edge, edge, ...]`. The factorised regime derives each head's
    /// ON prior from the non-edge mass.
    pub edge_prior: Vec<f64>,
    /// Validate (and consider checkpointing) every this many epochs.
    pub val_every: usize,
    pub seed: u64,
    /// Feed Gaussian samples instead of means during training rollouts.
    pub stochastic_feed: bool,
    /// Zero the condition vector at the decoder (unconditional ablation).
    pub zero_condition: bool,
    pub use_virtual_edge: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            regime: Regime::Nri,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 50,
            dropout: 0.1,
            temperature: 0.5,
            sigma_sq: 5e-5,
            edge_types: 2,
            encoder_hidden: 64,
            decoder_hidden: 128,
            edge_prior: vec![0.91, 0.09],
            val_every: 1,
            seed: 0,
            stochastic_feed: false,
            zero_condition: false,
            use_virtual_edge: true,
        }
    }
}

impl TrainingConfig {
    /// Full-size hidden layers (encoder 128, decoder 256).
    pub fn large_preset(mut self) -> Self {
        self.encoder_hidden = 128;
        self.decoder_hidden = 256;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config("epochs, batch size and val_every must be positive".into()));
        }
        if self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.lr_decay) || self.lr_decay_every == 0 {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.sigma_sq <= 0.0 {
            return Err(Error::Config("sigma_sq must be positive".into()));
        }
        if self.edge_types < 2 {
            return Err(Error::Config("need at least 2 edge types".into()));
        }
        if self.encoder_hidden == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if self.edge_prior.len() != self.edge_types {
            return Err(Error::Config(format!(
                "edge prior has {} entries for {} edge types",
                self.edge_prior.len(),
                self.edge_types
            )));
        }
        if self.edge_prior.iter().any(|&p| p <= 0.0)
            || (self.edge_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config("edge prior must be positive and sum to 1".into()));
        }
        Ok(())
    }

    /// Per-head `[on, off]` prior for the factorised regime: the ON mass is
    /// the complement of the non-edge prior.
    pub fn fnri_head_prior(&self) -> [f64; 2] {
        let on = 1.0 - self.edge_prior[0];
        [on, 1.0 - on]
    }
}

/// Stable per-purpose seed derivation (splitmix64 step).
pub(crate) fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
