//! Model assembly: the regime-specific latent source plus the shared
//! conditional decoder, with one parameter store behind both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Adjacency, Trajectory};
use crate::decoder::{Decoder, DecoderConfig};
use crate::edges::EdgeLayout;
use crate::encoders::{
    perfect_graph, posterior_probs, sample_hard, FnriEncoder, ImperfectGraph, InteractionLatent,
    LatentMode, LatentStyle, NriEncoder, Regime,
};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;
use crate::training::{derive_seed, TrainingConfig};

const MODEL_INIT_TAG: u64 = 0x4d4f44; // "MOD"

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub frames: usize,
    pub bodies: usize,
    pub features: usize,
    pub condition_dim: usize,
}

#[derive(Clone, Debug)]
pub enum EncoderKind {
    /// Perfect graph: no encoder, the latent is fixed.
    Fixed,
    /// Imperfect graph: the latent is a learnable deterministic parameter.
    Imperfect(ImperfectGraph),
    Nri(NriEncoder),
    Fnri(FnriEncoder),
}

/// Where generation-time latents come from.
pub enum LatentSource<'a> {
    /// The model's own latent (PG fixed graph, IG learned argmax).
    Own,
    /// Aggregate-posterior probabilities; `sample` draws per edge instead of
    /// taking the argmax.
    Posterior { probs: &'a Tensor, sample: bool },
}

#[derive(Clone, Debug)]
pub struct CnriModel {
    pub config: TrainingConfig,
    pub dims: ModelDims,
    pub encoder: EncoderKind,
    pub decoder: Decoder,
    pub params: Params,
    pub fixed_latent: Option<InteractionLatent>,
    /// Ground-truth graph the PG/IG regimes were built from.
    pub adjacency: Option<Adjacency>,
}

impl CnriModel {
    /// Builds and initializes a model. PG and IG regimes require the
    /// interaction graph.
    pub fn new(
        config: TrainingConfig,
        dims: ModelDims,
        adjacency: Option<&Adjacency>,
    ) -> Result<Self> {
        config.validate()?;
        let decoder = Decoder::new(DecoderConfig {
            bodies: dims.bodies,
            features: dims.features,
            condition_dim: dims.condition_dim,
            hidden: config.decoder_hidden,
            mlp_hidden: config.decoder_hidden,
            edge_types: config.edge_types,
            sigma_sq: config.sigma_sq,
            use_virtual_edge: config.use_virtual_edge,
            zero_condition: config.zero_condition,
            stochastic_feed: config.stochastic_feed,
        });
        decoder.config.validate()?;

        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, MODEL_INIT_TAG, 0));
        let mut fixed_latent = None;

        let encoder = match config.regime {
            Regime::Pg => {
                let adj = adjacency.ok_or_else(|| {
                    Error::Config("perfect-graph regime needs the interaction graph".into())
                })?;
                if config.edge_types != 2 {
                    return Err(Error::Config(
                        "perfect-graph regime uses 2 edge types (non-edge, edge)".into(),
                    ));
                }
                fixed_latent = Some(perfect_graph(adj)?);
                EncoderKind::Fixed
            }
            Regime::Ig => {
                let adj = adjacency.ok_or_else(|| {
                    Error::Config("imperfect-graph regime needs an initial graph".into())
                })?;
                if config.edge_types != 2 {
                    return Err(Error::Config(
                        "imperfect-graph regime uses 2 edge types (non-edge, edge)".into(),
                    ));
                }
                let ig = ImperfectGraph::new(dims.bodies, config.edge_types);
                ig.init(&mut params, adj);
                EncoderKind::Imperfect(ig)
            }
            Regime::Nri => {
                let enc = NriEncoder::new(
                    dims.bodies,
                    dims.frames,
                    dims.features,
                    config.encoder_hidden,
                    config.edge_types,
                );
                enc.init(&mut params, &mut rng);
                EncoderKind::Nri(enc)
            }
            Regime::Fnri => {
                let enc = FnriEncoder::new(
                    dims.bodies,
                    dims.frames,
                    dims.features,
                    config.encoder_hidden,
                    config.edge_types,
                );
                enc.init(&mut params, &mut rng);
                EncoderKind::Fnri(enc)
            }
        };
        decoder.init(&mut params, &mut rng);

        Ok(CnriModel {
            config,
            dims,
            encoder,
            decoder,
            params,
            fixed_latent,
            adjacency: adjacency.cloned(),
        })
    }

    pub fn regime(&self) -> Regime {
        self.config.regime
    }

    pub fn latent_style(&self) -> LatentStyle {
        match self.config.regime {
            Regime::Fnri => LatentStyle::Factorised,
            _ => LatentStyle::Categorical,
        }
    }

    pub fn edge_layout(&self) -> EdgeLayout {
        EdgeLayout::new(self.dims.bodies)
    }

    /// Encoder logits for one trajectory (variational regimes only).
    pub fn encode_logits(&self, traj: &Trajectory) -> Result<Tensor> {
        match &self.encoder {
            EncoderKind::Nri(enc) => enc.encode(&self.params, traj),
            EncoderKind::Fnri(enc) => enc.encode(&self.params, traj),
            _ => Err(Error::InvalidArgument(format!(
                "regime {} has no trajectory encoder",
                self.config.regime
            ))),
        }
    }

    /// Per-edge posterior probabilities for one trajectory.
    pub fn posterior(&self, traj: &Trajectory) -> Result<Tensor> {
        let logits = self.encode_logits(traj)?;
        posterior_probs(&logits, self.latent_style())
    }

    /// Average of per-sample posteriors over a split; the generation-time
    /// latent source for the variational regimes.
    pub fn aggregate_posterior_probs(&self, samples: &[&crate::data::SystemSample]) -> Result<Tensor> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument(
                "aggregate posterior over an empty split".into(),
            ));
        }
        let mut acc: Option<Tensor> = None;
        for s in samples {
            let p = self.posterior(&s.trajectory)?;
            acc = Some(match acc {
                None => p,
                Some(a) => a.add(&p)?,
            });
        }
        Ok(acc.unwrap().scale(1.0 / samples.len() as f64))
    }

    /// Hard latent from probability rows: argmax per edge (categorical) or
    /// per-head thresholding (factorised). With `noise`, argmax of perturbed
    /// probabilities implements categorical sampling.
    pub fn hard_latent_from_probs(
        &self,
        probs: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> InteractionLatent {
        let style = self.latent_style();
        let layout = self.edge_layout();
        // Work in log space so Gumbel-max sampling is exact for probability
        // inputs.
        let log_probs = probs.map(|p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY });
        let weights = match rng {
            Some(rng) => {
                let g = crate::encoders::gumbel_noise(log_probs.shape().to_vec(), rng);
                sample_hard(&log_probs, Some(&g), style)
            }
            None => sample_hard(&log_probs, None, style),
        };
        InteractionLatent::from_edge_weights(&layout, &weights, LatentMode::Hard, style)
    }

    /// Generation-time latent under the regime's contract.
    pub fn latent_for_generation(
        &self,
        source: &LatentSource,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<InteractionLatent> {
        match (self.config.regime, source) {
            (Regime::Pg, LatentSource::Own) => Ok(self.fixed_latent.clone().expect("pg latent")),
            (Regime::Ig, LatentSource::Own) => match &self.encoder {
                EncoderKind::Imperfect(ig) => Ok(ig.latent_hard(&self.params)),
                _ => unreachable!("ig regime carries an imperfect-graph encoder"),
            },
            (Regime::Nri | Regime::Fnri, LatentSource::Posterior { probs, sample }) => {
                let probs = self.posterior_gate_probs(probs)?;
                Ok(self.hard_latent_from_probs(&probs, if *sample { rng } else { None }))
            }
            (regime, LatentSource::Own) => Err(Error::InvalidArgument(format!(
                "regime {regime} generates from the aggregate posterior, which was not provided"
            ))),
            (regime, LatentSource::Posterior { .. }) => Err(Error::InvalidArgument(format!(
                "regime {regime} does not consume an aggregate posterior"
            ))),
        }
    }

    /// Posterior probabilities in `[E, K]` channel layout for the categorical
    /// style; the factorised `[E, 2K]` head layout passes through unchanged.
    fn posterior_gate_probs(&self, probs: &Tensor) -> Result<Tensor> {
        let layout = self.edge_layout();
        let expected_cols = match self.latent_style() {
            LatentStyle::Categorical => self.config.edge_types,
            LatentStyle::Factorised => 2 * self.config.edge_types,
        };
        if probs.shape() != [layout.edge_count(), expected_cols] {
            return Err(Error::DimensionMismatch {
                op: "aggregate posterior",
                lhs: probs.shape().to_vec(),
                rhs: vec![layout.edge_count(), expected_cols],
            });
        }
        Ok(probs.clone())
    }

    /// Closed-loop generation from `(c, x1, Z)`; consumes no trajectory
    /// beyond the seed frame.
    pub fn generate(
        &self,
        condition: &[f64],
        x1: &Tensor,
        latent: &InteractionLatent,
        frames: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Trajectory, Trajectory)> {
        self.decoder
            .rollout(&self.params, x1, condition, latent, frames, rng)
    }
}
