//! Conditional autoregressive graph decoder.
//!
//! The condition vector enters twice: it determines the initial node hidden
//! states, and it feeds a virtual edge whose message joins every node's
//! aggregation at every step, making the condition a global attribute of the
//! graph. One message function exists per edge type except the designated
//! non-edge (type 0), and the latent weights mask the per-type messages:
//!
//! ```text
//! msg(i,j)  = sum_k z[i,j,k] f_e^k([h_i, h_j])      (k >= 1)
//! hbar_j    = h_msgs + sum_{i != j} msg(i,j)
//! h'_j      = GRU([hbar_j, x_j], h_j)
//! mu_j      = x_j + f_out(h'_j)
//! ```
//!
//! Rollouts feed their own emissions from the second frame on; ground-truth
//! frames beyond the first are never read, in training or generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::edges::EdgeLayout;
use crate::encoders::InteractionLatent;
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, GruCell, Linear, Mlp, Params, TapeParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub bodies: usize,
    pub features: usize,
    pub condition_dim: usize,
    /// Node hidden width H (also the GRU hidden size).
    pub hidden: usize,
    /// Hidden width inside the MLP blocks.
    pub mlp_hidden: usize,
    pub edge_types: usize,
    /// Fixed emission variance of the Gaussian output model.
    pub sigma_sq: f64,
    /// Ablation: drop the condition-derived virtual edge message.
    pub use_virtual_edge: bool,
    /// Ablation: zero the condition vector at decoder entry (the
    /// unconditional variant shares this code path).
    pub zero_condition: bool,
    /// Feed Gaussian samples instead of means during training rollouts.
    pub stochastic_feed: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_sq <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "emission variance {} must be positive",
                self.sigma_sq
            )));
        }
        if self.edge_types < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 edge types (non-edge plus one)".into(),
            ));
        }
        if self.bodies < 2 || self.hidden == 0 || self.features == 0 || self.condition_dim == 0 {
            return Err(Error::InvalidArgument("degenerate decoder dimensions".into()));
        }
        Ok(())
    }
}

/// Latent weights for one rollout: either a tape node (relaxed training
/// samples that must carry gradients) or plain data (hard/eval latents).
pub enum ZInput<'a> {
    Node(NodeId),
    Data(&'a Tensor),
}

/// Tape node ids of one rollout's emitted means, frames `2..=T` in order.
pub struct RolloutNodes {
    pub mean_ids: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    init_hidden: Mlp,
    virtual_edge: Mlp,
    edge_mlps: Vec<Mlp>,
    gru: GruCell,
    out_mlp: Mlp,
    out_head: Linear,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Self {
        let h = config.hidden;
        let mh = config.mlp_hidden;
        let edge_mlps = (1..config.edge_types)
            .map(|k| Mlp::new(&format!("dec.edge.{k}"), 2 * h, mh, h, false))
            .collect();
        Decoder {
            init_hidden: Mlp::new("dec.hid", config.condition_dim, mh, config.bodies * h, false),
            virtual_edge: Mlp::new("dec.msgs", config.condition_dim, mh, h, false),
            edge_mlps,
            gru: GruCell::new("dec.gru", h + config.features, h),
            out_mlp: Mlp::new("dec.out.mlp", h, mh, mh, false),
            out_head: Linear::new("dec.out.head", mh, config.features),
            config,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.init_hidden.init(params, rng);
        self.virtual_edge.init(params, rng);
        for mlp in &self.edge_mlps {
            mlp.init(params, rng);
        }
        self.gru.init(params, rng);
        self.out_mlp.init(params, rng);
        self.out_head.init(params, rng);
        // Zero emission head: rollouts start at the frozen-trajectory
        // baseline instead of compounding random offsets over T steps.
        for v in params.get_mut(&self.out_head.w).data_mut() {
            *v = 0.0;
        }
    }

    fn condition_const(&self, tape: &mut Tape, c: &[f64]) -> Result<NodeId> {
        if c.len() != self.config.condition_dim {
            return Err(Error::DimensionMismatch {
                op: "decoder condition",
                lhs: vec![c.len()],
                rhs: vec![self.config.condition_dim],
            });
        }
        let data = if self.config.zero_condition {
            vec![0.0; c.len()]
        } else {
            c.to_vec()
        };
        Ok(tape.constant(Tensor::from_vec(vec![1, c.len()], data)?))
    }

    /// Condition-derived initial node states `[M, H]`.
    pub fn init_hidden_on_tape(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        c: NodeId,
        ctx: &mut ForwardCtx,
    ) -> NodeId {
        let flat = self.init_hidden.forward(tape, tp, c, ctx);
        tape.reshape(flat, vec![self.config.bodies, self.config.hidden])
    }

    /// Condition-derived virtual edge message `[1, H]`.
    pub fn virtual_edge_on_tape(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        c: NodeId,
        ctx: &mut ForwardCtx,
    ) -> NodeId {
        self.virtual_edge.forward(tape, tp, c, ctx)
    }

    /// Data-level initial hidden states, for inspection and tests.
    pub fn init_hidden(&self, params: &Params, c: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        let c = self.condition_const(&mut tape, c)?;
        let mut ctx = ForwardCtx::eval();
        let h = self.init_hidden_on_tape(&mut tape, &tp, c, &mut ctx);
        Ok(tape.value(h).clone())
    }

    /// Data-level virtual edge message.
    pub fn virtual_edge_message(&self, params: &Params, c: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        let c = self.condition_const(&mut tape, c)?;
        let mut ctx = ForwardCtx::eval();
        let m = self.virtual_edge_on_tape(&mut tape, &tp, c, &mut ctx);
        Ok(tape.value(m).clone())
    }

    /// One message-passing and autoregressive step. `z_cols` holds the latent
    /// weight column `[E, 1]` for each message-passing edge type `k >= 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step_on_tape(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        hidden: NodeId,
        x: NodeId,
        z_cols: &[NodeId],
        msgs: Option<NodeId>,
        layout: &EdgeLayout,
        ctx: &mut ForwardCtx,
    ) -> (NodeId, NodeId) {
        let h_send = tape.gather_rows(hidden, layout.senders());
        let h_recv = tape.gather_rows(hidden, layout.receivers());
        let edge_in = tape.concat(&[h_send, h_recv], 1);

        let mut message: Option<NodeId> = None;
        for (mlp, &col) in self.edge_mlps.iter().zip(z_cols) {
            let m = mlp.forward(tape, tp, edge_in, ctx);
            let masked = tape.scale_rows(m, col);
            message = Some(match message {
                None => masked,
                Some(acc) => tape.add(acc, masked),
            });
        }
        let message = message.expect("at least one message-passing edge type");
        let mut agg = tape.scatter_add_rows(message, layout.receivers(), layout.bodies());
        if let Some(msgs) = msgs {
            agg = tape.add_row_bias(agg, msgs);
        }

        let gru_in = tape.concat(&[agg, x], 1);
        let h_next = self.gru.forward(tape, tp, gru_in, hidden);

        let o = self.out_mlp.forward(tape, tp, h_next, ctx);
        let offset = self.out_head.forward(tape, tp, o);
        let mu = tape.add(x, offset);
        (mu, h_next)
    }

    /// Full closed-loop rollout on an existing tape. Emissions feed back as
    /// inputs from the second frame on; only `x1` is ever consumed.
    pub fn rollout_on_tape(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        x1: &Tensor,
        c: &[f64],
        z: ZInput,
        frames: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<RolloutNodes> {
        let cfg = &self.config;
        if frames < 2 {
            return Err(Error::InvalidArgument(format!(
                "rollout needs at least 2 frames, got {frames}"
            )));
        }
        if x1.shape() != [cfg.bodies, cfg.features] {
            return Err(Error::DimensionMismatch {
                op: "rollout seed frame",
                lhs: x1.shape().to_vec(),
                rhs: vec![cfg.bodies, cfg.features],
            });
        }
        let layout = EdgeLayout::new(cfg.bodies);
        let z_id = match z {
            ZInput::Node(id) => id,
            ZInput::Data(t) => tape.constant(t.clone()),
        };
        {
            let zs = tape.value(z_id).shape();
            if zs != [layout.edge_count(), cfg.edge_types] {
                return Err(Error::DimensionMismatch {
                    op: "rollout latent",
                    lhs: zs.to_vec(),
                    rhs: vec![layout.edge_count(), cfg.edge_types],
                });
            }
        }
        // Column k of the latent masks message function k; the non-edge
        // column 0 has no message function and is never read.
        let z_cols: Vec<NodeId> = (1..cfg.edge_types)
            .map(|k| tape.narrow(z_id, 1, k, 1))
            .collect();

        let c_id = self.condition_const(tape, c)?;
        let mut hidden = self.init_hidden_on_tape(tape, tp, c_id, ctx);
        let msgs = self
            .config
            .use_virtual_edge
            .then(|| self.virtual_edge_on_tape(tape, tp, c_id, ctx));

        let mut x = tape.constant(x1.clone());
        let mut mean_ids = Vec::with_capacity(frames - 1);
        for step in 1..frames {
            let (mu, h_next) =
                self.decode_step_on_tape(tape, tp, hidden, x, &z_cols, msgs, &layout, ctx);
            if !tape.value(h_next).is_finite() || !tape.value(mu).is_finite() {
                return Err(Error::DecodeFault {
                    step,
                    reason: "non-finite state".into(),
                });
            }
            mean_ids.push(mu);
            hidden = h_next;
            x = if ctx.training && cfg.stochastic_feed {
                let noise: Vec<f64> = (0..cfg.bodies * cfg.features)
                    .map(|_| {
                        let n: f64 = ctx.rng.sample(StandardNormal);
                        n * cfg.sigma_sq.sqrt()
                    })
                    .collect();
                let noise = tape.constant(
                    Tensor::from_vec(vec![cfg.bodies, cfg.features], noise).unwrap(),
                );
                tape.add(mu, noise)
            } else {
                mu
            };
        }
        Ok(RolloutNodes { mean_ids })
    }

    /// Evaluation rollout from `(x1, c, Z)` alone. Returns the mean
    /// trajectory and a sampled trajectory (means plus `sigma` noise at the
    /// emission; with no rng the two coincide). Frame 1 of both outputs is
    /// `x1` verbatim.
    pub fn rollout(
        &self,
        params: &Params,
        x1: &Tensor,
        c: &[f64],
        latent: &InteractionLatent,
        frames: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Trajectory, Trajectory)> {
        let layout = EdgeLayout::new(self.config.bodies);
        let weights = latent.edge_weights(&layout);
        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let nodes =
            self.rollout_on_tape(&mut tape, &tp, x1, c, ZInput::Data(&weights), frames, &mut ctx)?;

        let (m, d) = (self.config.bodies, self.config.features);
        let sigma = self.config.sigma_sq.sqrt();
        let mut means = Trajectory::zeros(frames, m, d);
        let mut sampled = Trajectory::zeros(frames, m, d);
        means.set_frame(0, x1);
        sampled.set_frame(0, x1);
        for (i, &mu) in nodes.mean_ids.iter().enumerate() {
            let v = tape.value(mu);
            means.set_frame(i + 1, v);
            match rng.as_deref_mut() {
                Some(rng) => {
                    let data: Vec<f64> = v
                        .data()
                        .iter()
                        .map(|&x| x + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let noisy = Tensor::from_vec(vec![m, d], data).unwrap();
                    sampled.set_frame(i + 1, &noisy);
                }
                None => sampled.set_frame(i + 1, v),
            }
        }
        Ok((means, sampled))
    }
}
