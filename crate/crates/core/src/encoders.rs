//! Producers of the interaction latent `Z` under four regimes: a fixed known
//! graph, a learnable deterministic graph, and the two variational encoders
//! (NRI with one categorical edge type per pair, fNRI with independent binary
//! gates per edge type), together with the concrete relaxation used to
//! backpropagate through discrete samples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Adjacency, Trajectory};
use crate::edges::EdgeLayout;
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Linear, Mlp, Params, TapeParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Which latent source drives the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Perfect graph: `Z` fixed to the known interaction graph.
    Pg,
    /// Imperfect graph: `Z` is a deterministic learnable parameter.
    Ig,
    /// Variational encoder with one categorical edge type per pair.
    Nri,
    /// Variational encoder with independent per-type gates.
    Fnri,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Pg => "pg",
            Regime::Ig => "ig",
            Regime::Nri => "nri",
            Regime::Fnri => "fnri",
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, Regime::Nri | Regime::Fnri)
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pg" => Ok(Regime::Pg),
            "ig" => Ok(Regime::Ig),
            "nri" => Ok(Regime::Nri),
            "fnri" => Ok(Regime::Fnri),
            other => Err(Error::InvalidArgument(format!(
                "unknown regime `{other}` (expected pg|ig|nri|fnri)"
            ))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How edge weights are distributed over the K channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentStyle {
    /// One categorical edge type per pair; weights form a simplex over K.
    Categorical,
    /// K independent on/off gates per pair.
    Factorised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    Hard,
    Relaxed,
}

/// The interaction latent: an `M x M x K` weight tensor with all-zero
/// diagonal slices. Channel 0 is the designated non-edge; the decoder passes
/// no messages through it.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLatent {
    values: Tensor,
    pub mode: LatentMode,
    pub style: LatentStyle,
}

impl InteractionLatent {
    /// Assembles the latent from per-edge weights `[E, K]`.
    pub fn from_edge_weights(
        layout: &EdgeLayout,
        weights: &Tensor,
        mode: LatentMode,
        style: LatentStyle,
    ) -> Self {
        let m = layout.bodies();
        let (e, k) = weights.dims2();
        assert_eq!(e, layout.edge_count(), "edge weight rows");
        let mut values = Tensor::zeros(vec![m, m, k]);
        for edge in 0..e {
            let (i, j) = layout.pair(edge);
            for c in 0..k {
                values.data_mut()[(i * m + j) * k + c] = weights.at2(edge, c);
            }
        }
        InteractionLatent {
            values,
            mode,
            style,
        }
    }

    pub fn bodies(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn edge_types(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        let m = self.bodies();
        let kk = self.edge_types();
        self.values.data()[(i * m + j) * kk + k]
    }

    /// Per-edge weights `[E, K]` in layout order.
    pub fn edge_weights(&self, layout: &EdgeLayout) -> Tensor {
        let k = self.edge_types();
        let mut out = Tensor::zeros(vec![layout.edge_count(), k]);
        for e in 0..layout.edge_count() {
            let (i, j) = layout.pair(e);
            for c in 0..k {
                out.data_mut()[e * k + c] = self.weight(i, j, c);
            }
        }
        out
    }

    /// Structural invariants: zero diagonal, and per-style weight constraints
    /// (one-hot / simplex for categorical, {0,1} or [0,1] for gates).
    pub fn validate(&self) -> Result<()> {
        let m = self.bodies();
        let k = self.edge_types();
        for i in 0..m {
            for c in 0..k {
                if self.weight(i, i, c) != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "latent diagonal ({i},{i},{c}) nonzero"
                    )));
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let slice: Vec<f64> = (0..k).map(|c| self.weight(i, j, c)).collect();
                match (self.style, self.mode) {
                    (LatentStyle::Categorical, LatentMode::Hard) => {
                        let ones = slice.iter().filter(|&&v| v == 1.0).count();
                        let zeros = slice.iter().filter(|&&v| v == 0.0).count();
                        if ones != 1 || zeros != k - 1 {
                            return Err(Error::InvalidArgument(format!(
                                "edge ({i},{j}) not one-hot: {slice:?}"
                            )));
                        }
                    }
                    (LatentStyle::Categorical, LatentMode::Relaxed) => {
                        let sum: f64 = slice.iter().sum();
                        if (sum - 1.0).abs() > 1e-9 || slice.iter().any(|&v| v <= 0.0) {
                            return Err(Error::InvalidArgument(format!(
                                "edge ({i},{j}) not on the simplex: {slice:?}"
                            )));
                        }
                    }
                    (LatentStyle::Factorised, LatentMode::Hard) => {
                        if slice.iter().any(|&v| v != 0.0 && v != 1.0) {
                            return Err(Error::InvalidArgument(format!(
                                "edge ({i},{j}) gates not binary: {slice:?}"
                            )));
                        }
                    }
                    (LatentStyle::Factorised, LatentMode::Relaxed) => {
                        if slice.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                            return Err(Error::InvalidArgument(format!(
                                "edge ({i},{j}) gates out of [0,1]: {slice:?}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fixed latent for the known-graph regime: channel 1 where the adjacency has
/// an edge, channel 0 (non-edge) elsewhere. Constant across samples.
pub fn perfect_graph(adjacency: &Adjacency) -> Result<InteractionLatent> {
    let m = adjacency.bodies();
    let layout = EdgeLayout::new(m);
    let mut weights = Tensor::zeros(vec![layout.edge_count(), 2]);
    for e in 0..layout.edge_count() {
        let (i, j) = layout.pair(e);
        let ch = usize::from(adjacency.connected(i, j));
        weights.data_mut()[e * 2 + ch] = 1.0;
    }
    let latent = InteractionLatent::from_edge_weights(
        &layout,
        &weights,
        LatentMode::Hard,
        LatentStyle::Categorical,
    );
    latent.validate()?;
    Ok(latent)
}

/// Learnable deterministic latent, initialized to strongly favor a given
/// structure. Forward applies a per-edge softmax over K; the logits receive
/// gradients from the generative loss like any other parameter.
#[derive(Clone, Debug)]
pub struct ImperfectGraph {
    pub logits_name: String,
    pub m: usize,
    pub k: usize,
}

/// Logit separation between the favored channel and the rest at init.
pub const IMPERFECT_INIT_GAP: f64 = 4.0;

impl ImperfectGraph {
    pub fn new(m: usize, k: usize) -> Self {
        ImperfectGraph {
            logits_name: "latent.logits".to_string(),
            m,
            k,
        }
    }

    pub fn init(&self, params: &mut Params, adjacency: &Adjacency) {
        assert_eq!(adjacency.bodies(), self.m);
        let layout = EdgeLayout::new(self.m);
        let mut logits = Tensor::zeros(vec![layout.edge_count(), self.k]);
        for e in 0..layout.edge_count() {
            let (i, j) = layout.pair(e);
            let favored = usize::from(adjacency.connected(i, j));
            for c in 0..self.k {
                logits.data_mut()[e * self.k + c] = if c == favored {
                    IMPERFECT_INIT_GAP / 2.0
                } else {
                    -IMPERFECT_INIT_GAP / 2.0
                };
            }
        }
        params.insert(&self.logits_name, logits);
    }

    /// Relaxed deterministic weights `[E, K]` on the tape (no sampling).
    pub fn forward(&self, tape: &mut Tape, tp: &TapeParams) -> NodeId {
        tape.softmax(tp.id(&self.logits_name), 1)
    }

    /// Hard argmax latent for generation.
    pub fn latent_hard(&self, params: &Params) -> InteractionLatent {
        let layout = EdgeLayout::new(self.m);
        let logits = params.get(&self.logits_name);
        let weights = hard_argmax_rows(logits);
        InteractionLatent::from_edge_weights(
            &layout,
            &weights,
            LatentMode::Hard,
            LatentStyle::Categorical,
        )
    }

    /// Relaxed softmax latent (what training uses), as plain data.
    pub fn latent_relaxed(&self, params: &Params) -> InteractionLatent {
        let layout = EdgeLayout::new(self.m);
        let probs = params.get(&self.logits_name).softmax(1).expect("finite logits");
        InteractionLatent::from_edge_weights(
            &layout,
            &probs,
            LatentMode::Relaxed,
            LatentStyle::Categorical,
        )
    }
}

/// Message-passing trunk shared by the NRI and fNRI encoders.
#[derive(Clone, Debug)]
struct EncoderTrunk {
    emb: Mlp,
    edge1: Mlp,
    node1: Mlp,
}

impl EncoderTrunk {
    fn new(prefix: &str, t: usize, d: usize, hidden: usize) -> Self {
        EncoderTrunk {
            emb: Mlp::new(&format!("{prefix}.emb"), t * d, hidden, hidden, true),
            edge1: Mlp::new(&format!("{prefix}.edge1"), 2 * hidden, hidden, hidden, true),
            node1: Mlp::new(&format!("{prefix}.node1"), hidden, hidden, hidden, true),
        }
    }

    fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.emb.init(params, rng);
        self.edge1.init(params, rng);
        self.node1.init(params, rng);
    }

    /// Two rounds of node -> edge message passing; returns the second-round
    /// per-edge input `[E, 2H]`.
    fn forward(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        traj: NodeId,
        layout: &EdgeLayout,
        ctx: &mut ForwardCtx,
    ) -> NodeId {
        let h0 = self.emb.forward(tape, tp, traj, ctx);
        let h0_send = tape.gather_rows(h0, layout.senders());
        let h0_recv = tape.gather_rows(h0, layout.receivers());
        let e_in = tape.concat(&[h0_send, h0_recv], 1);
        let h1_edge = self.edge1.forward(tape, tp, e_in, ctx);
        let agg = tape.scatter_add_rows(h1_edge, layout.receivers(), layout.bodies());
        let h1_node = self.node1.forward(tape, tp, agg, ctx);
        let h1_send = tape.gather_rows(h1_node, layout.senders());
        let h1_recv = tape.gather_rows(h1_node, layout.receivers());
        tape.concat(&[h1_send, h1_recv], 1)
    }
}

fn check_trajectory(traj: &Trajectory, t: usize, m: usize, d: usize) -> Result<()> {
    if traj.frames() != t || traj.bodies() != m || traj.features() != d {
        return Err(Error::DimensionMismatch {
            op: "encode",
            lhs: traj.tensor().shape().to_vec(),
            rhs: vec![t, m, d],
        });
    }
    Ok(())
}

/// NRI encoder: embeds each body's full trajectory, passes messages over the
/// fully connected graph twice, and emits K logits per ordered pair.
#[derive(Clone, Debug)]
pub struct NriEncoder {
    pub m: usize,
    pub t: usize,
    pub d: usize,
    pub k: usize,
    trunk: EncoderTrunk,
    edge2: Mlp,
    head: Linear,
}

impl NriEncoder {
    pub fn new(m: usize, t: usize, d: usize, hidden: usize, k: usize) -> Self {
        NriEncoder {
            m,
            t,
            d,
            k,
            trunk: EncoderTrunk::new("enc", t, d, hidden),
            edge2: Mlp::new("enc.edge2", 2 * hidden, hidden, hidden, true),
            head: Linear::new("enc.head", hidden, k),
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.trunk.init(params, rng);
        self.edge2.init(params, rng);
        self.head.init(params, rng);
    }

    /// Edge logits `[E, K]` on the tape. `traj` is the `[M, T*D]` body-major
    /// constant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        traj: NodeId,
        layout: &EdgeLayout,
        ctx: &mut ForwardCtx,
    ) -> NodeId {
        let e2_in = self.trunk.forward(tape, tp, traj, layout, ctx);
        let h2 = self.edge2.forward(tape, tp, e2_in, ctx);
        self.head.forward(tape, tp, h2)
    }

    /// Data-level encoding of one trajectory (fresh tape, eval mode).
    pub fn encode(&self, params: &Params, traj: &Trajectory) -> Result<Tensor> {
        check_trajectory(traj, self.t, self.m, self.d)?;
        let layout = EdgeLayout::new(self.m);
        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        let input = tape.constant(traj.body_major());
        let mut ctx = ForwardCtx::eval();
        let logits = self.forward(&mut tape, &tp, input, &layout, &mut ctx);
        Ok(tape.value(logits).clone())
    }
}

/// fNRI encoder: shares the trunk with NRI but ends in K independent edge
/// update functions, each emitting a two-way (on/off) logit pair. Output is
/// `[E, 2K]` with head `l` occupying columns `2l..2l+2`; within a head the
/// first column is the ON component.
#[derive(Clone, Debug)]
pub struct FnriEncoder {
    pub m: usize,
    pub t: usize,
    pub d: usize,
    pub k: usize,
    trunk: EncoderTrunk,
    heads: Vec<(Mlp, Linear)>,
}

impl FnriEncoder {
    pub fn new(m: usize, t: usize, d: usize, hidden: usize, k: usize) -> Self {
        let heads = (0..k)
            .map(|l| {
                (
                    Mlp::new(&format!("enc.edge2.{l}"), 2 * hidden, hidden, hidden, true),
                    Linear::new(&format!("enc.head.{l}"), hidden, 2),
                )
            })
            .collect();
        FnriEncoder {
            m,
            t,
            d,
            k,
            trunk: EncoderTrunk::new("enc", t, d, hidden),
            heads,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.trunk.init(params, rng);
        for (mlp, head) in &self.heads {
            mlp.init(params, rng);
            head.init(params, rng);
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        traj: NodeId,
        layout: &EdgeLayout,
        ctx: &mut ForwardCtx,
    ) -> NodeId {
        let e2_in = self.trunk.forward(tape, tp, traj, layout, ctx);
        let parts: Vec<NodeId> = self
            .heads
            .iter()
            .map(|(mlp, head)| {
                let h = mlp.forward(tape, tp, e2_in, ctx);
                head.forward(tape, tp, h)
            })
            .collect();
        tape.concat(&parts, 1)
    }

    pub fn encode(&self, params: &Params, traj: &Trajectory) -> Result<Tensor> {
        check_trajectory(traj, self.t, self.m, self.d)?;
        let layout = EdgeLayout::new(self.m);
        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        let input = tape.constant(traj.body_major());
        let mut ctx = ForwardCtx::eval();
        let logits = self.forward(&mut tape, &tp, input, &layout, &mut ctx);
        Ok(tape.value(logits).clone())
    }
}

/// i.i.d. Gumbel(0,1) noise of a given shape: `-ln(-ln(u))`.
pub fn gumbel_noise(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // open interval to keep both logs finite
            let u: f64 = loop {
                let u = rng.random::<f64>();
                if u > 0.0 && u < 1.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Differentiable concrete-relaxation sample on the tape:
/// `z = softmax((logits + g) / rho)` per categorical group. For the
/// factorised style the softmax runs per head over its two logits and the
/// result collapses to the per-head ON gates `[E, K]`.
pub fn sample_concrete_on_tape(
    tape: &mut Tape,
    logits: NodeId,
    rho: f64,
    noise: &Tensor,
    style: LatentStyle,
) -> NodeId {
    assert!(rho > 0.0, "temperature {rho} must be positive");
    let noise_id = tape.constant(noise.clone());
    let shifted = tape.add(logits, noise_id);
    let scaled = tape.scale(shifted, 1.0 / rho);
    match style {
        LatentStyle::Categorical => tape.softmax(scaled, 1),
        LatentStyle::Factorised => {
            let cols = tape.value(scaled).shape()[1];
            assert_eq!(cols % 2, 0, "factorised logits need 2 columns per head");
            let heads = cols / 2;
            let gates: Vec<NodeId> = (0..heads)
                .map(|l| {
                    let pair = tape.narrow(scaled, 1, 2 * l, 2);
                    let soft = tape.softmax(pair, 1);
                    tape.narrow(soft, 1, 0, 1)
                })
                .collect();
            tape.concat(&gates, 1)
        }
    }
}

/// Data-level relaxed sample; `noise = None` is the noise-free test hook
/// (`g = 0`), which reduces to `softmax(logits / rho)`.
pub fn sample_concrete(
    logits: &Tensor,
    rho: f64,
    noise: Option<&Tensor>,
    style: LatentStyle,
) -> Result<Tensor> {
    if rho <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature {rho} must be positive"
        )));
    }
    let mut tape = Tape::new();
    let id = tape.constant(logits.clone());
    let zero = Tensor::zeros(logits.shape().to_vec());
    let noise = noise.unwrap_or(&zero);
    let out = sample_concrete_on_tape(&mut tape, id, rho, noise, style);
    Ok(tape.value(out).clone())
}

/// Hard one-hot / binary sample. With noise this is Gumbel-max sampling from
/// the categorical defined by the logits; without noise it is the argmax.
pub fn sample_hard(logits: &Tensor, noise: Option<&Tensor>, style: LatentStyle) -> Tensor {
    let shifted = match noise {
        Some(g) => logits.add(g).expect("noise shape matches logits"),
        None => logits.clone(),
    };
    match style {
        LatentStyle::Categorical => hard_argmax_rows(&shifted),
        LatentStyle::Factorised => {
            let (e, cols) = shifted.dims2();
            let heads = cols / 2;
            let mut out = Tensor::zeros(vec![e, heads]);
            for r in 0..e {
                for l in 0..heads {
                    let on = shifted.at2(r, 2 * l);
                    let off = shifted.at2(r, 2 * l + 1);
                    out.data_mut()[r * heads + l] = f64::from(on > off);
                }
            }
            out
        }
    }
}

fn hard_argmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.dims2();
    let mut out = Tensor::zeros(vec![rows, cols]);
    for r in 0..rows {
        let mut best = 0;
        for c in 1..cols {
            if x.at2(r, c) > x.at2(r, best) {
                best = c;
            }
        }
        out.data_mut()[r * cols + best] = 1.0;
    }
    out
}

/// Per-edge posterior probabilities: softmax over K for the categorical
/// style, per-head softmax over the two components for the factorised style
/// (output keeps the `[E, 2K]` layout).
pub fn posterior_probs(logits: &Tensor, style: LatentStyle) -> Result<Tensor> {
    match style {
        LatentStyle::Categorical => logits.softmax(1),
        LatentStyle::Factorised => {
            let (e, cols) = logits.dims2();
            if cols % 2 != 0 {
                return Err(Error::InvalidArgument(
                    "factorised logits need 2 columns per head".into(),
                ));
            }
            let mut out = Tensor::zeros(vec![e, cols]);
            for r in 0..e {
                for l in 0..cols / 2 {
                    let a = logits.at2(r, 2 * l);
                    let b = logits.at2(r, 2 * l + 1);
                    let m = a.max(b);
                    let ea = (a - m).exp();
                    let eb = (b - m).exp();
                    out.data_mut()[r * cols + 2 * l] = ea / (ea + eb);
                    out.data_mut()[r * cols + 2 * l + 1] = eb / (ea + eb);
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NamedGrads, BATCH_NORM_EPS};
    use crate::optim::{finite_difference_gradient, max_relative_error};
    use rand::SeedableRng;

    fn random_trajectory(rng: &mut ChaCha8Rng, t: usize, m: usize, d: usize) -> Trajectory {
        let data = (0..t * m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Trajectory::new(Tensor::from_vec(vec![t, m, d], data).unwrap()).unwrap()
    }

    #[test]
    fn perfect_graph_empty_and_complete() {
        let empty = perfect_graph(&Adjacency::empty(3)).unwrap();
        let complete = perfect_graph(&Adjacency::complete(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                assert_eq!(empty.weight(i, j, 0), 1.0);
                assert_eq!(empty.weight(i, j, 1), 0.0);
                assert_eq!(complete.weight(i, j, 0), 0.0);
                assert_eq!(complete.weight(i, j, 1), 1.0);
            }
        }
        empty.validate().unwrap();
        complete.validate().unwrap();
    }

    #[test]
    fn perfect_graph_round_trips_the_adjacency() {
        let adj = Adjacency::new(4, vec![
            0, 1, 0, 1,
            1, 0, 1, 0,
            0, 1, 0, 0,
            1, 0, 0, 0,
        ]).unwrap();
        let latent = perfect_graph(&adj).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(latent.weight(i, j, 1) == 1.0, adj.connected(i, j));
                }
            }
        }
    }

    #[test]
    fn imperfect_graph_initialization_matches_perfect_graph() {
        let adj = Adjacency::new(3, vec![0, 1, 0, 1, 0, 1, 0, 1, 0]).unwrap();
        let ig = ImperfectGraph::new(3, 2);
        let mut params = Params::new();
        ig.init(&mut params, &adj);
        let hard = ig.latent_hard(&params);
        let pg = perfect_graph(&adj).unwrap();
        assert_eq!(hard.values(), pg.values());

        // relaxed forward rows sum to one
        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        let probs = ig.forward(&mut tape, &tp);
        let v = tape.value(probs);
        for e in 0..6 {
            let sum: f64 = (0..2).map(|c| v.at2(e, c)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        ig.latent_relaxed(&params).validate().unwrap();
    }

    #[test]
    fn nri_identical_trajectories_give_symmetric_logits() {
        let (t, m, d) = (5, 2, 3);
        let enc = NriEncoder::new(m, t, d, 4, 2);
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        enc.init(&mut params, &mut rng);
        // both bodies share one trajectory
        let mut traj = random_trajectory(&mut rng, t, m, d);
        for ti in 0..t {
            for di in 0..d {
                let v = traj.at(ti, 0, di);
                traj.set(ti, 1, di, v);
            }
        }
        let logits = enc.encode(&params, &traj).unwrap();
        let layout = EdgeLayout::new(m);
        let e01 = layout.index_of(0, 1);
        let e10 = layout.index_of(1, 0);
        for c in 0..2 {
            assert!((logits.at2(e01, c) - logits.at2(e10, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn nri_emits_one_logit_row_per_ordered_pair() {
        let enc = NriEncoder::new(3, 4, 2, 5, 2);
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        enc.init(&mut params, &mut rng);
        let traj = random_trajectory(&mut rng, 4, 3, 2);
        let logits = enc.encode(&params, &traj).unwrap();
        assert_eq!(logits.shape(), &[6, 2]);
    }

    #[test]
    fn nri_rejects_shape_mismatch() {
        let enc = NriEncoder::new(3, 4, 2, 5, 2);
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        enc.init(&mut params, &mut rng);
        let traj = random_trajectory(&mut rng, 4, 2, 2);
        assert!(matches!(
            enc.encode(&params, &traj),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// Scalar re-composition of the full message-passing stack on a
    /// width-one encoder: embeddings, two edge rounds, node update,
    /// normalization, and the linear head.
    #[test]
    fn nri_matches_manual_composition_on_minimal_instance() {
        let (t, m, d, h, k) = (2, 2, 1, 1, 2);
        let enc = NriEncoder::new(m, t, d, h, k);
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        enc.init(&mut params, &mut rng);

        // hand-set every parameter to known values
        let assignments: &[(&str, &[f64])] = &[
            ("enc.emb.l1.w", &[0.7, -0.3]),
            ("enc.emb.l1.b", &[0.1]),
            ("enc.emb.l2.w", &[1.1]),
            ("enc.emb.l2.b", &[-0.2]),
            ("enc.edge1.l1.w", &[0.5, 0.4]),
            ("enc.edge1.l1.b", &[0.0]),
            ("enc.edge1.l2.w", &[0.9]),
            ("enc.edge1.l2.b", &[0.05]),
            ("enc.node1.l1.w", &[-0.6]),
            ("enc.node1.l1.b", &[0.2]),
            ("enc.node1.l2.w", &[0.8]),
            ("enc.node1.l2.b", &[0.0]),
            ("enc.edge2.l1.w", &[0.3, -0.2]),
            ("enc.edge2.l1.b", &[0.1]),
            ("enc.edge2.l2.w", &[1.2]),
            ("enc.edge2.l2.b", &[-0.1]),
            ("enc.head.w", &[0.6, -0.8]),
            ("enc.head.b", &[0.01, -0.02]),
        ];
        for (name, values) in assignments {
            params.get_mut(name).data_mut().copy_from_slice(values);
        }

        let traj = Trajectory::new(
            Tensor::from_vec(vec![t, m, d], vec![0.4, -0.5, 0.9, 0.2]).unwrap(),
        )
        .unwrap();
        let logits = enc.encode(&params, &traj).unwrap();

        // scalar oracle
        let elu = |x: f64| if x > 0.0 { x } else { x.exp() - 1.0 };
        let bn2 = |a: f64, b: f64| {
            let mean = 0.5 * (a + b);
            let var = 0.5 * ((a - mean).powi(2) + (b - mean).powi(2));
            let s = (var + BATCH_NORM_EPS).sqrt();
            ((a - mean) / s, (b - mean) / s)
        };
        let p = |name: &str| params.get(name).data().to_vec();

        // body-major inputs: body 0 = [x^1_0, x^2_0], body 1 = [x^1_1, x^2_1]
        let x0 = [traj.at(0, 0, 0), traj.at(1, 0, 0)];
        let x1 = [traj.at(0, 1, 0), traj.at(1, 1, 0)];
        let mlp2 = |w1: &[f64], b1: f64, w2: f64, b2: f64, input: &[f64]| {
            let hidden = elu(input.iter().zip(w1).map(|(a, b)| a * b).sum::<f64>() + b1);
            elu(hidden * w2 + b2)
        };
        let emb = |input: &[f64]| {
            mlp2(&p("enc.emb.l1.w"), p("enc.emb.l1.b")[0], p("enc.emb.l2.w")[0], p("enc.emb.l2.b")[0], input)
        };
        let (h0_0, h0_1) = bn2(emb(&x0), emb(&x1));

        // edges in layout order: (0,1) then (1,0); input is [sender, receiver]
        let edge1 = |s: f64, r: f64| {
            mlp2(&p("enc.edge1.l1.w"), p("enc.edge1.l1.b")[0], p("enc.edge1.l2.w")[0], p("enc.edge1.l2.b")[0], &[s, r])
        };
        let (e01, e10) = bn2(edge1(h0_0, h0_1), edge1(h0_1, h0_0));

        // receiver aggregation: node 0 receives edge (1,0), node 1 edge (0,1)
        let node1 = |agg: f64| {
            mlp2(&p("enc.node1.l1.w"), p("enc.node1.l1.b")[0], p("enc.node1.l2.w")[0], p("enc.node1.l2.b")[0], &[agg])
        };
        let (h1_0, h1_1) = bn2(node1(e10), node1(e01));

        let edge2 = |s: f64, r: f64| {
            mlp2(&p("enc.edge2.l1.w"), p("enc.edge2.l1.b")[0], p("enc.edge2.l2.w")[0], p("enc.edge2.l2.b")[0], &[s, r])
        };
        let (f01, f10) = bn2(edge2(h1_0, h1_1), edge2(h1_1, h1_0));

        let head = |v: f64, c: usize| v * p("enc.head.w")[c] + p("enc.head.b")[c];
        let expect = [
            [head(f01, 0), head(f01, 1)],
            [head(f10, 0), head(f10, 1)],
        ];
        for e in 0..2 {
            for c in 0..2 {
                assert!(
                    (logits.at2(e, c) - expect[e][c]).abs() < 1e-12,
                    "edge {e} channel {c}: {} vs {}",
                    logits.at2(e, c),
                    expect[e][c]
                );
            }
        }
    }

    #[test]
    fn fnri_shapes_and_degenerate_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc1 = FnriEncoder::new(3, 4, 2, 5, 1);
        let mut p1 = Params::new();
        enc1.init(&mut p1, &mut rng);
        let traj = random_trajectory(&mut rng, 4, 3, 2);
        let logits = enc1.encode(&p1, &traj).unwrap();
        // K = 1: a single binary gate per edge
        assert_eq!(logits.shape(), &[6, 2]);

        let enc2 = FnriEncoder::new(3, 4, 2, 5, 2);
        let mut p2 = Params::new();
        enc2.init(&mut p2, &mut rng);
        let logits = enc2.encode(&p2, &traj).unwrap();
        assert_eq!(logits.shape(), &[6, 4]);
    }

    #[test]
    fn fnri_heads_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = FnriEncoder::new(3, 4, 2, 5, 2);
        let mut params = Params::new();
        enc.init(&mut params, &mut rng);
        let traj = random_trajectory(&mut rng, 4, 3, 2);
        let before = enc.encode(&params, &traj).unwrap();

        // zero out everything belonging to head 1
        for name in params.names().cloned().collect::<Vec<_>>() {
            if name.starts_with("enc.edge2.1") || name.starts_with("enc.head.1") {
                for v in params.get_mut(&name).data_mut() {
                    *v = 0.0;
                }
            }
        }
        let after = enc.encode(&params, &traj).unwrap();
        for e in 0..6 {
            for c in 0..2 {
                assert_eq!(before.at2(e, c), after.at2(e, c), "head-0 logits changed");
            }
        }
    }

    #[test]
    fn encoders_are_permutation_equivariant() {
        let (t, m, d, h) = (4, 4, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let perm = [2usize, 0, 3, 1];
        let traj = random_trajectory(&mut rng, t, m, d);
        let mut permuted = Trajectory::zeros(t, m, d);
        for ti in 0..t {
            for (new_idx, &old_idx) in perm.iter().enumerate() {
                for di in 0..d {
                    permuted.set(ti, new_idx, di, traj.at(ti, old_idx, di));
                }
            }
        }
        let layout = EdgeLayout::new(m);

        let enc = NriEncoder::new(m, t, d, h, 2);
        let mut params = Params::new();
        enc.init(&mut params, &mut rng);
        let base = enc.encode(&params, &traj).unwrap();
        let perm_logits = enc.encode(&params, &permuted).unwrap();
        for a in 0..m {
            for b in 0..m {
                if a == b {
                    continue;
                }
                let e_new = layout.index_of(a, b);
                let e_old = layout.index_of(perm[a], perm[b]);
                for c in 0..2 {
                    assert!(
                        (perm_logits.at2(e_new, c) - base.at2(e_old, c)).abs() < 1e-10,
                        "pair ({a},{b}) channel {c}"
                    );
                }
            }
        }

        let enc = FnriEncoder::new(m, t, d, h, 2);
        let mut params = Params::new();
        enc.init(&mut params, &mut rng);
        let base = enc.encode(&params, &traj).unwrap();
        let perm_logits = enc.encode(&params, &permuted).unwrap();
        for a in 0..m {
            for b in 0..m {
                if a == b {
                    continue;
                }
                let e_new = layout.index_of(a, b);
                let e_old = layout.index_of(perm[a], perm[b]);
                for c in 0..4 {
                    assert!((perm_logits.at2(e_new, c) - base.at2(e_old, c)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn concrete_noise_free_hook_reduces_to_tempered_softmax() {
        let logits = Tensor::from_rows(&[vec![1.0, -0.5], vec![0.2, 2.0]]).unwrap();
        let rho = 0.7;
        let z = sample_concrete(&logits, rho, None, LatentStyle::Categorical).unwrap();
        let expect = logits.scale(1.0 / rho).softmax(1).unwrap();
        for (a, b) in z.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(sample_concrete(&logits, 0.0, None, LatentStyle::Categorical).is_err());
    }

    #[test]
    fn concrete_low_temperature_concentrates_on_vertices() {
        // The difference of two Gumbels is logistic, so with a logit gap of 5
        // and rho = 0.1 the exact vertex-proximity probability is
        // sigma(4.31) + sigma(-5.69) = 0.99006 — barely above the 0.99 bound.
        // The seed is fixed; the draw is deterministic.
        let logits = Tensor::from_rows(&[vec![5.0, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let draws = 100_000;
        let mut near_vertex = 0usize;
        for _ in 0..draws {
            let g = gumbel_noise(vec![1, 2], &mut rng);
            let z = sample_concrete(&logits, 0.1, Some(&g), LatentStyle::Categorical).unwrap();
            let max = z.data().iter().cloned().fold(f64::MIN, f64::max);
            if max >= 1.0 - 1e-3 {
                near_vertex += 1;
            }
        }
        let frac = near_vertex as f64 / draws as f64;
        assert!(frac >= 0.99, "only {frac} of draws near a vertex");
    }

    #[test]
    fn gumbel_max_frequencies_match_softmax() {
        let logits = Tensor::from_rows(&[vec![0.5, -0.3, 1.0]]).unwrap();
        let probs = logits.softmax(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let draws = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let g = gumbel_noise(vec![1, 3], &mut rng);
            let z = sample_hard(&logits, Some(&g), LatentStyle::Categorical);
            for c in 0..3 {
                if z.at2(0, c) == 1.0 {
                    counts[c] += 1;
                }
            }
        }
        for c in 0..3 {
            let freq = counts[c] as f64 / draws as f64;
            assert!(
                (freq - probs.at2(0, c)).abs() < 0.01,
                "category {c}: {freq} vs {}",
                probs.at2(0, c)
            );
        }
    }

    #[test]
    fn posterior_probs_basics() {
        let logits = Tensor::zeros(vec![3, 2]);
        let p = posterior_probs(&logits, LatentStyle::Categorical).unwrap();
        for e in 0..3 {
            assert_eq!(p.at2(e, 0), 0.5);
            assert_eq!(p.at2(e, 1), 0.5);
        }
        let logits = Tensor::from_rows(&[vec![2.0, -1.0, 0.0, 0.0]]).unwrap();
        let p = posterior_probs(&logits, LatentStyle::Factorised).unwrap();
        assert!((p.at2(0, 0) + p.at2(0, 1) - 1.0).abs() < 1e-12);
        assert!((p.at2(0, 2) + p.at2(0, 3) - 1.0).abs() < 1e-12);
        assert_eq!(p.at2(0, 2), 0.5);
    }

    #[test]
    fn fnri_relaxed_sample_is_valid_gate_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = Tensor::from_vec(
            vec![6, 4],
            (0..24).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let g = gumbel_noise(vec![6, 4], &mut rng);
        let z = sample_concrete(&logits, 0.5, Some(&g), LatentStyle::Factorised).unwrap();
        assert_eq!(z.shape(), &[6, 2]);
        let layout = EdgeLayout::new(3);
        let latent = InteractionLatent::from_edge_weights(
            &layout,
            &z,
            LatentMode::Relaxed,
            LatentStyle::Factorised,
        );
        latent.validate().unwrap();

        let hard = sample_hard(&logits, None, LatentStyle::Factorised);
        let latent = InteractionLatent::from_edge_weights(
            &layout,
            &hard,
            LatentMode::Hard,
            LatentStyle::Factorised,
        );
        latent.validate().unwrap();
    }

    /// Reverse-mode gradients of both encoders against the oracle, with the
    /// Gumbel noise frozen across evaluations.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (t, m, d, h, k) = (4, 3, 2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let traj = random_trajectory(&mut rng, t, m, d);
        let weight = Tensor::from_vec(
            vec![6, k],
            (0..6 * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let noise = gumbel_noise(vec![6, k], &mut rng);
        let layout = EdgeLayout::new(m);

        let enc = NriEncoder::new(m, t, d, h, k);
        let mut params = Params::new();
        enc.init(&mut params, &mut rng);
        let eval = |p: &Params| -> (f64, Option<NamedGrads>) {
            let mut tape = Tape::new();
            let tp = p.bind(&mut tape);
            let input = tape.constant(traj.body_major());
            let mut ctx = ForwardCtx::eval();
            let logits = enc.forward(&mut tape, &tp, input, &layout, &mut ctx);
            let z = sample_concrete_on_tape(&mut tape, logits, 0.5, &noise, LatentStyle::Categorical);
            let w = tape.constant(weight.clone());
            let prod = tape.mul(z, w);
            let loss = tape.sum_all(prod);
            let value = tape.scalar(loss);
            let mut grads = tape.backward(loss);
            (value, Some(NamedGrads::from_backward(p, &tp, &mut grads)))
        };
        let (_, analytic) = eval(&params);
        let analytic = analytic.unwrap();
        let numeric = finite_difference_gradient(&params, 1e-5, |p| eval(p).0);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "nri encoder gradient error {err}");
        // gradients reach the trunk
        assert!(analytic.get("enc.emb.l1.w").data().iter().any(|&v| v != 0.0));

        let enc = FnriEncoder::new(m, t, d, h, k);
        let mut params = Params::new();
        enc.init(&mut params, &mut rng);
        let noise = gumbel_noise(vec![6, 2 * k], &mut rng);
        let weight = Tensor::from_vec(
            vec![6, k],
            (0..6 * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let eval = |p: &Params| -> (f64, Option<NamedGrads>) {
            let mut tape = Tape::new();
            let tp = p.bind(&mut tape);
            let input = tape.constant(traj.body_major());
            let mut ctx = ForwardCtx::eval();
            let logits = enc.forward(&mut tape, &tp, input, &layout, &mut ctx);
            let z = sample_concrete_on_tape(&mut tape, logits, 0.5, &noise, LatentStyle::Factorised);
            let w = tape.constant(weight.clone());
            let prod = tape.mul(z, w);
            let loss = tape.sum_all(prod);
            let value = tape.scalar(loss);
            let mut grads = tape.backward(loss);
            (value, Some(NamedGrads::from_backward(p, &tp, &mut grads)))
        };
        let (_, analytic) = eval(&params);
        let analytic = analytic.unwrap();
        let numeric = finite_difference_gradient(&params, 1e-5, |p| eval(p).0);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "fnri encoder gradient error {err}");
    }
}
