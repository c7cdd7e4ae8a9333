//! Named parameter store and the small network blocks the model graphs are
//! assembled from: affine layers, the shared two-layer MLP block, and a GRU
//! cell. Blocks hold parameter names and dimensions; values live in [`Params`]
//! and are bound onto a [`Tape`] once per forward pass.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Epsilon inside the square root of the batch-statistics normalization.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Ordered name -> tensor map. Iteration order is insertion order, which makes
/// initialization and optimizer sweeps deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    entries: IndexMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Binds every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> TapeParams {
        let ids = self
            .entries
            .iter()
            .map(|(name, value)| (name.clone(), tape.param(value.clone())))
            .collect();
        TapeParams { ids }
    }
}

/// Parameter leaves of one tape, addressable by name.
pub struct TapeParams {
    ids: IndexMap<String, NodeId>,
}

impl TapeParams {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Accumulated named gradients, aligned with a [`Params`].
#[derive(Clone, Debug, Default)]
pub struct NamedGrads {
    entries: IndexMap<String, Tensor>,
}

impl NamedGrads {
    /// Extracts gradients for all bound parameters; absent ones come back as
    /// zero tensors of the parameter shape.
    pub fn from_backward(
        params: &Params,
        bound: &TapeParams,
        grads: &mut crate::tape::Gradients,
    ) -> Self {
        let mut entries = IndexMap::new();
        for (name, value) in params.iter() {
            let g = grads
                .take(bound.id(name))
                .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
            entries.insert(name.clone(), g);
        }
        NamedGrads { entries }
    }

    pub fn zeros_like(params: &Params) -> Self {
        let entries = params
            .iter()
            .map(|(n, v)| (n.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        NamedGrads { entries }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("no gradient for `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn set_entry(&mut self, name: &str, k: usize, value: f64) {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("no gradient for `{name}`"))
            .data_mut()[k] = value;
    }

    pub fn add_assign(&mut self, other: &NamedGrads) {
        for (name, g) in self.entries.iter_mut() {
            let o = other.get(name);
            for (d, s) in g.data_mut().iter_mut().zip(o.data()) {
                *d += s;
            }
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for (_, g) in self.entries.iter_mut() {
            for d in g.data_mut() {
                *d *= s;
            }
        }
    }
}

/// Per-forward mode switch. Owns the rng used by dropout so a context fully
/// determines what a forward pass computes.
pub struct ForwardCtx {
    pub training: bool,
    pub dropout: f64,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            dropout: 0.0,
            rng: rand::SeedableRng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            training: true,
            dropout,
            rng,
        }
    }
}

/// Glorot-uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
fn glorot(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Tensor {
    let a = (6.0 / (n_in + n_out) as f64).sqrt();
    let data = (0..n_in * n_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::from_vec(vec![n_in, n_out], data).unwrap()
}

/// Affine map `x @ w + b`; weights stored `[n_in, n_out]`, bias `[1, n_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, n_in: usize, n_out: usize) -> Self {
        Linear {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            n_in,
            n_out,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        params.insert(&self.w, glorot(rng, self.n_in, self.n_out));
        params.insert(&self.b, Tensor::zeros(vec![1, self.n_out]));
    }

    pub fn forward(&self, tape: &mut Tape, tp: &TapeParams, x: NodeId) -> NodeId {
        let z = tape.matmul(x, tp.id(&self.w));
        tape.add_row_bias(z, tp.id(&self.b))
    }
}

/// The MLP block every learned function in the model is built from: two
/// affine layers with ELU activations, dropout inside the hidden layer, and
/// optional per-feature batch-statistics normalization after the block.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub norm: bool,
}

impl Mlp {
    pub fn new(prefix: &str, n_in: usize, n_hid: usize, n_out: usize, norm: bool) -> Self {
        Mlp {
            l1: Linear::new(&format!("{prefix}.l1"), n_in, n_hid),
            l2: Linear::new(&format!("{prefix}.l2"), n_hid, n_out),
            norm,
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        self.l1.init(params, rng);
        self.l2.init(params, rng);
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        x: NodeId,
        ctx: &mut ForwardCtx,
    ) -> NodeId {
        let h = self.l1.forward(tape, tp, x);
        let mut h = tape.elu(h);
        if ctx.training && ctx.dropout > 0.0 {
            h = tape.dropout(h, ctx.dropout, &mut ctx.rng);
        }
        let y = self.l2.forward(tape, tp, h);
        let y = tape.elu(y);
        if self.norm {
            tape.batch_norm_cols(y, BATCH_NORM_EPS)
        } else {
            y
        }
    }
}

/// Gated recurrent unit cell:
///
/// ```text
/// r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input_size: usize,
    pub hidden_size: usize,
    gates: [(Linear, Linear); 3], // (input path, hidden path) for r, z, n
}

impl GruCell {
    pub fn new(prefix: &str, input_size: usize, hidden_size: usize) -> Self {
        let gate = |tag: &str, path: &str, n_in: usize| {
            Linear::new(&format!("{prefix}.{tag}.{path}"), n_in, hidden_size)
        };
        GruCell {
            input_size,
            hidden_size,
            gates: [
                (gate("reset", "i", input_size), gate("reset", "h", hidden_size)),
                (gate("update", "i", input_size), gate("update", "h", hidden_size)),
                (gate("cand", "i", input_size), gate("cand", "h", hidden_size)),
            ],
        }
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        for (i, h) in &self.gates {
            i.init(params, rng);
            h.init(params, rng);
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        tp: &TapeParams,
        input: NodeId,
        hidden: NodeId,
    ) -> NodeId {
        let iw = tape.value(input).shape()[1];
        let hw = tape.value(hidden).shape()[1];
        assert_eq!(
            iw, self.input_size,
            "gru_cell: input width {iw}, declared {}",
            self.input_size
        );
        assert_eq!(
            hw, self.hidden_size,
            "gru_cell: hidden width {hw}, declared {}",
            self.hidden_size
        );

        let pre = |tape: &mut Tape, pair: &(Linear, Linear)| {
            let a = pair.0.forward(tape, tp, input);
            let b = pair.1.forward(tape, tp, hidden);
            tape.add(a, b)
        };
        let r_pre = pre(tape, &self.gates[0]);
        let r = tape.sigmoid(r_pre);
        let z_pre = pre(tape, &self.gates[1]);
        let z = tape.sigmoid(z_pre);

        let n_i = self.gates[2].0.forward(tape, tp, input);
        let n_h = self.gates[2].1.forward(tape, tp, hidden);
        let n_h = tape.mul(r, n_h);
        let n_pre = tape.add(n_i, n_h);
        let n = tape.tanh(n_pre);

        // (1 - z) * n + z * h == n + z * (h - n)
        let h_minus_n = tape.sub(hidden, n);
        let gated = tape.mul(z, h_minus_n);
        tape.add(n, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn params_bind_round_trip() {
        let mut params = Params::new();
        params.insert("a", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        params.insert("b", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        assert_eq!(tape.value(tp.id("a")).data(), &[1.0, 2.0]);
        assert_eq!(tape.value(tp.id("b")).data(), &[3.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn params_reject_duplicates() {
        let mut params = Params::new();
        params.insert("a", Tensor::scalar(0.0));
        params.insert("a", Tensor::scalar(1.0));
    }

    #[test]
    fn gru_zero_everything_is_zero() {
        // With all-zero weights, biases, input and hidden:
        // n = tanh(0) = 0, z = sigmoid(0) = 0.5, h' = (1-0.5)*0 + 0.5*0 = 0.
        let cell = GruCell::new("gru", 3, 2);
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cell.init(&mut params, &mut rng);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![1, 3]));
        let h = tape.constant(Tensor::zeros(vec![1, 2]));
        let out = cell.forward(&mut tape, &tp, x, h);
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gru_update_gate_forced_open_carries_hidden_through() {
        // Large positive update-gate bias saturates z toward 1, so h' ~= h.
        let cell = GruCell::new("gru", 2, 2);
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        cell.init(&mut params, &mut rng);
        for v in params.get_mut("gru.update.i.b").data_mut() {
            *v = 60.0;
        }
        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![0.3, -0.8]).unwrap());
        let h_val = vec![0.9, -0.4];
        let h = tape.constant(Tensor::from_vec(vec![1, 2], h_val.clone()).unwrap());
        let out = cell.forward(&mut tape, &tp, x, h);
        for (o, e) in tape.value(out).data().iter().zip(&h_val) {
            assert!((o - e).abs() < 1e-9, "{o} vs {e}");
        }
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        // Independent scalar re-implementation of the same update equations.
        let input_size = 3;
        let hidden_size = 2;
        let cell = GruCell::new("g", input_size, hidden_size);
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        cell.init(&mut params, &mut rng);
        // Give biases nonzero values so every term participates.
        for name in params.names().cloned().collect::<Vec<_>>() {
            if name.ends_with(".b") {
                let t = params.get_mut(&name);
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.05 * (i as f64 + 1.0);
                }
            }
        }
        let x = vec![0.2, -0.7, 1.3];
        let h = vec![0.5, -0.1];

        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        let xi = tape.constant(Tensor::from_vec(vec![1, input_size], x.clone()).unwrap());
        let hi = tape.constant(Tensor::from_vec(vec![1, hidden_size], h.clone()).unwrap());
        let out = cell.forward(&mut tape, &tp, xi, hi);

        let affine = |w: &Tensor, b: &Tensor, v: &[f64], j: usize| -> f64 {
            let mut acc = b.data()[j];
            for (i, &vi) in v.iter().enumerate() {
                acc += vi * w.at2(i, j);
            }
            acc
        };
        let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
        for j in 0..hidden_size {
            let r = sigmoid(
                affine(params.get("g.reset.i.w"), params.get("g.reset.i.b"), &x, j)
                    + affine(params.get("g.reset.h.w"), params.get("g.reset.h.b"), &h, j),
            );
            let z = sigmoid(
                affine(params.get("g.update.i.w"), params.get("g.update.i.b"), &x, j)
                    + affine(params.get("g.update.h.w"), params.get("g.update.h.b"), &h, j),
            );
            let n = (affine(params.get("g.cand.i.w"), params.get("g.cand.i.b"), &x, j)
                + r * affine(params.get("g.cand.h.w"), params.get("g.cand.h.b"), &h, j))
            .tanh();
            let expect = (1.0 - z) * n + z * h[j];
            let got = tape.value(out).data()[j];
            assert!((got - expect).abs() < 1e-12, "unit {j}: {got} vs {expect}");
        }
    }

    #[test]
    #[should_panic(expected = "input width")]
    fn gru_rejects_width_mismatch() {
        let cell = GruCell::new("g", 3, 2);
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cell.init(&mut params, &mut rng);
        let mut tape = Tape::new();
        let tp = params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![1, 4]));
        let h = tape.constant(Tensor::zeros(vec![1, 2]));
        cell.forward(&mut tape, &tp, x, h);
    }
}
