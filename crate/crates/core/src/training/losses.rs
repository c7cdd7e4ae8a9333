//! Reconstruction likelihood and KL terms of the objectives.
//!
//! The variational regimes minimize `NLL + KL` (the negative ELBO); the
//! perfect- and imperfect-graph regimes minimize the NLL alone — their
//! objectives carry no KL term.

use crate::encoders::LatentStyle;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Gaussian negative log likelihood of frames `2..T` under emitted means,
/// with fixed variance:
/// `sum (x - mu)^2 / (2 sigma^2) + (count/2) ln(2 pi sigma^2)`.
pub fn reconstruction_nll(truth_frames: &[Tensor], means: &[Tensor], sigma_sq: f64) -> Result<f64> {
    if sigma_sq <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "emission variance {sigma_sq} must be positive"
        )));
    }
    if truth_frames.len() != means.len() {
        return Err(Error::InvalidArgument(format!(
            "{} truth frames vs {} means",
            truth_frames.len(),
            means.len()
        )));
    }
    let mut residual = 0.0;
    let mut count = 0usize;
    for (x, mu) in truth_frames.iter().zip(means) {
        let d = x.sub(mu)?;
        residual += d.data().iter().map(|v| v * v).sum::<f64>();
        count += d.len();
    }
    Ok(residual / (2.0 * sigma_sq) + 0.5 * count as f64 * (TWO_PI * sigma_sq).ln())
}

/// Tape version of [`reconstruction_nll`]; `mean_ids` are the rollout's
/// emitted frames and `targets` the matching ground-truth frames.
pub fn reconstruction_nll_on_tape(
    tape: &mut Tape,
    mean_ids: &[NodeId],
    targets: &[Tensor],
    sigma_sq: f64,
) -> NodeId {
    assert!(sigma_sq > 0.0, "emission variance must be positive");
    assert_eq!(mean_ids.len(), targets.len(), "frame count mismatch");
    let mut acc: Option<NodeId> = None;
    let mut count = 0usize;
    for (&mu, target) in mean_ids.iter().zip(targets) {
        count += target.len();
        let t = tape.constant(target.clone());
        let diff = tape.sub(mu, t);
        let sq = tape.mul(diff, diff);
        let s = tape.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s),
        });
    }
    let acc = acc.expect("at least one emitted frame");
    let scaled = tape.scale(acc, 1.0 / (2.0 * sigma_sq));
    tape.add_const(scaled, 0.5 * count as f64 * (TWO_PI * sigma_sq).ln())
}

/// `sum_edges sum_k q ln(q / p)` with the `0 ln 0 := 0` convention.
pub fn kl_categorical(q: &Tensor, prior: &[f64]) -> f64 {
    let (rows, cols) = q.dims2();
    assert_eq!(cols, prior.len(), "prior length");
    let mut kl = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let qv = q.at2(r, c);
            if qv > 0.0 {
                kl += qv * (qv.ln() - prior[c].ln());
            }
        }
    }
    kl
}

/// KL divergence of the edge posterior from the prior, differentiable in the
/// logits. Categorical style: softmax over the K channels against `prior`
/// (length K). Factorised style: per-head softmax over `[on, off]` against
/// `prior` (length 2), summed over heads.
pub fn kl_categorical_on_tape(
    tape: &mut Tape,
    logits: NodeId,
    prior: &[f64],
    style: LatentStyle,
) -> NodeId {
    let (rows, cols) = {
        let s = tape.value(logits).shape();
        (s[0], s[1])
    };
    let group = |tape: &mut Tape, block: NodeId, prior: &[f64], rows: usize| -> NodeId {
        let q = tape.softmax(block, 1);
        let lq = tape.log(q);
        let ln_prior: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
        let prior_rows =
            Tensor::from_vec(vec![rows, prior.len()], ln_prior.repeat(rows)).unwrap();
        let lp = tape.constant(prior_rows);
        let diff = tape.sub(lq, lp);
        let term = tape.mul(q, diff);
        tape.sum_all(term)
    };
    match style {
        LatentStyle::Categorical => {
            assert_eq!(cols, prior.len(), "prior length");
            group(tape, logits, prior, rows)
        }
        LatentStyle::Factorised => {
            assert_eq!(prior.len(), 2, "factorised prior is per head");
            assert_eq!(cols % 2, 0, "two logits per head");
            let mut acc: Option<NodeId> = None;
            for l in 0..cols / 2 {
                let pair = tape.narrow(logits, 1, 2 * l, 2);
                let kl = group(tape, pair, prior, rows);
                acc = Some(match acc {
                    None => kl,
                    Some(a) => tape.add(a, kl),
                });
            }
            acc.expect("at least one head")
        }
    }
}
