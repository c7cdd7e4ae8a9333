//! Adam optimizer, the step-decay learning-rate schedule, and the central
//! finite-difference gradient oracle used to verify every backward rule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NamedGrads, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment tensors are created on first use and
/// always match the parameter shapes.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first_moment: IndexMap<String, Tensor>,
    second_moment: IndexMap<String, Tensor>,
    step_count: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over all parameters. Fails without touching any parameter
    /// if some gradient is non-finite.
    pub fn step(&mut self, params: &mut Params, grads: &NamedGrads, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::TrainingFault(format!(
                    "non-finite gradient for parameter `{name}`"
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (name, value) in params.iter_mut() {
            let g = grads.get(name);
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), value.data_mut());
            for k in 0..pd.len() {
                let gk = g.data()[k];
                md[k] = beta1 * md[k] + (1.0 - beta1) * gk;
                vd[k] = beta2 * vd[k] + (1.0 - beta2) * gk * gk;
                let m_hat = md[k] / bc1;
                let v_hat = vd[k] / bc2;
                pd[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step-decay schedule: `lr0 * decay^(epoch / every)`, a pure function of the
/// epoch index.
pub fn lr_for_epoch(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    lr0 * decay.powi((epoch / every) as i32)
}

/// Central finite differences `(L(p+eps) - L(p-eps)) / 2eps` per coordinate.
/// The loss closure must be deterministic (fix any rng by seed).
pub fn finite_difference_gradient(
    params: &Params,
    eps: f64,
    mut loss: impl FnMut(&Params) -> f64,
) -> NamedGrads {
    assert!(eps > 0.0, "finite differences need eps > 0");
    let mut work = params.clone();
    let mut out = NamedGrads::zeros_like(params);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        for k in 0..params.get(&name).len() {
            let orig = params.get(&name).data()[k];
            work.get_mut(&name).data_mut()[k] = orig + eps;
            let plus = loss(&work);
            work.get_mut(&name).data_mut()[k] = orig - eps;
            let minus = loss(&work);
            work.get_mut(&name).data_mut()[k] = orig;
            out.set_entry(&name, k, (plus - minus) / (2.0 * eps));
        }
    }
    out
}

/// Largest relative deviation between two gradient sets. The denominator is
/// floored so that near-zero coordinates compare absolutely.
pub fn max_relative_error(analytic: &NamedGrads, numeric: &NamedGrads) -> f64 {
    let mut worst = 0.0f64;
    for (name, a) in analytic.iter() {
        let n = numeric.get(name);
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(1e-3);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}
