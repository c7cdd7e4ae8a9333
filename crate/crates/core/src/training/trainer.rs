//! The optimization loop: per-sample losses on fresh tapes, deterministic
//! batch reduction, Adam with step decay, and best-validation checkpointing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, FoldSplit, NormalizationStats, SystemSample};
use crate::decoder::ZInput;
use crate::encoders::{gumbel_noise, sample_concrete_on_tape, LatentStyle, Regime};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, NamedGrads, Params};
use crate::optim::{lr_for_epoch, Adam, AdamConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{
    derive_seed, kl_categorical_on_tape, reconstruction_nll_on_tape, Checkpoint, CnriModel,
    LatentSource, ModelDims, RngState, TrainingConfig,
};

const TRAIN_TAG: u64 = 0x545249; // "TRI"

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
}

/// One sample's loss (and optionally gradients) on a fresh tape.
///
/// `params` usually aliases `model.params`; the separation lets the
/// finite-difference oracle evaluate the identical computation at perturbed
/// parameter values. All randomness (Gumbel noise, dropout masks, stochastic
/// feeding) derives from `seed`, so repeated calls are bit-identical.
fn sample_loss_impl(
    model: &CnriModel,
    params: &Params,
    sample: &SystemSample,
    seed: u64,
    training: bool,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<NamedGrads>)> {
    let dims = model.dims;
    let frames = sample.trajectory.frames();
    if frames != dims.frames
        || sample.trajectory.bodies() != dims.bodies
        || sample.trajectory.features() != dims.features
    {
        return Err(Error::DimensionMismatch {
            op: "training sample",
            lhs: sample.trajectory.tensor().shape().to_vec(),
            rhs: vec![dims.frames, dims.bodies, dims.features],
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = model.edge_layout();
    let style = model.latent_style();
    let noise_shape = match style {
        LatentStyle::Categorical => vec![layout.edge_count(), model.config.edge_types],
        LatentStyle::Factorised => vec![layout.edge_count(), 2 * model.config.edge_types],
    };
    let noise = if training {
        gumbel_noise(noise_shape.clone(), &mut rng)
    } else {
        Tensor::zeros(noise_shape)
    };

    let mut tape = Tape::with_capacity(4096);
    let tp = params.bind(&mut tape);
    let mut ctx = if training {
        ForwardCtx::train(model.config.dropout, rng)
    } else {
        ForwardCtx::eval()
    };

    // Latent and (for the variational regimes) the KL term.
    let pg_weights = model
        .fixed_latent
        .as_ref()
        .map(|latent| latent.edge_weights(&layout));
    let (z_input, kl_node) = match (&model.encoder, model.config.regime) {
        (crate::training::EncoderKind::Fixed, _) => {
            (ZInput::Data(pg_weights.as_ref().expect("pg latent")), None)
        }
        (crate::training::EncoderKind::Imperfect(ig), _) => {
            (ZInput::Node(ig.forward(&mut tape, &tp)), None)
        }
        (crate::training::EncoderKind::Nri(enc), _) => {
            let input = tape.constant(sample.trajectory.body_major());
            let logits = enc.forward(&mut tape, &tp, input, &layout, &mut ctx);
            let z = sample_concrete_on_tape(
                &mut tape,
                logits,
                model.config.temperature,
                &noise,
                LatentStyle::Categorical,
            );
            let kl = kl_categorical_on_tape(
                &mut tape,
                logits,
                &model.config.edge_prior,
                LatentStyle::Categorical,
            );
            (ZInput::Node(z), Some(kl))
        }
        (crate::training::EncoderKind::Fnri(enc), _) => {
            let input = tape.constant(sample.trajectory.body_major());
            let logits = enc.forward(&mut tape, &tp, input, &layout, &mut ctx);
            let z = sample_concrete_on_tape(
                &mut tape,
                logits,
                model.config.temperature,
                &noise,
                LatentStyle::Factorised,
            );
            let kl = kl_categorical_on_tape(
                &mut tape,
                logits,
                &model.config.fnri_head_prior(),
                LatentStyle::Factorised,
            );
            (ZInput::Node(z), Some(kl))
        }
    };

    let x1 = sample.trajectory.frame(0);
    let rollout = model.decoder.rollout_on_tape(
        &mut tape,
        &tp,
        &x1,
        &sample.condition,
        z_input,
        frames,
        &mut ctx,
    )?;

    let targets: Vec<Tensor> = (1..frames).map(|t| sample.trajectory.frame(t)).collect();
    let nll =
        reconstruction_nll_on_tape(&mut tape, &rollout.mean_ids, &targets, model.config.sigma_sq);
    let total = match kl_node {
        Some(kl) => tape.add(nll, kl),
        None => nll,
    };

    let breakdown = LossBreakdown {
        total: tape.scalar(total),
        nll: tape.scalar(nll),
        kl: kl_node.map_or(0.0, |k| tape.scalar(k)),
    };
    let grads = if want_grads {
        let mut g = tape.backward(total);
        Some(NamedGrads::from_backward(params, &tp, &mut g))
    } else {
        None
    };
    Ok((breakdown, grads))
}

/// Loss of one sample at the model's own parameters.
pub fn sample_loss(model: &CnriModel, sample: &SystemSample, seed: u64, training: bool) -> Result<LossBreakdown> {
    sample_loss_impl(model, &model.params, sample, seed, training, false).map(|(l, _)| l)
}

/// Loss of one sample at externally supplied parameter values (the
/// finite-difference oracle's entry point).
pub fn sample_loss_at(
    model: &CnriModel,
    params: &Params,
    sample: &SystemSample,
    seed: u64,
    training: bool,
) -> Result<LossBreakdown> {
    sample_loss_impl(model, params, sample, seed, training, false).map(|(l, _)| l)
}

pub fn sample_loss_grads(
    model: &CnriModel,
    sample: &SystemSample,
    seed: u64,
    training: bool,
) -> Result<(LossBreakdown, NamedGrads)> {
    sample_loss_impl(model, &model.params, sample, seed, training, true)
        .map(|(l, g)| (l, g.expect("grads requested")))
}

/// Batch loss and mean gradients. Samples evaluate in parallel; reduction
/// runs in index order, so results are bitwise reproducible regardless of
/// scheduling.
pub fn batch_loss_grads(
    model: &CnriModel,
    samples: &[&SystemSample],
    seeds: &[u64],
    training: bool,
) -> Result<(LossBreakdown, NamedGrads)> {
    assert_eq!(samples.len(), seeds.len(), "one seed per sample");
    let per_sample: Vec<Result<(LossBreakdown, NamedGrads)>> = samples
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(s, &seed)| {
            sample_loss_impl(model, &model.params, s, seed, training, true)
                .map(|(l, g)| (l, g.expect("grads requested")))
        })
        .collect();

    let scale = 1.0 / samples.len() as f64;
    let mut total = LossBreakdown::default();
    let mut grads = NamedGrads::zeros_like(&model.params);
    for item in per_sample {
        let (l, g) = item?;
        total.total += l.total * scale;
        total.nll += l.nll * scale;
        total.kl += l.kl * scale;
        grads.add_assign(&g);
    }
    grads.scale_assign(scale);
    Ok((total, grads))
}

/// Mean batch loss without gradients.
pub fn batch_loss(
    model: &CnriModel,
    samples: &[&SystemSample],
    seeds: &[u64],
    training: bool,
) -> Result<LossBreakdown> {
    let per_sample: Vec<Result<LossBreakdown>> = samples
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(s, &seed)| sample_loss(model, s, seed, training))
        .collect();
    let scale = 1.0 / samples.len() as f64;
    let mut total = LossBreakdown::default();
    for item in per_sample {
        let l = item?;
        total.total += l.total * scale;
        total.nll += l.nll * scale;
        total.kl += l.kl * scale;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_mse: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// Generation-time validation: denormalized MSE of conditional generations
/// against held-out truth, plus the eval-mode objective value.
fn validate(
    model: &CnriModel,
    train_norm: &[SystemSample],
    val_norm: &[SystemSample],
    stats: &NormalizationStats,
) -> Result<(f64, f64)> {
    let latent = match model.config.regime {
        Regime::Pg | Regime::Ig => model.latent_for_generation(&LatentSource::Own, None)?,
        Regime::Nri | Regime::Fnri => {
            let refs: Vec<&SystemSample> = train_norm.iter().collect();
            let probs = model.aggregate_posterior_probs(&refs)?;
            model.latent_for_generation(
                &LatentSource::Posterior {
                    probs: &probs,
                    sample: false,
                },
                None,
            )?
        }
    };

    let per_sample: Vec<Result<(f64, f64)>> = val_norm
        .par_iter()
        .map(|s| {
            let x1 = s.trajectory.frame(0);
            let (means, _) =
                model.generate(&s.condition, &x1, &latent, s.trajectory.frames(), None)?;
            let gen_denorm = stats.denormalize(&means)?;
            let truth_denorm = stats.denormalize(&s.trajectory)?;
            let mse = gen_denorm.mse_from_second_frame(&truth_denorm);
            let loss = sample_loss(model, s, 0, false)?.total;
            Ok((loss, mse))
        })
        .collect();

    let mut loss = 0.0;
    let mut mse = 0.0;
    for item in per_sample {
        let (l, m) = item?;
        loss += l;
        mse += m;
    }
    let n = val_norm.len() as f64;
    Ok((loss / n, mse / n))
}

/// Trains one fold: fit normalization on the training groups, optimize with
/// Adam under the step-decay schedule, validate by conditional generation,
/// and retain the best-validation parameters.
pub fn train_fold(
    dataset: &Dataset,
    split: &FoldSplit,
    fold: usize,
    config: &TrainingConfig,
) -> Result<FoldOutcome> {
    config.validate()?;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Config("empty training or validation split".into()));
    }
    let train_refs: Vec<&SystemSample> = split.train.iter().map(|&i| &dataset.samples[i]).collect();
    let val_refs: Vec<&SystemSample> = split.val.iter().map(|&i| &dataset.samples[i]).collect();

    let stats = NormalizationStats::fit(&train_refs, 0)?;
    let train_norm: Vec<SystemSample> = train_refs
        .iter()
        .map(|s| {
            Ok(SystemSample {
                trajectory: stats.normalize(&s.trajectory)?,
                ..(*s).clone()
            })
        })
        .collect::<Result<_>>()?;
    let val_norm: Vec<SystemSample> = val_refs
        .iter()
        .map(|s| {
            Ok(SystemSample {
                trajectory: stats.normalize(&s.trajectory)?,
                ..(*s).clone()
            })
        })
        .collect::<Result<_>>()?;

    let dims = ModelDims {
        frames: dataset.meta.frames,
        bodies: dataset.meta.bodies,
        features: dataset.meta.features,
        condition_dim: dataset.meta.condition_dim,
    };
    let fold_config = TrainingConfig {
        seed: derive_seed(config.seed, TRAIN_TAG, fold as u64),
        ..config.clone()
    };
    let mut model = CnriModel::new(fold_config, dims, dataset.meta.shared_adjacency.as_ref())?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(model.config.seed, TRAIN_TAG, 1));

    let n_train = train_norm.len();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Params)> = None;

    for epoch in 0..config.epochs {
        let lr = lr_for_epoch(config.learning_rate, config.lr_decay, config.lr_decay_every, epoch);
        let mut order: Vec<usize> = (0..n_train).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }

        let mut epoch_loss = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SystemSample> = chunk.iter().map(|&i| &train_norm[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
            let (lb, grads) = batch_loss_grads(&model, &batch, &seeds, true)?;
            if !lb.total.is_finite() {
                return Err(Error::TrainingFault(format!(
                    "non-finite loss in epoch {epoch}, batch {batch_idx}"
                )));
            }
            adam.step(&mut model.params, &grads, lr)?;
            epoch_loss += lb.total * batch.len() as f64;
        }
        epoch_loss /= n_train as f64;

        let run_val = (epoch + 1) % config.val_every == 0 || epoch + 1 == config.epochs;
        let (val_loss, val_mse) = if run_val {
            let (l, m) = validate(&model, &train_norm, &val_norm, &stats)?;
            if best.as_ref().is_none_or(|(b, _, _)| m < *b) {
                best = Some((m, epoch, model.params.clone()));
            }
            (Some(l), Some(m))
        } else {
            (None, None)
        };
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss,
            val_loss,
            val_mse,
            lr,
        });
        log::debug!(
            "fold {fold} epoch {epoch}: train {epoch_loss:.4}, val {val_loss:?}, mse {val_mse:?}, lr {lr:.2e}"
        );
    }

    let (best_val_mse, best_epoch, best_params) = best.expect("final epoch always validates");
    let checkpoint = Checkpoint {
        model_kind: "cnri".to_string(),
        config: model.config.clone(),
        dims,
        params: best_params,
        stats,
        fold,
        epoch: best_epoch,
        rng_state: RngState::capture(&rng),
        adjacency: dataset.meta.shared_adjacency.clone(),
    };
    Ok(FoldOutcome {
        fold,
        checkpoint,
        history,
        best_epoch,
        best_val_mse,
    })
}

/// Trains every fold in sequence.
pub fn train(
    dataset: &Dataset,
    folds: &[FoldSplit],
    config: &TrainingConfig,
) -> Result<Vec<FoldOutcome>> {
    folds
        .iter()
        .enumerate()
        .map(|(i, split)| train_fold(dataset, split, i, config))
        .collect()
}

/// History CSV with a schema-version header line.
pub fn write_history_csv(path: &std::path::Path, history: &[EpochStats]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# schema-version: 1")?;
    writeln!(w, "epoch,train_loss,val_loss,val_mse,lr")?;
    for e in history {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.17e}"));
        writeln!(
            w,
            "{},{:.17e},{},{},{:.17e}",
            e.epoch,
            e.train_loss,
            opt(e.val_loss),
            opt(e.val_mse),
            e.lr
        )?;
    }
    w.flush()?;
    Ok(())
}
