//! Trajectory normalization.
//!
//! `normalize` first re-expresses positions relative to a reference body
//! (the analog of removing a root marker: the reference body sits at the
//! origin in every frame) and then standardizes each of the `M*D` features
//! with statistics computed on the training split. `denormalize` inverts the
//! standardization, returning to physical units in the reference-body frame;
//! the centering itself is idempotent, so normalize/denormalize round-trips
//! exactly on centered data, which is the only data models ever see.

use serde::{Deserialize, Serialize};

use crate::data::{SystemSample, Trajectory};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub reference_body: usize,
    /// Features that are identically zero by construction (the reference
    /// body's centered position); they pass through unscaled.
    pub exempt: Vec<bool>,
    pub bodies: usize,
    pub features: usize,
}

/// Positions of every body re-expressed relative to the reference body.
/// Velocity features are left untouched.
pub fn center_on_reference(traj: &Trajectory, reference_body: usize) -> Trajectory {
    let mut out = traj.clone();
    for t in 0..traj.frames() {
        let rx = traj.at(t, reference_body, 0);
        let ry = traj.at(t, reference_body, 1);
        for b in 0..traj.bodies() {
            out.set(t, b, 0, traj.at(t, b, 0) - rx);
            out.set(t, b, 1, traj.at(t, b, 1) - ry);
        }
    }
    out
}

impl NormalizationStats {
    /// Fits per-feature statistics on (centered) training trajectories only.
    pub fn fit(train: &[&SystemSample], reference_body: usize) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot fit stats on an empty split".into()))?;
        let bodies = first.trajectory.bodies();
        let features = first.trajectory.features();
        if reference_body >= bodies {
            return Err(Error::InvalidArgument(format!(
                "reference body {reference_body} out of {bodies}"
            )));
        }
        let nfeat = bodies * features;
        let mut sum = vec![0.0; nfeat];
        let mut sum_sq = vec![0.0; nfeat];
        let mut count = 0usize;
        for sample in train {
            let centered = center_on_reference(&sample.trajectory, reference_body);
            for t in 0..centered.frames() {
                for b in 0..bodies {
                    for d in 0..features {
                        let v = centered.at(t, b, d);
                        sum[b * features + d] += v;
                        sum_sq[b * features + d] += v * v;
                    }
                }
            }
            count += centered.frames();
        }
        let n = count as f64;
        let mut mean = vec![0.0; nfeat];
        let mut std = vec![0.0; nfeat];
        let mut exempt = vec![false; nfeat];
        for f in 0..nfeat {
            mean[f] = sum[f] / n;
            let var = (sum_sq[f] / n - mean[f] * mean[f]).max(0.0);
            std[f] = var.sqrt();
            let (b, d) = (f / features, f % features);
            if b == reference_body && d < 2 {
                // centered reference position is zero in every frame
                mean[f] = 0.0;
                std[f] = 1.0;
                exempt[f] = true;
            } else if std[f] < 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "feature (body {b}, dim {d}) has zero standard deviation on the training split"
                )));
            }
        }
        Ok(NormalizationStats {
            mean,
            std,
            reference_body,
            exempt,
            bodies,
            features,
        })
    }

    fn check_shape(&self, traj: &Trajectory) -> Result<()> {
        if traj.bodies() != self.bodies || traj.features() != self.features {
            return Err(Error::DimensionMismatch {
                op: "normalize",
                lhs: traj.tensor().shape().to_vec(),
                rhs: vec![self.bodies, self.features],
            });
        }
        Ok(())
    }

    /// Center on the reference body, then z-score per feature.
    pub fn normalize(&self, traj: &Trajectory) -> Result<Trajectory> {
        self.check_shape(traj)?;
        let mut out = center_on_reference(traj, self.reference_body);
        for t in 0..out.frames() {
            for b in 0..self.bodies {
                for d in 0..self.features {
                    let f = b * self.features + d;
                    let v = (out.at(t, b, d) - self.mean[f]) / self.std[f];
                    out.set(t, b, d, v);
                }
            }
        }
        Ok(out)
    }

    /// Exact inverse of the z-scoring; output stays in the reference-body
    /// frame (physical units).
    pub fn denormalize(&self, traj: &Trajectory) -> Result<Trajectory> {
        self.check_shape(traj)?;
        let mut out = traj.clone();
        for t in 0..out.frames() {
            for b in 0..self.bodies {
                for d in 0..self.features {
                    let f = b * self.features + d;
                    let v = traj.at(t, b, d) * self.std[f] + self.mean[f];
                    out.set(t, b, d, v);
                }
            }
        }
        Ok(out)
    }

    pub fn normalize_samples(&self, samples: &[SystemSample]) -> Result<Vec<SystemSample>> {
        samples
            .iter()
            .map(|s| {
                Ok(SystemSample {
                    trajectory: self.normalize(&s.trajectory)?,
                    ..s.clone()
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, CorpusConfig};

    fn corpus() -> Vec<SystemSample> {
        let config = CorpusConfig {
            n_systems: 6,
            cycles_per_system: (2, 3),
            bodies: 3,
            frames: 20,
            ..CorpusConfig::default()
        };
        generate_dataset(&config, 11).unwrap().samples
    }

    #[test]
    fn round_trip_is_exact_on_centered_data() {
        let samples = corpus();
        let refs: Vec<&SystemSample> = samples.iter().collect();
        let stats = NormalizationStats::fit(&refs, 0).unwrap();
        for s in &samples {
            let centered = center_on_reference(&s.trajectory, 0);
            let back = stats
                .denormalize(&stats.normalize(&centered).unwrap())
                .unwrap();
            for (a, b) in back.tensor().data().iter().zip(centered.tensor().data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn training_split_is_standardized() {
        let samples = corpus();
        let refs: Vec<&SystemSample> = samples.iter().collect();
        let stats = NormalizationStats::fit(&refs, 0).unwrap();
        let nfeat = stats.bodies * stats.features;
        let mut sum = vec![0.0; nfeat];
        let mut sum_sq = vec![0.0; nfeat];
        let mut count = 0usize;
        for s in &samples {
            let n = stats.normalize(&s.trajectory).unwrap();
            for t in 0..n.frames() {
                for b in 0..stats.bodies {
                    for d in 0..stats.features {
                        let v = n.at(t, b, d);
                        sum[b * stats.features + d] += v;
                        sum_sq[b * stats.features + d] += v * v;
                    }
                }
                count += 1;
            }
        }
        for f in 0..nfeat {
            if stats.exempt[f] {
                continue;
            }
            let mean = sum[f] / count as f64;
            let var = sum_sq[f] / count as f64 - mean * mean;
            assert!(mean.abs() < 1e-8, "feature {f} mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "feature {f} var {var}");
        }
    }

    #[test]
    fn reference_body_position_is_zero_in_every_frame() {
        let samples = corpus();
        let refs: Vec<&SystemSample> = samples.iter().collect();
        let stats = NormalizationStats::fit(&refs, 1).unwrap();
        for s in &samples {
            let n = stats.normalize(&s.trajectory).unwrap();
            for t in 0..n.frames() {
                assert_eq!(n.at(t, 1, 0), 0.0);
                assert_eq!(n.at(t, 1, 1), 0.0);
            }
        }
    }

    #[test]
    fn zero_variance_feature_is_rejected_by_name() {
        // A single stationary system: every non-exempt feature is constant.
        let config = CorpusConfig {
            n_systems: 3,
            cycles_per_system: (1, 1),
            bodies: 2,
            frames: 5,
            init_velocity_std: 1e-30,
            init_position_std: 1e-30,
            ..CorpusConfig::default()
        };
        let ds = generate_dataset(&config, 3).unwrap();
        let refs: Vec<&SystemSample> = ds.samples.iter().collect();
        match NormalizationStats::fit(&refs, 0) {
            Err(Error::InvalidArgument(msg)) => {
                assert!(msg.contains("body"), "message should name the feature: {msg}")
            }
            other => panic!("expected zero-std error, got {other:?}"),
        }
    }

    #[test]
    fn stats_fit_on_train_differ_from_test_stats() {
        let samples = corpus();
        let (train, test) = samples.split_at(samples.len() / 2);
        let train_refs: Vec<&SystemSample> = train.iter().collect();
        let test_refs: Vec<&SystemSample> = test.iter().collect();
        let a = NormalizationStats::fit(&train_refs, 0).unwrap();
        let b = NormalizationStats::fit(&test_refs, 0).unwrap();
        assert_ne!(a.mean, b.mean);
    }
}
