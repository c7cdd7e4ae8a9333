//! Leapfrog integration of planar spring networks.
//!
//! Bodies connected in the interaction graph attract each other with Hooke
//! forces `F_ij = -k * stiffness_scale * (r_i - r_j)` (zero rest length, the
//! usual interacting-springs convention). The integrator is velocity Verlet,
//! so total mechanical energy is conserved to second order in the step size.

use crate::data::{SystemSpec, Trajectory, FEATURES_PER_BODY};
use crate::error::{Error, Result};

/// Positions and velocities at the first frame, one entry per body.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
}

impl InitialState {
    pub fn is_finite(&self) -> bool {
        self.positions
            .iter()
            .chain(self.velocities.iter())
            .all(|v| v[0].is_finite() && v[1].is_finite())
    }
}

fn accelerations(spec: &SystemSpec, positions: &[[f64; 2]], out: &mut [[f64; 2]]) {
    let m = spec.bodies();
    let k = spec.base_stiffness * spec.stiffness_scale;
    for a in out.iter_mut() {
        *a = [0.0, 0.0];
    }
    for i in 0..m {
        for j in (i + 1)..m {
            if !spec.adjacency.connected(i, j) {
                continue;
            }
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            // Force on i is -k (r_i - r_j); Newton's third law for j.
            out[i][0] -= k * dx / spec.masses[i];
            out[i][1] -= k * dy / spec.masses[i];
            out[j][0] += k * dx / spec.masses[j];
            out[j][1] += k * dy / spec.masses[j];
        }
    }
}

/// Integrates `steps` frames at interval `dt`, recording every frame
/// including the initial one.
pub fn simulate_spring_system(
    spec: &SystemSpec,
    steps: usize,
    dt: f64,
    initial: &InitialState,
) -> Result<Trajectory> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "trajectory needs at least 2 frames, got {steps}"
        )));
    }
    if dt <= 0.0 {
        return Err(Error::InvalidArgument(format!("step size {dt} must be positive")));
    }
    let m = spec.bodies();
    if initial.positions.len() != m || initial.velocities.len() != m {
        return Err(Error::InvalidArgument(format!(
            "initial state covers {} bodies, spec has {m}",
            initial.positions.len()
        )));
    }
    if !initial.is_finite() {
        return Err(Error::InvalidArgument(
            "initial positions/velocities must be finite".into(),
        ));
    }

    let mut pos = initial.positions.clone();
    let mut vel = initial.velocities.clone();
    let mut acc = vec![[0.0; 2]; m];
    let mut acc_next = vec![[0.0; 2]; m];
    accelerations(spec, &pos, &mut acc);

    let mut traj = Trajectory::zeros(steps, m, FEATURES_PER_BODY);
    let record = |traj: &mut Trajectory, t: usize, pos: &[[f64; 2]], vel: &[[f64; 2]]| {
        for (i, (p, v)) in pos.iter().zip(vel).enumerate() {
            traj.set(t, i, 0, p[0]);
            traj.set(t, i, 1, p[1]);
            traj.set(t, i, 2, v[0]);
            traj.set(t, i, 3, v[1]);
        }
    };
    record(&mut traj, 0, &pos, &vel);

    for step in 1..steps {
        for i in 0..m {
            pos[i][0] += dt * vel[i][0] + 0.5 * dt * dt * acc[i][0];
            pos[i][1] += dt * vel[i][1] + 0.5 * dt * dt * acc[i][1];
        }
        accelerations(spec, &pos, &mut acc_next);
        for i in 0..m {
            vel[i][0] += 0.5 * dt * (acc[i][0] + acc_next[i][0]);
            vel[i][1] += 0.5 * dt * (acc[i][1] + acc_next[i][1]);
        }
        std::mem::swap(&mut acc, &mut acc_next);

        let finite = pos
            .iter()
            .chain(vel.iter())
            .all(|v| v[0].is_finite() && v[1].is_finite());
        if !finite {
            return Err(Error::SimulationFault {
                step,
                reason: "non-finite state during integration".into(),
            });
        }
        record(&mut traj, step, &pos, &vel);
    }
    Ok(traj)
}

/// Kinetic plus elastic potential energy of one frame.
pub fn total_energy(spec: &SystemSpec, traj: &Trajectory, t: usize) -> f64 {
    let m = spec.bodies();
    let k = spec.base_stiffness * spec.stiffness_scale;
    let mut e = 0.0;
    for i in 0..m {
        let vx = traj.at(t, i, 2);
        let vy = traj.at(t, i, 3);
        e += 0.5 * spec.masses[i] * (vx * vx + vy * vy);
    }
    for i in 0..m {
        for j in (i + 1)..m {
            if spec.adjacency.connected(i, j) {
                let dx = traj.at(t, i, 0) - traj.at(t, j, 0);
                let dy = traj.at(t, i, 1) - traj.at(t, j, 1);
                e += 0.5 * k * (dx * dx + dy * dy);
            }
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Adjacency;

    fn two_body_spec(scale: f64) -> SystemSpec {
        SystemSpec {
            adjacency: Adjacency::new(2, vec![0, 1, 1, 0]).unwrap(),
            stiffness_scale: scale,
            base_stiffness: 1.0,
            masses: vec![1.0, 1.0],
            regime_label: 0,
        }
    }

    fn still(m: usize, positions: Vec<[f64; 2]>) -> InitialState {
        InitialState {
            positions,
            velocities: vec![[0.0, 0.0]; m],
        }
    }

    #[test]
    fn empty_graph_and_zero_velocity_stays_put() {
        let spec = SystemSpec {
            adjacency: Adjacency::empty(3),
            stiffness_scale: 1.0,
            base_stiffness: 1.0,
            masses: vec![1.0; 3],
            regime_label: 0,
        };
        let init = still(3, vec![[0.0, 0.0], [1.0, 0.5], [-1.0, 2.0]]);
        let traj = simulate_spring_system(&spec, 50, 0.05, &init).unwrap();
        for t in 0..50 {
            for i in 0..3 {
                assert_eq!(traj.at(t, i, 0), init.positions[i][0]);
                assert_eq!(traj.at(t, i, 1), init.positions[i][1]);
                assert_eq!(traj.at(t, i, 2), 0.0);
            }
        }
    }

    /// Measures the oscillation period of the two-body separation from zero
    /// crossings (linear interpolation between frames) and compares against
    /// the analytic harmonic oscillator.
    fn measured_period(scale: f64) -> f64 {
        let spec = two_body_spec(scale);
        let init = still(2, vec![[1.0, 0.0], [-1.0, 0.0]]);
        let dt = 1e-3;
        let steps = 20_000;
        let traj = simulate_spring_system(&spec, steps, dt, &init).unwrap();
        let sep = |t: usize| traj.at(t, 0, 0) - traj.at(t, 1, 0);
        let mut crossings = Vec::new();
        for t in 1..steps {
            let (a, b) = (sep(t - 1), sep(t));
            if a.signum() != b.signum() {
                let frac = a / (a - b);
                crossings.push(((t - 1) as f64 + frac) * dt);
            }
        }
        assert!(crossings.len() >= 3, "not enough zero crossings");
        // consecutive crossings are half a period apart
        let mut spans = Vec::new();
        for w in crossings.windows(2) {
            spans.push(w[1] - w[0]);
        }
        2.0 * spans.iter().sum::<f64>() / spans.len() as f64
    }

    #[test]
    fn two_body_period_matches_analytic_oscillator() {
        // Relative coordinate obeys omega^2 = k*scale*(1/m1 + 1/m2).
        for scale in [0.5, 1.0, 2.0] {
            let omega = (scale * 2.0f64).sqrt();
            let expect = 2.0 * std::f64::consts::PI / omega;
            let got = measured_period(scale);
            assert!(
                (got - expect).abs() / expect < 0.02,
                "scale {scale}: measured {got}, analytic {expect}"
            );
        }
    }

    #[test]
    fn energy_drift_below_one_percent() {
        let spec = two_body_spec(1.3);
        let init = InitialState {
            positions: vec![[0.7, -0.2], [-0.5, 0.4]],
            velocities: vec![[0.1, 0.3], [-0.2, 0.0]],
        };
        let traj = simulate_spring_system(&spec, 500, 1e-3, &init).unwrap();
        let e0 = total_energy(&spec, &traj, 0);
        for t in 0..500 {
            let et = total_energy(&spec, &traj, t);
            assert!(
                ((et - e0) / e0).abs() <= 0.01,
                "frame {t}: energy {et} vs initial {e0}"
            );
        }
    }

    #[test]
    fn doubling_stiffness_changes_the_trajectory() {
        let init = InitialState {
            positions: vec![[1.0, 0.0], [-1.0, 0.3]],
            velocities: vec![[0.0, 0.1], [0.2, 0.0]],
        };
        let a = simulate_spring_system(&two_body_spec(1.0), 100, 0.05, &init).unwrap();
        let b = simulate_spring_system(&two_body_spec(2.0), 100, 0.05, &init).unwrap();
        assert!(a.mse_from_second_frame(&b) > 0.0);
        // shared initial frame
        assert_eq!(a.frame(0), b.frame(0));
    }

    #[test]
    fn rejects_short_and_non_finite_inputs() {
        let spec = two_body_spec(1.0);
        let init = still(2, vec![[0.0, 0.0], [1.0, 0.0]]);
        assert!(simulate_spring_system(&spec, 1, 0.05, &init).is_err());
        assert!(simulate_spring_system(&spec, 10, 0.0, &init).is_err());
        let bad = InitialState {
            positions: vec![[f64::NAN, 0.0], [1.0, 0.0]],
            velocities: vec![[0.0, 0.0], [0.0, 0.0]],
        };
        assert!(simulate_spring_system(&spec, 10, 0.05, &bad).is_err());
    }
}
