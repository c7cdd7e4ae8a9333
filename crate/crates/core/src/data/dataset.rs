//! Corpus generation: per-system specs, condition vectors, and the sampled
//! multi-cycle dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    simulate_spring_system, Adjacency, InitialState, Trajectory, FEATURES_PER_BODY,
};
use crate::error::{Error, Result};

/// Number of regime labels (stiffness above/below the corpus median).
pub const REGIME_COUNT: usize = 2;

/// Static description of one dynamical system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub adjacency: Adjacency,
    pub stiffness_scale: f64,
    pub base_stiffness: f64,
    pub masses: Vec<f64>,
    pub regime_label: usize,
}

impl SystemSpec {
    pub fn bodies(&self) -> usize {
        self.adjacency.bodies()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stiffness_scale <= 0.0 || self.base_stiffness <= 0.0 {
            return Err(Error::InvalidArgument("stiffness must be positive".into()));
        }
        if self.masses.len() != self.bodies() {
            return Err(Error::InvalidArgument(format!(
                "{} masses for {} bodies",
                self.masses.len(),
                self.bodies()
            )));
        }
        if self.masses.iter().any(|&m| m <= 0.0) {
            return Err(Error::InvalidArgument("masses must be positive".into()));
        }
        if self.regime_label >= REGIME_COUNT {
            return Err(Error::InvalidArgument(format!(
                "regime label {} out of range",
                self.regime_label
            )));
        }
        Ok(())
    }
}

/// One trajectory of one system, together with everything consumed at
/// generation time.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSample {
    pub trajectory: Trajectory,
    pub condition: Vec<f64>,
    pub group_id: usize,
    pub regime_label: usize,
}

/// Deterministic condition-vector layout:
/// `[stiffness_scale, masses (M), one-hot regime (2), upper-triangle adjacency]`.
/// The adjacency block can be disabled for partial-conditioning ablations.
pub fn build_condition_vector(spec: &SystemSpec, include_adjacency: bool) -> Vec<f64> {
    let mut c = Vec::with_capacity(condition_dim(spec.bodies(), include_adjacency));
    c.push(spec.stiffness_scale);
    c.extend_from_slice(&spec.masses);
    for r in 0..REGIME_COUNT {
        c.push(if r == spec.regime_label { 1.0 } else { 0.0 });
    }
    if include_adjacency {
        c.extend(spec.adjacency.upper_triangle());
    }
    c
}

pub fn condition_dim(bodies: usize, include_adjacency: bool) -> usize {
    1 + bodies + REGIME_COUNT + if include_adjacency { bodies * (bodies - 1) / 2 } else { 0 }
}

/// Inverse of [`build_condition_vector`]; only well-defined when the vector
/// carries the adjacency block. Used to verify the vector determines the spec.
pub fn decode_condition_vector(c: &[f64], bodies: usize, base_stiffness: f64) -> Result<SystemSpec> {
    let expected = condition_dim(bodies, true);
    if c.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "condition vector of length {} cannot describe {} bodies (expected {})",
            c.len(),
            bodies,
            expected
        )));
    }
    let stiffness_scale = c[0];
    let masses = c[1..1 + bodies].to_vec();
    let onehot = &c[1 + bodies..1 + bodies + REGIME_COUNT];
    let regime_label = onehot
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let adjacency = Adjacency::from_upper_triangle(bodies, &c[1 + bodies + REGIME_COUNT..])?;
    Ok(SystemSpec {
        adjacency,
        stiffness_scale,
        base_stiffness,
        masses,
        regime_label,
    })
}

/// Knobs of the synthetic corpus. Defaults give a 60-system, 5-body corpus
/// with 100-frame cycles, trainable in minutes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_systems: usize,
    /// Inclusive range of trajectories drawn per system.
    pub cycles_per_system: (usize, usize),
    pub bodies: usize,
    pub frames: usize,
    pub dt: f64,
    pub base_stiffness: f64,
    pub stiffness_range: (f64, f64),
    pub mass_range: (f64, f64),
    pub edge_probability: f64,
    pub init_position_std: f64,
    pub init_velocity_std: f64,
    /// One interaction graph for the whole corpus (every system shares it),
    /// mirroring a skeleton shared across subjects. When false each system
    /// draws its own graph.
    pub shared_graph: bool,
    /// Ablation flag: drop the adjacency block from condition vectors.
    pub include_adjacency_in_condition: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_systems: 60,
            cycles_per_system: (3, 8),
            bodies: 5,
            frames: 100,
            dt: 0.05,
            base_stiffness: 1.0,
            stiffness_range: (0.5, 2.0),
            mass_range: (0.5, 1.5),
            edge_probability: 0.5,
            init_position_std: 0.8,
            init_velocity_std: 0.5,
            shared_graph: true,
            include_adjacency_in_condition: true,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_systems < 3 {
            return Err(Error::Config(format!(
                "n_systems = {} cannot support grouped folds (need at least 3)",
                self.n_systems
            )));
        }
        let (lo, hi) = self.cycles_per_system;
        if lo < 1 || lo > hi {
            return Err(Error::Config(format!("invalid cycle range [{lo}, {hi}]")));
        }
        if self.bodies < 2 {
            return Err(Error::Config("need at least 2 bodies".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("need at least 2 frames".into()));
        }
        if self.dt <= 0.0 || self.base_stiffness <= 0.0 {
            return Err(Error::Config("dt and stiffness must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_probability) {
            return Err(Error::Config("edge probability must lie in [0,1]".into()));
        }
        let ranges = [self.stiffness_range, self.mass_range];
        if ranges.iter().any(|(a, b)| *a <= 0.0 || a > b) {
            return Err(Error::Config("stiffness/mass ranges must be positive and ordered".into()));
        }
        Ok(())
    }

    pub fn condition_dim(&self) -> usize {
        condition_dim(self.bodies, self.include_adjacency_in_condition)
    }
}

/// Everything about a corpus except the samples themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub frames: usize,
    pub bodies: usize,
    pub features: usize,
    pub condition_dim: usize,
    pub n_systems: usize,
    pub seed: u64,
    /// Present when the corpus uses one graph for every system.
    pub shared_adjacency: Option<Adjacency>,
    pub config: CorpusConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SystemSample>,
}

impl Dataset {
    /// Checks the sample-level invariants: finite values and group-consistent
    /// conditions and regime labels.
    pub fn validate(&self) -> Result<()> {
        use std::collections::HashMap;
        let mut seen: HashMap<usize, (&[f64], usize)> = HashMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if !s.trajectory.is_finite() || s.condition.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("sample {i} has non-finite values")));
            }
            if s.condition.len() != self.meta.condition_dim {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} condition length {} != {}",
                    s.condition.len(),
                    self.meta.condition_dim
                )));
            }
            match seen.get(&s.group_id) {
                None => {
                    seen.insert(s.group_id, (&s.condition, s.regime_label));
                }
                Some(&(cond, regime)) => {
                    if cond != s.condition.as_slice() || regime != s.regime_label {
                        return Err(Error::InvalidArgument(format!(
                            "group {} has inconsistent condition/regime at sample {i}",
                            s.group_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn draw_adjacency(rng: &mut ChaCha8Rng, m: usize, edge_probability: f64) -> Adjacency {
    loop {
        let mut entries = vec![0u8; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                if rng.random::<f64>() < edge_probability {
                    entries[i * m + j] = 1;
                    entries[j * m + i] = 1;
                }
            }
        }
        let adj = Adjacency::new(m, entries).expect("construction is symmetric by loop");
        // A corpus with no interactions at all has nothing to learn; redraw.
        if adj.edge_count() > 0 {
            return adj;
        }
    }
}

struct SystemDraw {
    stiffness_scale: f64,
    masses: Vec<f64>,
    adjacency: Adjacency,
    initial_states: Vec<InitialState>,
}

/// Builds the corpus deterministically from `seed`. Each system owns the rng
/// stream `(seed, group_id)`, so per-system draws are order-independent and
/// simulation can run in parallel.
pub fn generate_dataset(config: &CorpusConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let m = config.bodies;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let shared = draw_adjacency(&mut master, m, config.edge_probability);

    let (lo, hi) = config.cycles_per_system;
    let pos_dist = Normal::new(0.0, config.init_position_std).expect("std is positive");
    let vel_dist = Normal::new(0.0, config.init_velocity_std).expect("std is positive");

    let draws: Vec<SystemDraw> = (0..config.n_systems)
        .map(|sys| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + sys as u64);
            let stiffness_scale = rng.random_range(config.stiffness_range.0..=config.stiffness_range.1);
            let masses = (0..m)
                .map(|_| rng.random_range(config.mass_range.0..=config.mass_range.1))
                .collect();
            let adjacency = if config.shared_graph {
                shared.clone()
            } else {
                draw_adjacency(&mut rng, m, config.edge_probability)
            };
            let cycles = rng.random_range(lo..=hi);
            let initial_states = (0..cycles)
                .map(|_| InitialState {
                    positions: (0..m)
                        .map(|_| [pos_dist.sample(&mut rng), pos_dist.sample(&mut rng)])
                        .collect(),
                    velocities: (0..m)
                        .map(|_| [vel_dist.sample(&mut rng), vel_dist.sample(&mut rng)])
                        .collect(),
                })
                .collect();
            SystemDraw {
                stiffness_scale,
                masses,
                adjacency,
                initial_states,
            }
        })
        .collect();

    // Regime label: stiffness above/below the corpus median.
    let mut scales: Vec<f64> = draws.iter().map(|d| d.stiffness_scale).collect();
    scales.sort_by(f64::total_cmp);
    let median = if scales.len() % 2 == 1 {
        scales[scales.len() / 2]
    } else {
        0.5 * (scales[scales.len() / 2 - 1] + scales[scales.len() / 2])
    };

    let samples: Vec<SystemSample> = draws
        .par_iter()
        .enumerate()
        .map(|(sys, draw)| -> Result<Vec<SystemSample>> {
            let spec = SystemSpec {
                adjacency: draw.adjacency.clone(),
                stiffness_scale: draw.stiffness_scale,
                base_stiffness: config.base_stiffness,
                masses: draw.masses.clone(),
                regime_label: usize::from(draw.stiffness_scale > median),
            };
            spec.validate()?;
            let condition =
                build_condition_vector(&spec, config.include_adjacency_in_condition);
            draw.initial_states
                .iter()
                .map(|init| {
                    let trajectory =
                        simulate_spring_system(&spec, config.frames, config.dt, init)?;
                    Ok(SystemSample {
                        trajectory,
                        condition: condition.clone(),
                        group_id: sys,
                        regime_label: spec.regime_label,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let meta = DatasetMeta {
        frames: config.frames,
        bodies: m,
        features: FEATURES_PER_BODY,
        condition_dim: config.condition_dim(),
        n_systems: config.n_systems,
        seed,
        shared_adjacency: config.shared_graph.then_some(shared),
        config: config.clone(),
    };
    let dataset = Dataset { meta, samples };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> CorpusConfig {
        CorpusConfig {
            n_systems: 5,
            cycles_per_system: (1, 1),
            bodies: 3,
            frames: 4,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn condition_vector_is_deterministic() {
        let spec = SystemSpec {
            adjacency: Adjacency::new(3, vec![0, 1, 0, 1, 0, 1, 0, 1, 0]).unwrap(),
            stiffness_scale: 1.4,
            base_stiffness: 1.0,
            masses: vec![1.0, 0.7, 1.2],
            regime_label: 1,
        };
        assert_eq!(
            build_condition_vector(&spec, true),
            build_condition_vector(&spec, true)
        );
    }

    #[test]
    fn condition_vector_layout_for_three_bodies() {
        let spec = SystemSpec {
            adjacency: Adjacency::new(3, vec![0, 1, 0, 1, 0, 1, 0, 1, 0]).unwrap(),
            stiffness_scale: 1.4,
            base_stiffness: 1.0,
            masses: vec![1.0, 0.7, 1.2],
            regime_label: 1,
        };
        let c = build_condition_vector(&spec, true);
        // 1 + 3 masses + 2 one-hot + 3 upper-triangle entries
        assert_eq!(c.len(), 9);
        assert_eq!(&c[6..], &[1.0, 0.0, 1.0]);
        assert_eq!(&c[4..6], &[0.0, 1.0]);
    }

    #[test]
    fn condition_vector_identifies_spec_on_a_fifty_spec_corpus() {
        let config = CorpusConfig {
            n_systems: 50,
            cycles_per_system: (1, 1),
            bodies: 4,
            frames: 2,
            shared_graph: false,
            ..CorpusConfig::default()
        };
        let ds = generate_dataset(&config, 99).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in &ds.samples {
            let spec = decode_condition_vector(&s.condition, 4, config.base_stiffness).unwrap();
            // decoding then re-encoding is the identity
            assert_eq!(
                build_condition_vector(&spec, true),
                s.condition,
                "group {}",
                s.group_id
            );
            let key: Vec<u64> = s.condition.iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(key), "duplicate condition vector");
        }
    }

    #[test]
    fn five_systems_one_cycle_each() {
        let ds = generate_dataset(&tiny_config(), 7).unwrap();
        assert_eq!(ds.samples.len(), 5);
        let groups: std::collections::HashSet<_> =
            ds.samples.iter().map(|s| s.group_id).collect();
        assert_eq!(groups.len(), 5);
    }

    #[test]
    fn same_seed_gives_bit_identical_dataset() {
        let a = generate_dataset(&tiny_config(), 1234).unwrap();
        let b = generate_dataset(&tiny_config(), 1234).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&tiny_config(), 1235).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cycle_counts_average_to_range_midpoint() {
        // Counting oracle: cycles ~ U{3..8} has mean 5.5. Keep the systems
        // tiny so this stays cheap.
        let config = CorpusConfig {
            n_systems: 60,
            cycles_per_system: (3, 8),
            bodies: 2,
            frames: 2,
            ..CorpusConfig::default()
        };
        let mut total = 0usize;
        let n_seeds = 40;
        for seed in 0..n_seeds {
            let ds = generate_dataset(&config, seed).unwrap();
            assert!((180..=480).contains(&ds.samples.len()));
            total += ds.samples.len();
        }
        let mean = total as f64 / n_seeds as f64;
        assert!(
            (mean - 5.5 * 60.0).abs() < 0.2 * 60.0,
            "mean corpus size {mean}"
        );
    }

    #[test]
    fn rejects_unsupported_configs() {
        let mut c = tiny_config();
        c.n_systems = 2;
        assert!(generate_dataset(&c, 0).is_err());
        let mut c = tiny_config();
        c.cycles_per_system = (3, 2);
        assert!(generate_dataset(&c, 0).is_err());
    }

    #[test]
    fn shared_graph_appears_in_every_condition_vector() {
        let ds = generate_dataset(&CorpusConfig { n_systems: 4, cycles_per_system: (2, 2), bodies: 3, frames: 3, ..CorpusConfig::default() }, 5).unwrap();
        let adj = ds.meta.shared_adjacency.as_ref().unwrap();
        let tri = adj.upper_triangle();
        for s in &ds.samples {
            assert_eq!(&s.condition[s.condition.len() - tri.len()..], tri.as_slice());
        }
    }
}
