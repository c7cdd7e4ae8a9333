//! Synthetic conditioned spring-system corpus: simulator, dataset generation,
//! trajectory normalization, leakage-free grouped splits, and the on-disk
//! dataset format.

mod dataset;
mod folds;
mod io;
mod normalize;
mod sim;

pub use dataset::{
    build_condition_vector, decode_condition_vector, generate_dataset, CorpusConfig, Dataset,
    DatasetMeta, SystemSample, SystemSpec,
};
pub use folds::{grouped_kfold, FoldSplit};
pub use io::{export_dataset_json, read_dataset, write_dataset, DATASET_FORMAT_VERSION};
pub(crate) use io::hex_bytes;
pub use normalize::NormalizationStats;
pub use sim::{simulate_spring_system, total_energy, InitialState};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Features per body: planar position then velocity.
pub const FEATURES_PER_BODY: usize = 4;

/// One system rollout. Shape `[T, M, D]` with `D = 4` (x, y, vx, vy).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    tensor: Tensor,
}

impl Trajectory {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::InvalidArgument(format!(
                "trajectory must be rank 3 (T x M x D), got {:?}",
                tensor.shape()
            )));
        }
        Ok(Trajectory { tensor })
    }

    pub fn zeros(t: usize, m: usize, d: usize) -> Self {
        Trajectory {
            tensor: Tensor::zeros(vec![t, m, d]),
        }
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn bodies(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn at(&self, t: usize, m: usize, d: usize) -> f64 {
        let (bodies, feats) = (self.bodies(), self.features());
        self.tensor.data()[(t * bodies + m) * feats + d]
    }

    pub fn set(&mut self, t: usize, m: usize, d: usize, v: f64) {
        let (bodies, feats) = (self.bodies(), self.features());
        self.tensor.data_mut()[(t * bodies + m) * feats + d] = v;
    }

    /// Frame `t` as an `[M, D]` tensor.
    pub fn frame(&self, t: usize) -> Tensor {
        let (m, d) = (self.bodies(), self.features());
        let start = t * m * d;
        Tensor::from_vec(vec![m, d], self.tensor.data()[start..start + m * d].to_vec()).unwrap()
    }

    pub fn set_frame(&mut self, t: usize, frame: &Tensor) {
        let (m, d) = (self.bodies(), self.features());
        assert_eq!(frame.shape(), &[m, d], "frame shape mismatch");
        let start = t * m * d;
        self.tensor.data_mut()[start..start + m * d].copy_from_slice(frame.data());
    }

    /// Per-body layout `[M, T*D]`: body j's full trajectory flattened in time
    /// order. This is the encoder input layout.
    pub fn body_major(&self) -> Tensor {
        let (t, m, d) = (self.frames(), self.bodies(), self.features());
        let mut out = vec![0.0; t * m * d];
        for ti in 0..t {
            for mi in 0..m {
                for di in 0..d {
                    out[mi * (t * d) + ti * d + di] = self.at(ti, mi, di);
                }
            }
        }
        Tensor::from_vec(vec![m, t * d], out).unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.tensor.is_finite()
    }

    /// Mean squared difference over all entries of frames `2..T` (the first
    /// frame is given, not generated).
    pub fn mse_from_second_frame(&self, other: &Trajectory) -> f64 {
        assert_eq!(self.tensor.shape(), other.tensor.shape(), "trajectory shape mismatch");
        let (t, m, d) = (self.frames(), self.bodies(), self.features());
        let skip = m * d;
        let a = &self.tensor.data()[skip..];
        let b = &other.tensor.data()[skip..];
        let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        sum / ((t - 1) * m * d) as f64
    }
}

/// Symmetric binary adjacency with zero diagonal.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Adjacency {
    m: usize,
    entries: Vec<u8>,
}

impl Adjacency {
    pub fn new(m: usize, entries: Vec<u8>) -> Result<Self> {
        if entries.len() != m * m {
            return Err(Error::InvalidArgument(format!(
                "adjacency for {m} bodies needs {} entries, got {}",
                m * m,
                entries.len()
            )));
        }
        for i in 0..m {
            for j in 0..m {
                let v = entries[i * m + j];
                if v > 1 {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency entry ({i},{j}) = {v} is not binary"
                    )));
                }
                if i == j && v != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency has self-loop at body {i}"
                    )));
                }
                if entries[i * m + j] != entries[j * m + i] {
                    return Err(Error::InvalidArgument(format!(
                        "adjacency is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Adjacency { m, entries })
    }

    pub fn empty(m: usize) -> Self {
        Adjacency {
            m,
            entries: vec![0; m * m],
        }
    }

    /// Fully connected off-diagonal graph.
    pub fn complete(m: usize) -> Self {
        let mut entries = vec![1; m * m];
        for i in 0..m {
            entries[i * m + i] = 0;
        }
        Adjacency { m, entries }
    }

    pub fn bodies(&self) -> usize {
        self.m
    }

    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.m + j] == 1
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    /// Row-major upper triangle (i < j), the layout used inside condition
    /// vectors.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.m * (self.m - 1) / 2);
        for i in 0..self.m {
            for j in (i + 1)..self.m {
                out.push(self.entries[i * self.m + j] as f64);
            }
        }
        out
    }

    pub fn from_upper_triangle(m: usize, tri: &[f64]) -> Result<Self> {
        if tri.len() != m * (m - 1) / 2 {
            return Err(Error::InvalidArgument(format!(
                "upper triangle for {m} bodies needs {} entries, got {}",
                m * (m - 1) / 2,
                tri.len()
            )));
        }
        let mut entries = vec![0u8; m * m];
        let mut at = 0;
        for i in 0..m {
            for j in (i + 1)..m {
                let bit = if tri[at] > 0.5 { 1 } else { 0 };
                entries[i * m + j] = bit;
                entries[j * m + i] = bit;
                at += 1;
            }
        }
        at = tri.len();
        let _ = at;
        Adjacency::new(m, entries)
    }

    pub fn edge_count(&self) -> usize {
        self.entries.iter().map(|&v| v as usize).sum::<usize>() / 2
    }
}
