//! Time grids on `[0, T]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    nodes: Vec<f64>,
    uniform: bool,
}

impl TimeGrid {
    /// Uniform grid with `n_steps + 1` nodes.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        let dt = horizon / n_steps as f64;
        let mut nodes: Vec<f64> = (0..=n_steps).map(|k| k as f64 * dt).collect();
        // pin the last node exactly, k * dt may round away from T
        nodes[n_steps] = horizon;
        Ok(Self {
            horizon,
            nodes,
            uniform: true,
        })
    }

    /// Arbitrary strictly increasing nodes starting at 0.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidArgument("grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidArgument("first node must be 0".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::InvalidArgument(
                "nodes must be finite and strictly increasing".into(),
            ));
        }
        let horizon = *nodes.last().unwrap();
        Ok(Self {
            horizon,
            nodes,
            uniform: false,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    /// Length of step `k`, i.e. `t_{k+1} - t_k`.
    pub fn dt(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    /// Index of the largest node `<= t`.
    pub fn floor_index(&self, t: f64) -> usize {
        let idx = self.nodes.partition_point(|&s| s <= t);
        idx.saturating_sub(1).min(self.n_steps())
    }

    /// Step `k` with `t_k < s <= t_{k+1}`, for event times in `(0, T]`.
    pub fn step_containing(&self, s: f64) -> usize {
        let idx = self.nodes.partition_point(|&u| u < s);
        idx.saturating_sub(1).min(self.n_steps() - 1)
    }

    /// Same grid with every step halved.
    pub fn refined(&self) -> Self {
        let mut nodes = Vec::with_capacity(2 * self.nodes.len() - 1);
        for w in self.nodes.windows(2) {
            nodes.push(w[0]);
            nodes.push(0.5 * (w[0] + w[1]));
        }
        nodes.push(self.horizon);
        Self {
            horizon: self.horizon,
            nodes,
            uniform: self.uniform,
        }
    }

    pub fn check_same(&self, other: &TimeGrid) -> Result<()> {
        if self.nodes.len() != other.nodes.len()
            || self
                .nodes
                .iter()
                .zip(&other.nodes)
                .any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + a.abs()))
        {
            return Err(Error::IncompatibleGrids(format!(
                "{} nodes on [0,{}] vs {} nodes on [0,{}]",
                self.nodes.len(),
                self.horizon,
                other.nodes.len(),
                other.horizon
            )));
        }
        Ok(())
    }
}
