//! Grid-indexed paths in `R^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Right-continuous step function through the node values.
    CadlagStep,
    Linear,
}

/// A path sampled on a [`TimeGrid`]; values are stored node-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
    interpolation: Interpolation,
}

impl Path {
    pub fn new(
        grid: TimeGrid,
        dim: usize,
        values: Vec<f64>,
        interpolation: Interpolation,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("path dimension must be positive".into()));
        }
        if values.len() != grid.n_nodes() * dim {
            return Err(Error::InvalidArgument(format!(
                "path has {} values, expected {} nodes x {} dims",
                values.len(),
                grid.n_nodes(),
                dim
            )));
        }
        Ok(Self {
            grid,
            dim,
            values,
            interpolation,
        })
    }

    /// Path that stays at `point` on every node.
    pub fn constant(grid: TimeGrid, point: &[f64], interpolation: Interpolation) -> Self {
        let values = point
            .iter()
            .copied()
            .cycle()
            .take(point.len() * grid.n_nodes())
            .collect();
        Self {
            dim: point.len(),
            grid,
            values,
            interpolation,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at node `k`.
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.grid.n_steps())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let horizon = self.grid.horizon();
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::OutOfRange { t, horizon });
        }
        let k = self.grid.floor_index(t);
        match self.interpolation {
            Interpolation::CadlagStep => Ok(self.at(k).to_vec()),
            Interpolation::Linear => {
                if k == self.grid.n_steps() {
                    return Ok(self.at(k).to_vec());
                }
                let (t0, t1) = (self.grid.node(k), self.grid.node(k + 1));
                let w = (t - t0) / (t1 - t0);
                Ok(self
                    .at(k)
                    .iter()
                    .zip(self.at(k + 1))
                    .map(|(a, b)| a + w * (b - a))
                    .collect())
            }
        }
    }

    /// Uniform distance over the shared grid nodes.
    pub fn sup_distance(&self, other: &Path) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        if self.dim != other.dim {
            return Err(Error::IncompatibleGrids(format!(
                "dimension {} vs {}",
                self.dim, other.dim
            )));
        }
        Ok(self
            .values
            .chunks(self.dim)
            .zip(other.values.chunks(self.dim))
            .map(|(a, b)| euclid(a, b))
            .fold(0.0, f64::max))
    }
}

pub fn path_sup_distance(p1: &Path, p2: &Path) -> Result<f64> {
    p1.sup_distance(p2)
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}
