//! Piecewise-constant controls `(phi, psi)` and their moderate-deviation
//! counterpart `(phi, vphi)`.
//!
//! Step `k` of a control acts on `[t_k, t_{k+1})`. `phi` is a drift shift in
//! `R^d`, `psi` a nonnegative tilt of the jump intensity on each mark cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    n_steps: usize,
    dim: usize,
    n_cells: usize,
    phi: Vec<f64>,
    psi: Vec<f64>,
    psi_bounds: (f64, f64),
}

/// Default admissible range for `psi` when none is specified.
pub const DEFAULT_PSI_BOUNDS: (f64, f64) = (1e-3, 1e3);

impl Control {
    pub fn new(
        n_steps: usize,
        dim: usize,
        n_cells: usize,
        phi: Vec<f64>,
        psi: Vec<f64>,
        psi_bounds: (f64, f64),
    ) -> Result<Self> {
        let c = Self {
            n_steps,
            dim,
            n_cells,
            phi,
            psi,
            psi_bounds,
        };
        c.validate()?;
        Ok(c)
    }

    /// The zero-cost control `(0, 1)`.
    pub fn null(grid: &TimeGrid, dim: usize, n_cells: usize) -> Self {
        Self::constant(grid, &vec![0.0; dim], 1.0, n_cells)
    }

    /// `phi` and `psi` constant in time (and across cells for `psi`).
    pub fn constant(grid: &TimeGrid, phi: &[f64], psi: f64, n_cells: usize) -> Self {
        let n = grid.n_steps();
        let lo = DEFAULT_PSI_BOUNDS.0.min(psi);
        let hi = DEFAULT_PSI_BOUNDS.1.max(psi);
        Self {
            n_steps: n,
            dim: phi.len(),
            n_cells,
            phi: phi.iter().copied().cycle().take(n * phi.len()).collect(),
            psi: vec![psi; n * n_cells],
            psi_bounds: (lo, hi),
        }
    }

    /// Build a control from coefficients on `segments` equal blocks of steps.
    /// `phi_seg` is `segments x dim`, `psi_seg` is `segments x n_cells`.
    pub fn from_segments(
        grid: &TimeGrid,
        segments: usize,
        dim: usize,
        n_cells: usize,
        phi_seg: &[f64],
        psi_seg: &[f64],
        psi_bounds: (f64, f64),
    ) -> Result<Self> {
        let n = grid.n_steps();
        if segments == 0 || segments > n {
            return Err(Error::InvalidArgument(format!(
                "segments must lie in 1..={n}, got {segments}"
            )));
        }
        if phi_seg.len() != segments * dim || psi_seg.len() != segments * n_cells {
            return Err(Error::InvalidArgument("segment coefficient length mismatch".into()));
        }
        let mut phi = Vec::with_capacity(n * dim);
        let mut psi = Vec::with_capacity(n * n_cells);
        for k in 0..n {
            let s = segment_of(k, n, segments);
            phi.extend_from_slice(&phi_seg[s * dim..(s + 1) * dim]);
            psi.extend_from_slice(&psi_seg[s * n_cells..(s + 1) * n_cells]);
        }
        Self::new(n, dim, n_cells, phi, psi, psi_bounds)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.psi_bounds;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidControl(format!(
                "psi bounds must satisfy 0 < lo <= hi < inf, got ({lo}, {hi})"
            )));
        }
        if self.phi.len() != self.n_steps * self.dim {
            return Err(Error::InvalidControl("phi length mismatch".into()));
        }
        if self.psi.len() != self.n_steps * self.n_cells {
            return Err(Error::InvalidControl("psi length mismatch".into()));
        }
        if let Some(v) = self.phi.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidControl(format!("non-finite phi value {v}")));
        }
        if let Some((i, v)) = self
            .psi
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v >= lo && v <= hi))
        {
            return Err(Error::InvalidControl(format!(
                "psi cell (step {}, cell {}) = {v} outside [{lo}, {hi}]",
                i / self.n_cells.max(1),
                i % self.n_cells.max(1)
            )));
        }
        Ok(())
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if grid.n_steps() != self.n_steps {
            return Err(Error::IncompatibleGrids(format!(
                "control has {} steps, grid has {}",
                self.n_steps,
                grid.n_steps()
            )));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn psi_bounds(&self) -> (f64, f64) {
        self.psi_bounds
    }

    pub fn phi(&self, k: usize) -> &[f64] {
        &self.phi[k * self.dim..(k + 1) * self.dim]
    }

    pub fn psi_row(&self, k: usize) -> &[f64] {
        &self.psi[k * self.n_cells..(k + 1) * self.n_cells]
    }

    pub fn psi(&self, k: usize, cell: usize) -> f64 {
        self.psi[k * self.n_cells + cell]
    }

    pub fn phi_values(&self) -> &[f64] {
        &self.phi
    }

    pub fn psi_values(&self) -> &[f64] {
        &self.psi
    }

    /// Whether step `k` carries a nonzero drift shift.
    pub fn has_phi(&self, k: usize) -> bool {
        self.phi(k).iter().any(|&v| v != 0.0)
    }
}

/// Controls of the moderate-deviation skeleton: `phi` as above and a signed
/// square-integrable jump tilt `vphi = (psi - 1) / a(eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpControl {
    pub n_steps: usize,
    pub dim: usize,
    pub n_cells: usize,
    pub phi: Vec<f64>,
    pub vphi: Vec<f64>,
}

impl MdpControl {
    pub fn zero(grid: &TimeGrid, dim: usize, n_cells: usize) -> Self {
        let n = grid.n_steps();
        Self {
            n_steps: n,
            dim,
            n_cells,
            phi: vec![0.0; n * dim],
            vphi: vec![0.0; n * n_cells],
        }
    }

    pub fn constant(grid: &TimeGrid, phi: &[f64], vphi: f64, n_cells: usize) -> Self {
        let n = grid.n_steps();
        Self {
            n_steps: n,
            dim: phi.len(),
            n_cells,
            phi: phi.iter().copied().cycle().take(n * phi.len()).collect(),
            vphi: vec![vphi; n * n_cells],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi.len() != self.n_steps * self.dim || self.vphi.len() != self.n_steps * self.n_cells
        {
            return Err(Error::InvalidControl("MDP control length mismatch".into()));
        }
        if self.phi.iter().chain(&self.vphi).any(|v| !v.is_finite()) {
            return Err(Error::InvalidControl("non-finite MDP control value".into()));
        }
        Ok(())
    }

    pub fn phi(&self, k: usize) -> &[f64] {
        &self.phi[k * self.dim..(k + 1) * self.dim]
    }

    pub fn vphi_row(&self, k: usize) -> &[f64] {
        &self.vphi[k * self.n_cells..(k + 1) * self.n_cells]
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &MdpControl, beta: f64) -> MdpControl {
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| alpha * x + beta * y).collect();
        MdpControl {
            n_steps: self.n_steps,
            dim: self.dim,
            n_cells: self.n_cells,
            phi: mix(&self.phi, &other.phi),
            vphi: mix(&self.vphi, &other.vphi),
        }
    }
}

/// Segment index of step `k` when `n` steps are split into `segments` blocks.
pub(crate) fn segment_of(k: usize, n: usize, segments: usize) -> usize {
    (k * segments / n).min(segments - 1)
}
