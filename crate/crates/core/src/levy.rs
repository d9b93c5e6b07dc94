//! Finite intensity measures on the mark space and exact sampling of Poisson
//! random measures, plain and intensity-tilted.
//!
//! The tilted measure `N^psi` is realized as in the lifted construction: a
//! Poisson random measure on `[0,T] x Z x R_+` with intensity
//! `rate * Leb x nu x Leb`, of which the points with auxiliary coordinate
//! `r <= psi(s, z)` are kept. Only `r` up to `max(1, max psi)` is ever
//! sampled, in independent unit-height slabs `(0, 1]`, `(1, 2]`, ... The
//! first slab alone is exactly the untilted measure, so with a shared seed
//! the tilted stream at `psi == 1` coincides event-for-event with
//! [`sample_prm`], and the accepted set is monotone in the tilt.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::control::Control;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::rng_from;

/// Atomic measure `sum_j mass_j * delta_{z_j}` on `R^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityMeasure {
    mark_dim: usize,
    marks: Vec<f64>,
    masses: Vec<f64>,
    total_mass: f64,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl IntensityMeasure {
    pub fn new(mark_dim: usize, cells: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        if mark_dim == 0 {
            return Err(Error::InvalidArgument("mark dimension must be positive".into()));
        }
        if cells.is_empty() {
            return Err(Error::InvalidArgument("intensity measure needs at least one cell".into()));
        }
        let mut marks = Vec::with_capacity(cells.len() * mark_dim);
        let mut masses = Vec::with_capacity(cells.len());
        for (j, (z, m)) in cells.into_iter().enumerate() {
            if z.len() != mark_dim {
                return Err(Error::InvalidArgument(format!(
                    "cell {j}: mark has dimension {}, expected {mark_dim}",
                    z.len()
                )));
            }
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "cell {j}: mass must be positive and finite, got {m}"
                )));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("cell {j}: non-finite mark")));
            }
            marks.extend(z);
            masses.push(m);
        }
        let mut s = Self {
            mark_dim,
            marks,
            masses,
            total_mass: 0.0,
            cumulative: Vec::new(),
        };
        s.rebuild();
        Ok(s)
    }

    /// One cell of the given mass at mark `z`.
    pub fn single(z: Vec<f64>, mass: f64) -> Result<Self> {
        let k = z.len();
        Self::new(k, vec![(z, mass)])
    }

    fn rebuild(&mut self) {
        self.total_mass = self.masses.iter().sum();
        let mut acc = 0.0;
        self.cumulative = self
            .masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
    }

    pub fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    pub fn n_cells(&self) -> usize {
        self.masses.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn mark(&self, j: usize) -> &[f64] {
        &self.marks[j * self.mark_dim..(j + 1) * self.mark_dim]
    }

    pub fn mass(&self, j: usize) -> f64 {
        self.masses[j]
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn cells(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.marks.chunks(self.mark_dim).zip(self.masses.iter().copied())
    }

    fn sample_cell<R: Rng>(&self, rng: &mut R) -> usize {
        if self.cumulative.len() != self.masses.len() {
            // deserialized without the cache
            let mut acc = 0.0;
            let u = rng.random::<f64>() * self.masses.iter().sum::<f64>();
            for (j, m) in self.masses.iter().enumerate() {
                acc += m;
                if u < acc {
                    return j;
                }
            }
            return self.masses.len() - 1;
        }
        let u = rng.random::<f64>() * self.total_mass;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.masses.len() - 1)
    }

    /// `sum_j f(z_j) nu_j`.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (j, (z, m)) in self.cells().enumerate() {
            let v = f(z);
            if !v.is_finite() {
                return Err(Error::Numeric(format!("integrand non-finite on cell {j}: {v}")));
            }
            acc += v * m;
        }
        Ok(acc)
    }
}

/// `int_Z f(z) nu(dz)` on an atomic measure.
pub fn cell_integral<F: FnMut(&[f64]) -> f64>(m: &IntensityMeasure, f: F) -> Result<f64> {
    m.integrate(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub cell: usize,
}

/// Time-ordered realization of a (possibly tilted) Poisson random measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpStream {
    pub events: Vec<JumpEvent>,
    pub rate_scale: f64,
    pub horizon: f64,
}

impl JumpStream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of events in each cell.
    pub fn cell_counts(&self, n_cells: usize) -> Vec<usize> {
        let mut c = vec![0; n_cells];
        for e in &self.events {
            c[e.cell] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy)]
struct LiftedPoint {
    time: f64,
    cell: usize,
    r: f64,
}

/// Points of the lifted measure with `r` in `(r_lo, r_hi]`.
fn sample_layer(
    m: &IntensityMeasure,
    rate_scale: f64,
    horizon: f64,
    r_lo: f64,
    r_hi: f64,
    seed: u64,
    stream: u64,
) -> Result<Vec<LiftedPoint>> {
    let mean = rate_scale * m.total_mass() * horizon * (r_hi - r_lo);
    if !mean.is_finite() {
        return Err(Error::Numeric(format!("non-finite Poisson mean {mean}")));
    }
    if mean <= 0.0 {
        return Ok(Vec::new());
    }
    let mut rng = rng_from(seed);
    rng.set_stream(stream);
    let count = Poisson::new(mean)
        .map_err(|e| Error::Numeric(format!("Poisson({mean}): {e}")))?
        .sample(&mut rng) as usize;
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count {
        // 1 - U lies in (0, 1], so times land in (0, T] and r in (r_lo, r_hi]
        let time = horizon * (1.0 - rng.random::<f64>());
        let cell = m.sample_cell(&mut rng);
        let r = r_lo + (r_hi - r_lo) * (1.0 - rng.random::<f64>());
        pts.push(LiftedPoint { time, cell, r });
    }
    Ok(pts)
}

fn check_rate(rate_scale: f64) -> Result<()> {
    if !(rate_scale > 0.0 && rate_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "rate_scale must be positive, got {rate_scale}"
        )));
    }
    Ok(())
}

fn finish(mut events: Vec<JumpEvent>, rate_scale: f64, horizon: f64) -> JumpStream {
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    JumpStream {
        events,
        rate_scale,
        horizon,
    }
}

/// Poisson random measure with intensity `rate_scale * Leb_[0,T] x nu`.
pub fn sample_prm(
    m: &IntensityMeasure,
    rate_scale: f64,
    grid: &TimeGrid,
    seed: u64,
) -> Result<JumpStream> {
    check_rate(rate_scale)?;
    let pts = sample_layer(m, rate_scale, grid.horizon(), 0.0, 1.0, seed, 0)?;
    let events = pts
        .into_iter()
        .map(|p| JumpEvent {
            time: p.time,
            cell: p.cell,
        })
        .collect();
    Ok(finish(events, rate_scale, grid.horizon()))
}

/// Poisson random measure with intensity `rate_scale * psi(s, z) * Leb x nu`,
/// by acceptance from the lifted measure up to the largest tilt used.
pub fn sample_controlled_prm(
    m: &IntensityMeasure,
    psi: &Control,
    rate_scale: f64,
    grid: &TimeGrid,
    seed: u64,
) -> Result<JumpStream> {
    check_rate(rate_scale)?;
    psi.validate()?;
    psi.check_grid(grid)?;
    if psi.n_cells() != m.n_cells() {
        return Err(Error::InvalidControl(format!(
            "psi has {} mark cells, intensity has {}",
            psi.n_cells(),
            m.n_cells()
        )));
    }
    let top = psi.psi_values().iter().copied().fold(1.0, f64::max);
    let mut pts = sample_layer(m, rate_scale, grid.horizon(), 0.0, 1.0, seed, 0)?;
    for slab in 1..top.ceil() as u64 {
        let lo = slab as f64;
        pts.extend(sample_layer(m, rate_scale, grid.horizon(), lo, lo + 1.0, seed, slab)?);
    }
    let events = pts
        .into_iter()
        .filter(|p| p.r <= psi.psi(grid.step_containing(p.time), p.cell))
        .map(|p| JumpEvent {
            time: p.time,
            cell: p.cell,
        })
        .collect();
    Ok(finish(events, rate_scale, grid.horizon()))
}
