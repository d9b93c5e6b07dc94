//! Equal-weight empirical measures and the Wasserstein-2 distance between
//! them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::{euclid, norm_sq};

/// Largest atom count for which [`wasserstein2`] solves the assignment
/// problem exactly in `d >= 2`.
pub const EXACT_ASSIGNMENT_LIMIT: usize = 256;

/// `N` atoms in `R^d`, each of weight `1/N`, stored atom-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if atoms.is_empty() {
            return Err(Error::InvalidArgument("empirical measure needs at least one atom".into()));
        }
        if atoms.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} coordinates do not split into {dim}-dimensional atoms",
                atoms.len()
            )));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("atoms must be finite".into()));
        }
        Ok(Self { dim, atoms })
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(point.len(), point.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        mean_of(&self.atoms, self.dim)
    }

    /// `int |y|^2 mu(dy)`.
    pub fn second_moment(&self) -> f64 {
        norm_sq(&self.atoms) / self.len() as f64
    }
}

pub(crate) fn mean_of(atoms: &[f64], dim: usize) -> Vec<f64> {
    let n = atoms.len() / dim;
    let mut m = vec![0.0; dim];
    for a in atoms.chunks_exact(dim) {
        for (mi, ai) in m.iter_mut().zip(a) {
            *mi += ai;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

pub fn mean(mu: &EmpiricalMeasure) -> Vec<f64> {
    mu.mean()
}

pub fn second_moment(mu: &EmpiricalMeasure) -> f64 {
    mu.second_moment()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2 {
    pub value: f64,
    /// False when the value comes from the greedy assignment and is only an
    /// upper bound.
    pub exact: bool,
}

/// Wasserstein-2 distance between clouds of equal size.
pub fn wasserstein2(mu1: &EmpiricalMeasure, mu2: &EmpiricalMeasure) -> Result<W2> {
    if mu1.dim != mu2.dim {
        return Err(Error::Unsupported(format!(
            "dimensions differ: {} vs {}",
            mu1.dim, mu2.dim
        )));
    }
    let n = mu1.len();
    if n != mu2.len() {
        return Err(Error::Unsupported(format!(
            "unequal atom counts {} and {}",
            n,
            mu2.len()
        )));
    }
    if mu1.dim == 1 {
        let mut a = mu1.atoms.clone();
        let mut b = mu2.atoms.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let c: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok(W2 {
            value: (c / n as f64).sqrt(),
            exact: true,
        });
    }
    let cost = |i: usize, j: usize| {
        let d = euclid(mu1.atom(i), mu2.atom(j));
        d * d
    };
    let (perm, exact) = if n <= EXACT_ASSIGNMENT_LIMIT {
        (hungarian(n, cost), true)
    } else {
        (greedy_refined(n, cost), false)
    };
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
    Ok(W2 {
        value: (total / n as f64).sqrt(),
        exact,
    })
}

/// Minimum-cost perfect assignment (shortest augmenting path with
/// potentials, O(n^3)). Returns `perm[row] = column`.
pub fn hungarian<C: Fn(usize, usize) -> f64>(n: usize, cost: C) -> Vec<usize> {
    let inf = f64::INFINITY;
    // 1-based arrays, index 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

/// Greedy nearest-column assignment improved by pairwise swaps until no
/// swap lowers the cost.
fn greedy_refined<C: Fn(usize, usize) -> f64>(n: usize, cost: C) -> Vec<usize> {
    let mut taken = vec![false; n];
    let mut perm = Vec::with_capacity(n);
    for i in 0..n {
        let j = (0..n)
            .filter(|&j| !taken[j])
            .min_by(|&a, &b| cost(i, a).total_cmp(&cost(i, b)))
            .unwrap();
        taken[j] = true;
        perm.push(j);
    }
    for _ in 0..50 {
        let mut improved = false;
        for a in 0..n {
            for b in a + 1..n {
                let before = cost(a, perm[a]) + cost(b, perm[b]);
                let after = cost(a, perm[b]) + cost(b, perm[a]);
                if after < before - 1e-15 * before.abs() {
                    perm.swap(a, b);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    perm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub w2: f64,
    /// `sqrt(mean_i |x_i - y_i|^2)` for the index-aligned coupling.
    pub coupling_cost: f64,
    pub exact: bool,
}

/// `W2(x, y) <= sqrt(mean_i |x_i - y_i|^2)` for index-aligned clouds.
pub fn coupling_bound_check(
    x_cloud: &EmpiricalMeasure,
    y_cloud: &EmpiricalMeasure,
) -> Result<CouplingReport> {
    let w = wasserstein2(x_cloud, y_cloud)?;
    let n = x_cloud.len();
    let aligned: f64 = (0..n)
        .map(|i| {
            let d = euclid(x_cloud.atom(i), y_cloud.atom(i));
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let coupling_cost = aligned.sqrt();
    if w.value > coupling_cost + 1e-12 {
        return Err(Error::InvariantFailure(format!(
            "W2 = {} exceeds aligned coupling cost {}",
            w.value, coupling_cost
        )));
    }
    Ok(CouplingReport {
        w2: w.value,
        coupling_cost,
        exact: w.exact,
    })
}
