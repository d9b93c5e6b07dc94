//! Deterministic solvers: the limit equation, the large-deviation skeleton
//! with the law frozen at the limit path, and the linear moderate-deviation
//! skeleton.

use serde::{Deserialize, Serialize};

use crate::control::{Control, MdpControl};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{LawSummary, ModelSpec};
use crate::path::{Interpolation, Path};

/// States beyond this magnitude are treated as a blow-up.
pub const OVERFLOW_GUARD: f64 = 1e150;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-10,
            damping: 1.0,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 || !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Picard config needs max_iters >= 1, tol > 0, damping in (0, 1]: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSolution {
    pub path: Path,
    pub iterations: usize,
    pub residual: f64,
}

fn guard(x: &[f64], step: usize, what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_GUARD) {
        return Err(Error::Diverged {
            step,
            detail: format!("{what} left the overflow guard"),
        });
    }
    Ok(())
}

fn check_dims(spec: &ModelSpec, grid: &TimeGrid) -> Result<()> {
    if (grid.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon.max(1.0) {
        return Err(Error::IncompatibleGrids(format!(
            "grid horizon {} differs from model horizon {}",
            grid.horizon(),
            spec.horizon
        )));
    }
    Ok(())
}

/// Classical RK4 on `y' = f(t, y)` with a step-indexed right-hand side.
fn rk4<F>(grid: &TimeGrid, y0: &[f64], what: &str, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, &[f64], &mut [f64]),
{
    let d = y0.len();
    let n = grid.n_steps();
    let mut out = Vec::with_capacity((n + 1) * d);
    out.extend_from_slice(y0);
    let mut y = y0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for k in 0..n {
        let (t, h) = (grid.node(k), grid.dt(k));
        f(k, t, &y, &mut k1);
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        f(k, t + 0.5 * h, &tmp, &mut k2);
        for i in 0..d {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        f(k, t + 0.5 * h, &tmp, &mut k3);
        for i in 0..d {
            tmp[i] = y[i] + h * k3[i];
        }
        f(k, t + h, &tmp, &mut k4);
        for i in 0..d {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        guard(&y, k + 1, what)?;
        out.extend_from_slice(&y);
    }
    Ok(out)
}

/// The limit equation `x' = b(t, x, delta_x)`, `x(0) = h`, by RK4.
pub fn solve_limit_ode(spec: &ModelSpec, grid: &TimeGrid) -> Result<Path> {
    check_dims(spec, grid)?;
    let c = &spec.coefficients;
    let values = rk4(grid, &spec.initial, "limit path", |_, t, y, out| {
        c.drift(t, y, &LawSummary::Dirac(y), 0.0, out)
    })?;
    Path::new(grid.clone(), spec.dim, values, Interpolation::Linear)
}

/// Right-hand side of the skeleton in defect form relative to `X^0`.
struct SkeletonRhs<'a> {
    spec: &'a ModelSpec,
    drift: Vec<f64>,
    drift0: Vec<f64>,
    sigma: Vec<f64>,
    scratch: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> SkeletonRhs<'a> {
    fn new(spec: &'a ModelSpec) -> Self {
        let d = spec.dim;
        Self {
            spec,
            drift: vec![0.0; d],
            drift0: vec![0.0; d],
            sigma: vec![0.0; d * d],
            scratch: vec![0.0; d],
            weights: vec![0.0; spec.n_cells()],
        }
    }

    /// `b(t,y,mu0) - b(t,x0,mu0) + sigma(t,y,mu0) phi + sum_j G(t,y,mu0,z_j)(psi_j - 1) nu_j`.
    fn eval(&mut self, t: f64, y: &[f64], x0: &[f64], u: &Control, k: usize, out: &mut [f64]) {
        let d = self.spec.dim;
        let c = &self.spec.coefficients;
        let law = LawSummary::Dirac(x0);
        c.drift(t, y, &law, 0.0, &mut self.drift);
        c.drift(t, x0, &law, 0.0, &mut self.drift0);
        for i in 0..d {
            out[i] = self.drift[i] - self.drift0[i];
        }
        if u.has_phi(k) {
            c.diffusion(t, y, &law, 0.0, &mut self.sigma);
            let phi = u.phi(k);
            for i in 0..d {
                out[i] += (0..d).map(|j| self.sigma[i * d + j] * phi[j]).sum::<f64>();
            }
        }
        if self.spec.has_jumps() {
            let mut any = false;
            for (w, &p) in self.weights.iter_mut().zip(u.psi_row(k)) {
                *w = p - 1.0;
                any |= p != 1.0;
            }
            if any {
                self.spec
                    .add_jump_integral(t, y, &law, 0.0, Some(&self.weights), &mut self.scratch, out);
            }
        }
    }
}

fn check_control(spec: &ModelSpec, u: &Control, grid: &TimeGrid) -> Result<()> {
    u.validate()?;
    u.check_grid(grid)?;
    if u.dim() != spec.dim || u.n_cells() != spec.n_cells() {
        return Err(Error::InvalidControl(format!(
            "control shape (dim {}, cells {}) does not match model (dim {}, cells {})",
            u.dim(),
            u.n_cells(),
            spec.dim,
            spec.n_cells()
        )));
    }
    Ok(())
}

/// The controlled skeleton with law frozen at `delta_{X^0(t)}`, by Picard
/// iteration on the integral equation (trapezoidal quadrature, the step-k
/// control used at both ends of step k).
pub fn solve_ldp_skeleton(
    spec: &ModelSpec,
    x0: &Path,
    u: &Control,
    grid: &TimeGrid,
    cfg: &PicardConfig,
) -> Result<SkeletonSolution> {
    cfg.validate()?;
    check_dims(spec, grid)?;
    x0.grid().check_same(grid)?;
    check_control(spec, u, grid)?;
    let d = spec.dim;
    let n = grid.n_steps();
    let mut rhs = SkeletonRhs::new(spec);
    let mut y = x0.values().to_vec();
    let mut next = vec![0.0; y.len()];
    let (mut fl, mut fr) = (vec![0.0; d], vec![0.0; d]);
    let mut residual = f64::INFINITY;
    for iter in 1..=cfg.max_iters {
        let mut defect = vec![0.0; d];
        next[..d].copy_from_slice(x0.at(0));
        for k in 0..n {
            let (t0, t1, h) = (grid.node(k), grid.node(k + 1), grid.dt(k));
            rhs.eval(t0, &y[k * d..(k + 1) * d], x0.at(k), u, k, &mut fl);
            rhs.eval(t1, &y[(k + 1) * d..(k + 2) * d], x0.at(k + 1), u, k, &mut fr);
            for i in 0..d {
                defect[i] += 0.5 * h * (fl[i] + fr[i]);
                next[(k + 1) * d + i] = x0.at(k + 1)[i] + defect[i];
            }
            guard(&defect, k + 1, "skeleton iterate")?;
        }
        residual = 0.0;
        for k in 0..=n {
            let mut s = 0.0;
            for i in 0..d {
                let delta = next[k * d + i] - y[k * d + i];
                s += delta * delta;
            }
            residual = f64::max(residual, s.sqrt());
        }
        if cfg.damping == 1.0 {
            std::mem::swap(&mut y, &mut next);
        } else {
            for (a, b) in y.iter_mut().zip(&next) {
                *a += cfg.damping * (b - *a);
            }
        }
        if residual < cfg.tol {
            return Ok(SkeletonSolution {
                path: Path::new(grid.clone(), d, y, Interpolation::Linear)?,
                iterations: iter,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iters: cfg.max_iters,
        residual,
    })
}

/// Same right-hand side, but with the law taken from the controlled path
/// itself. This is not the skeleton of the controlled problem; it exists to
/// exhibit the difference.
pub fn solve_selfconsistent_skeleton(spec: &ModelSpec, u: &Control, grid: &TimeGrid) -> Result<Path> {
    check_dims(spec, grid)?;
    check_control(spec, u, grid)?;
    let d = spec.dim;
    let c = &spec.coefficients;
    let mut sigma = vec![0.0; d * d];
    let mut scratch = vec![0.0; d];
    let mut weights = vec![0.0; spec.n_cells()];
    let values = rk4(grid, &spec.initial, "self-consistent path", |k, t, y, out| {
        let law = LawSummary::Dirac(y);
        c.drift(t, y, &law, 0.0, out);
        if u.has_phi(k) {
            c.diffusion(t, y, &law, 0.0, &mut sigma);
            let phi = u.phi(k);
            for i in 0..d {
                out[i] += (0..d).map(|j| sigma[i * d + j] * phi[j]).sum::<f64>();
            }
        }
        if spec.has_jumps() {
            for (w, &p) in weights.iter_mut().zip(u.psi_row(k)) {
                *w = p - 1.0;
            }
            spec.add_jump_integral(t, y, &law, 0.0, Some(&weights), &mut scratch, out);
        }
    })?;
    Path::new(grid.clone(), d, values, Interpolation::Linear)
}

/// `d b / d x` at fixed law, row-major `d x d`. Uses the model's exact
/// Jacobian when it provides one.
pub fn jacobian_b_x(spec: &ModelSpec, t: f64, x: &[f64], law: &LawSummary) -> Result<Vec<f64>> {
    let d = spec.dim;
    let mut jac = vec![0.0; d * d];
    if !spec.coefficients.drift_jacobian(t, x, law, &mut jac) {
        return jacobian_b_x_fd(spec, t, x, law);
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite drift Jacobian at t = {t}")));
    }
    Ok(jac)
}

/// Central finite differences with step `1e-6 (1 + |x_j|)`.
pub fn jacobian_b_x_fd(spec: &ModelSpec, t: f64, x: &[f64], law: &LawSummary) -> Result<Vec<f64>> {
    let d = spec.dim;
    let mut jac = vec![0.0; d * d];
    let (mut bp, mut bm) = (vec![0.0; d], vec![0.0; d]);
    let mut xs = x.to_vec();
    for j in 0..d {
        let h = 1e-6 * (1.0 + x[j].abs());
        xs[j] = x[j] + h;
        spec.coefficients.drift(t, &xs, law, 0.0, &mut bp);
        xs[j] = x[j] - h;
        spec.coefficients.drift(t, &xs, law, 0.0, &mut bm);
        xs[j] = x[j];
        for i in 0..d {
            jac[i * d + j] = (bp[i] - bm[i]) / (2.0 * h);
        }
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite drift Jacobian at t = {t}")));
    }
    Ok(jac)
}

/// The linear moderate-deviation skeleton
/// `K' = b_x(t, X^0, delta_{X^0}) K + sigma phi + sum_j G vphi_j nu_j`,
/// with all coefficients along `X^0` tabulated once so repeated solves are
/// cheap.
#[derive(Debug, Clone)]
pub struct MdpSystem {
    grid: TimeGrid,
    dim: usize,
    n_cells: usize,
    /// Per step, at (start, midpoint, end): Jacobian, sigma, and `G(z_j) nu_j`.
    jac: Vec<[Vec<f64>; 3]>,
    sigma: Vec<[Vec<f64>; 3]>,
    gnu: Vec<[Vec<f64>; 3]>,
}

impl MdpSystem {
    pub fn new(spec: &ModelSpec, x0: &Path, grid: &TimeGrid) -> Result<Self> {
        check_dims(spec, grid)?;
        x0.grid().check_same(grid)?;
        let d = spec.dim;
        let nc = if spec.has_jumps() { spec.n_cells() } else { 0 };
        let c = &spec.coefficients;
        let mut jac = Vec::with_capacity(grid.n_steps());
        let mut sigma = Vec::with_capacity(grid.n_steps());
        let mut gnu = Vec::with_capacity(grid.n_steps());
        let eval = |t: f64, x: &[f64]| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            let law = LawSummary::Dirac(x);
            let j = jacobian_b_x(spec, t, x, &law)?;
            let mut s = vec![0.0; d * d];
            c.diffusion(t, x, &law, 0.0, &mut s);
            // column-major by cell: d entries per cell
            let mut g = vec![0.0; d * nc];
            if let Some(m) = spec.intensity.as_ref().filter(|_| nc > 0) {
                for (cell, (z, mass)) in m.cells().enumerate() {
                    c.jump(t, x, &law, z, 0.0, &mut g[cell * d..(cell + 1) * d]);
                    for v in &mut g[cell * d..(cell + 1) * d] {
                        *v *= mass;
                    }
                }
            }
            if s.iter().chain(&g).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite coefficients at t = {t}")));
            }
            Ok((j, s, g))
        };
        for k in 0..grid.n_steps() {
            let (t0, t1) = (grid.node(k), grid.node(k + 1));
            let mid: Vec<f64> = x0.at(k).iter().zip(x0.at(k + 1)).map(|(a, b)| 0.5 * (a + b)).collect();
            let a = eval(t0, x0.at(k))?;
            let b = eval(0.5 * (t0 + t1), &mid)?;
            let e = eval(t1, x0.at(k + 1))?;
            jac.push([a.0, b.0, e.0]);
            sigma.push([a.1, b.1, e.1]);
            gnu.push([a.2, b.2, e.2]);
        }
        Ok(Self {
            grid: grid.clone(),
            dim: d,
            n_cells: nc,
            jac,
            sigma,
            gnu,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Number of mark cells that enter the skeleton (0 when the model has no jumps).
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn solve(&self, u: &MdpControl) -> Result<Path> {
        u.validate()?;
        if u.n_steps != self.grid.n_steps() || u.dim != self.dim {
            return Err(Error::InvalidControl("MDP control does not match the grid/model".into()));
        }
        if self.n_cells > 0 && u.n_cells != self.n_cells {
            return Err(Error::InvalidControl(format!(
                "MDP control has {} cells, model has {}",
                u.n_cells, self.n_cells
            )));
        }
        let d = self.dim;
        let mut forcing = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        let values = rk4(&self.grid, &vec![0.0; d], "MDP skeleton", |k, t, y, out| {
            let h = self.grid.dt(k);
            let stage = if t <= self.grid.node(k) {
                0
            } else if t >= self.grid.node(k) + h {
                2
            } else {
                1
            };
            let jac = &self.jac[k][stage];
            let f = &mut forcing[stage];
            let sig = &self.sigma[k][stage];
            let phi = u.phi(k);
            for i in 0..d {
                f[i] = (0..d).map(|j| sig[i * d + j] * phi[j]).sum::<f64>();
            }
            if self.n_cells > 0 {
                let g = &self.gnu[k][stage];
                for (cell, v) in u.vphi_row(k).iter().enumerate() {
                    for i in 0..d {
                        f[i] += g[cell * d + i] * v;
                    }
                }
            }
            for i in 0..d {
                out[i] = (0..d).map(|j| jac[i * d + j] * y[j]).sum::<f64>() + f[i];
            }
        })?;
        Path::new(self.grid.clone(), d, values, Interpolation::Linear)
    }
}

/// Solve the linear moderate-deviation skeleton once. `K(0) = 0`.
pub fn solve_mdp_skeleton(spec: &ModelSpec, x0: &Path, u: &MdpControl, grid: &TimeGrid) -> Result<Path> {
    MdpSystem::new(spec, x0, grid)?.solve(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, builtin, ModelConfig};
    use proptest::prelude::*;

    fn lg(a: f64) -> ModelSpec {
        build(ModelConfig::builtin("linear_gaussian").with_param("a", a)).unwrap()
    }

    #[test]
    fn limit_ode_examples() {
        let m = builtin("example11").unwrap();
        let g = TimeGrid::uniform(1.0, 400).unwrap();
        let x0 = solve_limit_ode(&m, &g).unwrap();
        assert!((x0.terminal()[0] - 1f64.exp()).abs() < 1e-8);

        let x0 = solve_limit_ode(&lg(-1.0), &g).unwrap();
        assert!((x0.terminal()[0] - (-1f64).exp()).abs() < 1e-8);

        let pj = builtin("pure_jump").unwrap().with_initial(vec![0.7]).unwrap();
        let x0 = solve_limit_ode(&pj, &g).unwrap();
        assert!(x0.values().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn blow_up_is_reported() {
        let text = "model = \"custom\"\ndim = 1\ninitial = [1.0]\nhorizon = 2.0\n[custom]\ndrift_poly = [[0.0, 0.0, 0.0, 1.0]]\n";
        let m = build(ModelConfig::from_toml(text).unwrap()).unwrap();
        let g = TimeGrid::uniform(2.0, 50).unwrap();
        assert!(matches!(solve_limit_ode(&m, &g), Err(Error::Diverged { .. })));
    }

    #[test]
    fn ldp_skeleton_examples() {
        let cfg = PicardConfig::default();
        let m = builtin("example11").unwrap();
        let g = TimeGrid::uniform(1.0, 400).unwrap();
        let x0 = solve_limit_ode(&m, &g).unwrap();

        let null = solve_ldp_skeleton(&m, &x0, &Control::null(&g, 1, 0), &g, &cfg).unwrap();
        assert_eq!(null.iterations, 1);
        assert_eq!(null.path, x0);

        let u = Control::constant(&g, &[1.0], 1.0, 0);
        let y = solve_ldp_skeleton(&m, &x0, &u, &g, &cfg).unwrap();
        assert!((y.path.terminal()[0] - (1f64.exp() + 1.0)).abs() < 1e-6);

        let pj = builtin("pure_jump").unwrap();
        let x0 = solve_limit_ode(&pj, &g).unwrap();
        let u = Control::constant(&g, &[0.0], 3.0, 1);
        let y = solve_ldp_skeleton(&pj, &x0, &u, &g, &cfg).unwrap();
        for k in 0..=400 {
            assert!((y.path.at(k)[0] - 2.0 * g.node(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn selfconsistent_skeleton_differs() {
        let m = builtin("example11").unwrap();
        let g = TimeGrid::uniform(1.0, 400).unwrap();
        let u = Control::constant(&g, &[1.0], 1.0, 0);
        let y = solve_selfconsistent_skeleton(&m, &u, &g).unwrap();
        assert!((y.terminal()[0] - (2.0 * 1f64.exp() - 1.0)).abs() < 1e-8);
    }

    #[test]
    fn picard_reports_nonconvergence() {
        let m = builtin("logistic_mf").unwrap();
        let g = TimeGrid::uniform(1.0, 100).unwrap();
        let x0 = solve_limit_ode(&m, &g).unwrap();
        let u = Control::constant(&g, &[2.0], 1.5, 2);
        let cfg = PicardConfig {
            max_iters: 2,
            ..PicardConfig::default()
        };
        assert!(matches!(
            solve_ldp_skeleton(&m, &x0, &u, &g, &cfg),
            Err(Error::NoConvergence { .. })
        ));
        assert!(solve_ldp_skeleton(&m, &x0, &u, &g, &PicardConfig::default()).is_ok());
    }

    #[test]
    fn richardson_order_two() {
        let m = builtin("logistic_mf").unwrap();
        let cfg = PicardConfig::default();
        let at = |n: usize| {
            let g = TimeGrid::uniform(1.0, n).unwrap();
            let x0 = solve_limit_ode(&m, &g).unwrap();
            let u = Control::constant(&g, &[0.7], 1.8, 2);
            solve_ldp_skeleton(&m, &x0, &u, &g, &cfg).unwrap().path.terminal()[0]
        };
        let (a, b, c) = (at(20), at(40), at(80));
        let slope = ((a - b) / (b - c)).abs().log2();
        assert!((slope - 2.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn jacobian_examples() {
        let law = [0.0];
        let mu = LawSummary::Dirac(&law);
        let text = "model = \"custom\"\ndim = 2\n[custom]\ndrift_x = [[1.0, 2.0], [-3.0, 0.5]]\ndrift_const = [4.0, 4.0]\n";
        let m = build(ModelConfig::from_toml(text).unwrap()).unwrap();
        let j = jacobian_b_x_fd(&m, 0.0, &[0.3, -2.0], &LawSummary::Mean(&[0.0, 0.0])).unwrap();
        for (a, b) in j.iter().zip([1.0, 2.0, -3.0, 0.5]) {
            assert!((a - b).abs() < 1e-7);
        }
        let konst = build(
            ModelConfig::from_toml("model = \"custom\"\ndim = 1\n[custom]\ndrift_const = [3.0]\n").unwrap(),
        )
        .unwrap();
        assert_eq!(jacobian_b_x_fd(&konst, 0.0, &[5.0], &mu).unwrap(), vec![0.0]);
        let sq = build(
            ModelConfig::from_toml("model = \"custom\"\ndim = 1\n[custom]\ndrift_poly = [[1.0]]\n").unwrap(),
        )
        .unwrap();
        assert!((jacobian_b_x_fd(&sq, 0.0, &[2.0], &mu).unwrap()[0] - 4.0).abs() < 1e-6);
        assert_eq!(jacobian_b_x(&sq, 0.0, &[2.0], &mu).unwrap(), vec![4.0]);
        // the mean-field drift has zero x-derivative at fixed law
        let ex = builtin("example11").unwrap();
        assert!(jacobian_b_x_fd(&ex, 0.0, &[2.0], &mu).unwrap()[0].abs() < 1e-9);
    }

    #[test]
    fn mdp_skeleton_examples() {
        let g = TimeGrid::uniform(1.0, 400).unwrap();
        let m = lg(1.0);
        let x0 = solve_limit_ode(&m, &g).unwrap();
        assert!(solve_mdp_skeleton(&m, &x0, &MdpControl::zero(&g, 1, 0), &g)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let c = 0.8;
        let k = solve_mdp_skeleton(&m, &x0, &MdpControl::constant(&g, &[c], 0.0, 0), &g).unwrap();
        assert!((k.terminal()[0] - c * (1f64.exp() - 1.0)).abs() < 1e-8);

        // zero Jacobian, unit sigma, phi(s) = s sampled at step midpoints
        let ex = builtin("example11").unwrap();
        let x0 = solve_limit_ode(&ex, &g).unwrap();
        let mut u = MdpControl::zero(&g, 1, 0);
        for k in 0..400 {
            u.phi[k] = 0.5 * (g.node(k) + g.node(k + 1));
        }
        let k = solve_mdp_skeleton(&ex, &x0, &u, &g).unwrap();
        assert!((k.terminal()[0] - 0.5).abs() < 1e-12);

        // jump channel: G = 1, nu mass 1, vphi = 2 gives K(t) = 2t
        let pj = builtin("pure_jump").unwrap();
        let x0 = solve_limit_ode(&pj, &g).unwrap();
        let k = solve_mdp_skeleton(&pj, &x0, &MdpControl::constant(&g, &[0.0], 2.0, 1), &g).unwrap();
        assert!((k.terminal()[0] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn mdp_skeleton_is_linear(
            p1 in prop::collection::vec(-2.0..2.0f64, 20),
            v1 in prop::collection::vec(-2.0..2.0f64, 40),
            p2 in prop::collection::vec(-2.0..2.0f64, 20),
            v2 in prop::collection::vec(-2.0..2.0f64, 40),
            alpha in -2.0..2.0f64,
            beta in -2.0..2.0f64,
        ) {
            let m = builtin("logistic_mf").unwrap();
            let g = TimeGrid::uniform(1.0, 20).unwrap();
            let x0 = solve_limit_ode(&m, &g).unwrap();
            let sys = MdpSystem::new(&m, &x0, &g).unwrap();
            let u1 = MdpControl { n_steps: 20, dim: 1, n_cells: 2, phi: p1, vphi: v1 };
            let u2 = MdpControl { n_steps: 20, dim: 1, n_cells: 2, phi: p2, vphi: v2 };
            let k1 = sys.solve(&u1).unwrap();
            let k2 = sys.solve(&u2).unwrap();
            let k = sys.solve(&u1.combine(alpha, &u2, beta)).unwrap();
            for (i, v) in k.values().iter().enumerate() {
                let lin = alpha * k1.values()[i] + beta * k2.values()[i];
                prop_assert!((v - lin).abs() < 1e-9);
            }
        }

        #[test]
        fn skeleton_bounded_over_compact_controls(phi in -3.0..3.0f64, psi in 0.2..3.0f64) {
            let m = builtin("logistic_mf").unwrap();
            let g = TimeGrid::uniform(1.0, 50).unwrap();
            let x0 = solve_limit_ode(&m, &g).unwrap();
            let u = Control::constant(&g, &[phi], psi, 2);
            let y = solve_ldp_skeleton(&m, &x0, &u, &g, &PicardConfig::default()).unwrap();
            prop_assert!(y.path.values().iter().all(|v| v.abs() < 10.0));
        }
    }
}
