//! Control costs and the discretized rate-function optimizers.
//!
//! The large-deviation rate of an event is the least cost `Q1 + Q2` of a
//! control whose skeleton lands in the event. Controls are parameterized by
//! their values on `segments` equal time blocks, `psi = exp(theta)` with
//! `theta` boxed to the admissible range, and the constraint is enforced by
//! an augmented Lagrangian whose weight grows while the violation stalls,
//! around a spectral projected-gradient inner solver. The moderate-deviation rate has a linear constraint and a
//! quadratic cost and is solved in closed form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{segment_of, Control, MdpControl, DEFAULT_PSI_BOUNDS};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::levy::IntensityMeasure;
use crate::model::ModelSpec;
use crate::path::{euclid, Path};
use crate::rng::{derive, rng_from, Purpose};
use crate::skeleton::{solve_ldp_skeleton, MdpSystem, PicardConfig};

/// `x log x - x + 1`, with `ell(0) = 1`.
pub fn ell(x: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!("ell needs x >= 0, got {x}")));
    }
    Ok(if x == 0.0 { 1.0 } else { x * x.ln() - x + 1.0 })
}

/// `1/2 sum_k |phi_k|^2 dt_k` for step-major `phi`.
pub fn q1_cost(phi: &[f64], dim: usize, grid: &TimeGrid) -> f64 {
    0.5 * phi
        .chunks_exact(dim)
        .enumerate()
        .map(|(k, p)| p.iter().map(|v| v * v).sum::<f64>() * grid.dt(k))
        .sum::<f64>()
}

/// `sum_{k,j} ell(psi_kj) nu_j dt_k` for step-major `psi`.
pub fn q2_cost(psi: &[f64], m: &IntensityMeasure, grid: &TimeGrid) -> Result<f64> {
    let nc = m.n_cells();
    if psi.len() != nc * grid.n_steps() {
        return Err(Error::InvalidControl("psi length does not match grid and cells".into()));
    }
    let mut total = 0.0;
    for (i, &p) in psi.iter().enumerate() {
        if !(p >= 0.0) {
            return Err(Error::InvalidControl(format!(
                "negative tilt {p} at step {}, cell {}",
                i / nc,
                i % nc
            )));
        }
        total += ell(p)? * m.mass(i % nc) * grid.dt(i / nc);
    }
    Ok(total)
}

/// `Q1(phi) + Q2(psi)` of a control for the given model.
pub fn control_cost(spec: &ModelSpec, u: &Control, grid: &TimeGrid) -> Result<f64> {
    let q2 = match &spec.intensity {
        Some(m) => q2_cost(u.psi_values(), m, grid)?,
        None => 0.0,
    };
    Ok(q1_cost(u.phi_values(), u.dim(), grid) + q2)
}

/// `1/2 |phi|^2 + 1/2 |vphi|^2_nu`.
pub fn mdp_cost(u: &MdpControl, m: Option<&IntensityMeasure>, grid: &TimeGrid) -> f64 {
    let mut c = q1_cost(&u.phi, u.dim, grid);
    if let Some(m) = m {
        for (i, v) in u.vphi.iter().enumerate() {
            c += 0.5 * v * v * m.mass(i % u.n_cells) * grid.dt(i / u.n_cells);
        }
    }
    c
}

/// Target sets for rate computations and Monte Carlo checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventSpec {
    /// `|x(T) - point| <= tol`.
    PinTerminal { point: Vec<f64>, tol: f64 },
    /// `sup_k |x(t_k) - path(t_k)| <= tol`.
    PinPath { path: Path, tol: f64 },
    /// `<w, x(T)> >= c`.
    Halfspace { w: Vec<f64>, c: f64 },
}

/// Relative slack used when testing lattice-valued samples for membership.
pub const MEMBERSHIP_SLACK: f64 = 1e-9;

impl EventSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            EventSpec::PinTerminal { point, tol } => {
                if point.len() != dim {
                    return bad("pin point has wrong dimension");
                }
                if !(*tol >= 0.0) || point.iter().any(|v| !v.is_finite()) {
                    return bad("pin needs a finite point and tol >= 0");
                }
            }
            EventSpec::PinPath { path, tol } => {
                if path.dim() != dim {
                    return bad("pinned path has wrong dimension");
                }
                if !(*tol >= 0.0) {
                    return bad("pin tol must be >= 0");
                }
            }
            EventSpec::Halfspace { w, c } => {
                if w.len() != dim || !c.is_finite() || w.iter().any(|v| !v.is_finite()) {
                    return bad("halfspace needs a finite direction of the model dimension");
                }
                if w.iter().all(|&v| v == 0.0) {
                    return bad("halfspace direction must be nonzero");
                }
            }
        }
        Ok(())
    }

    /// Whether the event only looks at the terminal value.
    pub fn is_terminal(&self) -> bool {
        !matches!(self, EventSpec::PinPath { .. })
    }

    /// The event with its defining point shifted by `-x0`, scaled by `1/a`.
    pub fn rescaled(&self, x0: &Path, a: f64) -> Result<EventSpec> {
        Ok(match self {
            EventSpec::PinTerminal { point, tol } => EventSpec::PinTerminal {
                point: point.iter().zip(x0.terminal()).map(|(p, x)| (p - x) / a).collect(),
                tol: tol / a,
            },
            EventSpec::Halfspace { w, c } => {
                let wx: f64 = w.iter().zip(x0.terminal()).map(|(a, b)| a * b).sum();
                EventSpec::Halfspace {
                    w: w.clone(),
                    c: (c - wx) / a,
                }
            }
            EventSpec::PinPath { path, tol } => {
                let g = x0.grid();
                let mut values = Vec::with_capacity(path.values().len());
                for k in 0..g.n_nodes() {
                    let p = path.eval(g.node(k))?;
                    values.extend(p.iter().zip(x0.at(k)).map(|(p, x)| (p - x) / a));
                }
                EventSpec::PinPath {
                    path: Path::new(g.clone(), path.dim(), values, path.interpolation())?,
                    tol: tol / a,
                }
            }
        })
    }

    /// Membership of a terminal value, with relative slack.
    pub fn contains_terminal(&self, x: &[f64]) -> bool {
        match self {
            EventSpec::PinTerminal { point, tol } => {
                euclid(x, point) <= tol + MEMBERSHIP_SLACK * (1.0 + tol)
            }
            EventSpec::Halfspace { w, c } => {
                let v: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                v >= c - MEMBERSHIP_SLACK * (1.0 + c.abs())
            }
            EventSpec::PinPath { .. } => false,
        }
    }

    /// Membership from a tracked sup-distance to the pinned path.
    pub fn contains_sup(&self, sup: f64) -> bool {
        match self {
            EventSpec::PinPath { tol, .. } => sup <= tol + MEMBERSHIP_SLACK * (1.0 + tol),
            _ => false,
        }
    }

    fn node_violations(&self, y: &Path) -> Result<Vec<f64>> {
        Ok(match self {
            EventSpec::PinTerminal { point, tol } => vec![(euclid(y.terminal(), point) - tol).max(0.0)],
            EventSpec::Halfspace { w, c } => {
                let v: f64 = w.iter().zip(y.terminal()).map(|(a, b)| a * b).sum();
                vec![(c - v).max(0.0)]
            }
            EventSpec::PinPath { path, tol } => {
                let g = y.grid();
                let mut out = Vec::with_capacity(g.n_nodes());
                for k in 0..g.n_nodes() {
                    let p = path.eval(g.node(k))?;
                    out.push((euclid(y.at(k), &p) - tol).max(0.0));
                }
                out
            }
        })
    }

    /// Sup of the constraint violation along `y`.
    pub fn residual(&self, y: &Path) -> Result<f64> {
        Ok(self.node_violations(y)?.into_iter().fold(0.0, f64::max))
    }

    /// Smooth constraint functions: equalities `e = 0` and inequalities `h <= 0`.
    fn constraints(&self, y: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
        // smooth wherever the constraint can be active, since tol > 0
        let ball = |x: &[f64], p: &[f64], tol: f64| euclid(x, p) - tol;
        Ok(match self {
            EventSpec::PinTerminal { point, tol } if *tol == 0.0 => {
                (y.terminal().iter().zip(point).map(|(a, b)| a - b).collect(), vec![])
            }
            EventSpec::PinTerminal { point, tol } => (vec![], vec![ball(y.terminal(), point, *tol)]),
            EventSpec::Halfspace { w, c } => {
                let v: f64 = w.iter().zip(y.terminal()).map(|(a, b)| a * b).sum();
                (vec![], vec![c - v])
            }
            EventSpec::PinPath { path, tol } => {
                let g = y.grid();
                let (mut eq, mut ineq) = (vec![], vec![]);
                for k in 0..g.n_nodes() {
                    let p = path.eval(g.node(k))?;
                    if *tol == 0.0 {
                        eq.extend(y.at(k).iter().zip(&p).map(|(a, b)| a - b));
                    } else {
                        ineq.push(ball(y.at(k), &p, *tol));
                    }
                }
                (eq, ineq)
            }
        })
    }

    /// Default feasibility tolerance on the residual.
    pub fn feasibility_tol(&self) -> f64 {
        match self {
            EventSpec::PinTerminal { tol, .. } | EventSpec::PinPath { tol, .. } => (1e-3 * tol).max(1e-6),
            EventSpec::Halfspace { .. } => 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    /// Number of equal time blocks carrying independent control values.
    pub segments: usize,
    pub starts: usize,
    pub seed: u64,
    pub initial_weight: f64,
    pub weight_factor: f64,
    pub weight_ceiling: f64,
    /// Overrides the event's default feasibility tolerance.
    pub feasibility_tol: Option<f64>,
    pub max_inner: usize,
    pub inner_tol: f64,
    pub fd_step: f64,
    pub psi_bounds: (f64, f64),
    pub picard: PicardConfig,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            segments: 10,
            starts: 5,
            seed: 0,
            initial_weight: 10.0,
            weight_factor: 2.0,
            weight_ceiling: 1e8,
            feasibility_tol: None,
            max_inner: 400,
            inner_tol: 1e-10,
            fd_step: 1e-6,
            psi_bounds: DEFAULT_PSI_BOUNDS,
            picard: PicardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub start: usize,
    pub round: usize,
    pub weight: f64,
    pub inner_iters: usize,
    pub cost: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimalControl {
    Ldp(Control),
    Mdp(MdpControl),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    /// Cost of the returned control. The rate itself is [`RateResult::rate`].
    pub value: f64,
    pub feasible: bool,
    /// No feasible control was found; the rate is reported as infinite.
    pub infinite: bool,
    pub control: OptimalControl,
    pub achieved_path: Path,
    pub constraint_residual: f64,
    pub feasibility_tol: f64,
    /// Exact closed-form solve rather than iterative optimization.
    pub exact: bool,
    pub best_start: usize,
    pub trace: Vec<TraceEntry>,
}

impl RateResult {
    pub fn rate(&self) -> f64 {
        if self.infinite {
            f64::INFINITY
        } else {
            self.value
        }
    }
}

struct Evaluation {
    cost: f64,
    eq: Vec<f64>,
    ineq: Vec<f64>,
    residual: f64,
}

impl Evaluation {
    fn of(cost: f64, target: &EventSpec, y: &Path) -> Result<Self> {
        let (eq, ineq) = target.constraints(y)?;
        Ok(Self {
            cost,
            eq,
            ineq,
            residual: target.residual(y)?,
        })
    }
}

#[derive(Clone)]
struct Multipliers {
    eq: Vec<f64>,
    ineq: Vec<f64>,
    weight: f64,
}

impl Multipliers {
    fn lagrangian(&self, e: &Evaluation) -> f64 {
        let w = self.weight;
        let mut f = e.cost;
        for (l, v) in self.eq.iter().zip(&e.eq) {
            f += l * v + 0.5 * w * v * v;
        }
        for (m, h) in self.ineq.iter().zip(&e.ineq) {
            f += ((m + w * h).max(0.0).powi(2) - m * m) / (2.0 * w);
        }
        f
    }

    fn update(&mut self, e: &Evaluation) {
        for (l, v) in self.eq.iter_mut().zip(&e.eq) {
            *l += self.weight * v;
        }
        for (m, h) in self.ineq.iter_mut().zip(&e.ineq) {
            *m = (*m + self.weight * h).max(0.0);
        }
    }
}

/// A box-constrained minimization in parameter space with smooth
/// equality and inequality constraints on the resulting path.
struct ConstrainedProblem<'a> {
    lower: Vec<f64>,
    upper: Vec<f64>,
    eval: Box<dyn Fn(&[f64]) -> Result<Evaluation> + Sync + 'a>,
}

struct StartOutcome {
    x: Vec<f64>,
    cost: f64,
    residual: f64,
    trace: Vec<TraceEntry>,
}

impl ConstrainedProblem<'_> {
    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn objective(&self, x: &[f64], w: &Multipliers) -> Result<f64> {
        Ok(w.lagrangian(&(self.eval)(x)?))
    }

    fn gradient(&self, x: &[f64], w: &Multipliers, h_rel: f64) -> Result<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        let mut xs = x.to_vec();
        for i in 0..x.len() {
            let h = h_rel * (1.0 + x[i].abs());
            let up = (x[i] + h).min(self.upper[i]);
            let dn = (x[i] - h).max(self.lower[i]);
            xs[i] = up;
            let fp = self.objective(&xs, w)?;
            xs[i] = dn;
            let fm = self.objective(&xs, w)?;
            xs[i] = x[i];
            g[i] = if up > dn { (fp - fm) / (up - dn) } else { 0.0 };
        }
        Ok(g)
    }

    /// Spectral projected gradient with a nonmonotone Armijo search.
    fn spg(&self, x: &mut Vec<f64>, w: &Multipliers, cfg: &OptConfig) -> Result<usize> {
        const HISTORY: usize = 10;
        let n = x.len();
        if n == 0 {
            return Ok(0);
        }
        self.project(x);
        let mut f = self.objective(x, w)?;
        let mut g = self.gradient(x, w, cfg.fd_step)?;
        let mut hist = vec![f];
        let pg = |x: &[f64], g: &[f64]| -> f64 {
            let mut t: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - b).collect();
            self.project(&mut t);
            t.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let mut lambda = (1.0 / pg(x, &g).max(1e-12)).clamp(1e-10, 1e10);
        for iter in 0..cfg.max_inner {
            if pg(x, &g) <= cfg.inner_tol {
                return Ok(iter);
            }
            let mut trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - lambda * b).collect();
            self.project(&mut trial);
            let d: Vec<f64> = trial.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
            let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let fmax = hist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut alpha = 1.0;
            let (xn, fnew) = loop {
                let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
                // a trial whose skeleton blows up is rejected like an ascent step
                let fnew = match self.objective(&xn, w) {
                    Ok(v) => v,
                    Err(e) if is_skeleton_failure(&e) => f64::INFINITY,
                    Err(e) => return Err(e),
                };
                if fnew <= fmax + 1e-4 * alpha * gd || alpha < 1e-12 {
                    break (xn, fnew);
                }
                alpha *= 0.5;
            };
            if alpha < 1e-12 || !fnew.is_finite() {
                return Ok(iter + 1);
            }
            let gn = self.gradient(&xn, w, cfg.fd_step)?;
            let s: Vec<f64> = xn.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(gn.iter().zip(&g)).map(|(s, (a, b))| s * (a - b)).sum();
            let ss: f64 = s.iter().map(|v| v * v).sum();
            let gnorm = gn.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
            lambda = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { (1.0 / gnorm).min(1e10) };
            let stalled = (f - fnew).abs() <= 1e-15 * (1.0 + f.abs()) && ss.sqrt() <= 1e-12;
            *x = xn;
            f = fnew;
            g = gn;
            hist.push(f);
            if hist.len() > HISTORY {
                hist.remove(0);
            }
            if stalled {
                return Ok(iter + 1);
            }
        }
        Ok(cfg.max_inner)
    }

    fn solve_from(&self, mut x: Vec<f64>, start: usize, feas_tol: f64, cfg: &OptConfig) -> Result<StartOutcome> {
        const MAX_ROUNDS: usize = 200;
        let first = (self.eval)(&x)?;
        let mut mult = Multipliers {
            eq: vec![0.0; first.eq.len()],
            ineq: vec![0.0; first.ineq.len()],
            weight: cfg.initial_weight,
        };
        let mut trace = Vec::new();
        let mut prev = f64::INFINITY;
        for round in 0.. {
            let inner = self.spg(&mut x, &mult, cfg)?;
            let e = (self.eval)(&x)?;
            trace.push(TraceEntry {
                start,
                round,
                weight: mult.weight,
                inner_iters: inner,
                cost: e.cost,
                residual: e.residual,
            });
            let at_ceiling = mult.weight * cfg.weight_factor > cfg.weight_ceiling;
            if e.residual <= feas_tol || round + 1 >= MAX_ROUNDS || (at_ceiling && e.residual >= 0.99 * prev) {
                return Ok(StartOutcome {
                    x,
                    cost: e.cost,
                    residual: e.residual,
                    trace,
                });
            }
            mult.update(&e);
            if e.residual > 0.25 * prev && !at_ceiling {
                mult.weight *= cfg.weight_factor;
            }
            prev = prev.min(e.residual);
        }
        unreachable!()
    }

    /// Multi-start; the merge is deterministic regardless of scheduling.
    fn solve(&self, starts: Vec<Vec<f64>>, feas_tol: f64, cfg: &OptConfig) -> Result<(usize, StartOutcome, Vec<TraceEntry>)> {
        let outcomes: Vec<Result<StartOutcome>> = starts
            .into_par_iter()
            .enumerate()
            .map(|(i, x)| self.solve_from(x, i, feas_tol, cfg))
            .collect();
        let mut all = Vec::new();
        for o in outcomes {
            all.push(o?);
        }
        let trace: Vec<TraceEntry> = all.iter().flat_map(|o| o.trace.clone()).collect();
        let best = (0..all.len())
            .min_by(|&a, &b| {
                let (oa, ob) = (&all[a], &all[b]);
                let fa = oa.residual <= feas_tol;
                let fb = ob.residual <= feas_tol;
                fb.cmp(&fa)
                    .then(oa.cost.total_cmp(&ob.cost))
                    .then(oa.residual.total_cmp(&ob.residual))
                    .then(a.cmp(&b))
            })
            .ok_or_else(|| Error::InvalidArgument("need at least one optimizer start".into()))?;
        Ok((best, all.swap_remove(best), trace))
    }
}

fn is_skeleton_failure(e: &Error) -> bool {
    match e {
        Error::Optimization { source, .. } => is_skeleton_failure(source),
        Error::Diverged { .. } | Error::NoConvergence { .. } => true,
        _ => false,
    }
}

fn check_opt(cfg: &OptConfig, grid: &TimeGrid) -> Result<()> {
    cfg.picard.validate()?;
    if cfg.segments == 0 || cfg.segments > grid.n_steps() {
        return Err(Error::InvalidArgument(format!(
            "segments must lie in 1..={}, got {}",
            grid.n_steps(),
            cfg.segments
        )));
    }
    if cfg.starts == 0 {
        return Err(Error::InvalidArgument("need at least one optimizer start".into()));
    }
    if !(cfg.initial_weight > 0.0 && cfg.weight_factor > 1.0 && cfg.weight_ceiling >= cfg.initial_weight) {
        return Err(Error::InvalidArgument("penalty schedule must increase from a positive weight".into()));
    }
    let (lo, hi) = cfg.psi_bounds;
    if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
        return Err(Error::InvalidArgument("psi bounds must bracket 1 with lo > 0".into()));
    }
    Ok(())
}

/// Layout of the LDP optimization vector: per segment, the active `phi`
/// components followed by the `theta = ln psi` of each active cell.
struct LdpLayout {
    segments: usize,
    dim: usize,
    n_cells: usize,
    use_phi: bool,
    use_psi: bool,
}

impl LdpLayout {
    fn per_segment(&self) -> usize {
        usize::from(self.use_phi) * self.dim + usize::from(self.use_psi) * self.n_cells
    }

    fn len(&self) -> usize {
        self.segments * self.per_segment()
    }

    fn control(&self, x: &[f64], grid: &TimeGrid, bounds: (f64, f64)) -> Result<Control> {
        let (s, d, nc) = (self.segments, self.dim, self.n_cells);
        let per = self.per_segment();
        let mut phi = vec![0.0; s * d];
        let mut psi = vec![1.0; s * nc];
        let (tlo, thi) = (bounds.0.ln(), bounds.1.ln());
        for seg in 0..s {
            let p = &x[seg * per..(seg + 1) * per];
            let mut off = 0;
            if self.use_phi {
                phi[seg * d..(seg + 1) * d].copy_from_slice(&p[..d]);
                off = d;
            }
            if self.use_psi {
                for j in 0..nc {
                    psi[seg * nc + j] = p[off + j].clamp(tlo, thi).exp().clamp(bounds.0, bounds.1);
                }
            }
        }
        Control::from_segments(grid, s, d, nc, &phi, &psi, bounds)
    }
}

/// Large-deviation rate of `target`: least `Q1 + Q2` over segment-wise
/// constant controls whose frozen-law skeleton lands in the event.
pub fn ldp_rate(spec: &ModelSpec, x0: &Path, target: &EventSpec, grid: &TimeGrid, cfg: &OptConfig) -> Result<RateResult> {
    check_opt(cfg, grid)?;
    target.validate(spec.dim)?;
    x0.grid().check_same(grid)?;
    let layout = LdpLayout {
        segments: cfg.segments,
        dim: spec.dim,
        n_cells: spec.n_cells(),
        use_phi: !spec.coefficients.diffusion_free(),
        use_psi: spec.has_jumps(),
    };
    let (tlo, thi) = (cfg.psi_bounds.0.ln(), cfg.psi_bounds.1.ln());
    let per = layout.per_segment();
    let mut lower = vec![f64::NEG_INFINITY; layout.len()];
    let mut upper = vec![f64::INFINITY; layout.len()];
    if layout.use_psi {
        let off = if layout.use_phi { layout.dim } else { 0 };
        for seg in 0..layout.segments {
            for j in 0..layout.n_cells {
                lower[seg * per + off + j] = tlo;
                upper[seg * per + off + j] = thi;
            }
        }
    }
    let solve = |x: &[f64]| -> Result<(Control, Path)> {
        let u = layout.control(x, grid, cfg.psi_bounds)?;
        let y = solve_ldp_skeleton(spec, x0, &u, grid, &cfg.picard).map_err(|e| Error::Optimization {
            source: Box::new(e),
            control: x.to_vec(),
        })?;
        Ok((u, y.path))
    };
    let problem = ConstrainedProblem {
        lower,
        upper,
        eval: Box::new(|x: &[f64]| {
            let (u, y) = solve(x)?;
            Evaluation::of(control_cost(spec, &u, grid)?, target, &y)
        }),
    };

    let mut starts = vec![vec![0.0; layout.len()]];
    for s in 1..cfg.starts {
        let mut rng = rng_from(derive(derive(cfg.seed, Purpose::Optimizer as u64), s as u64));
        let mut x: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        problem.project(&mut x);
        starts.push(x);
    }
    let feas_tol = cfg.feasibility_tol.unwrap_or_else(|| target.feasibility_tol());
    let (best_start, best, trace) = problem.solve(starts, feas_tol, cfg)?;
    let (u, y) = solve(&best.x)?;
    let value = control_cost(spec, &u, grid)?;
    let feasible = best.residual <= feas_tol;
    Ok(RateResult {
        value,
        feasible,
        infinite: !feasible,
        control: OptimalControl::Ldp(u),
        achieved_path: y,
        constraint_residual: best.residual,
        feasibility_tol: feas_tol,
        exact: false,
        best_start,
        trace,
    })
}

/// Moderate-deviation rate of `target`, an event on the rescaled
/// fluctuation `(X - X^0) / a`: least `1/2 |phi|^2 + 1/2 |vphi|^2_nu` over
/// step-wise constant controls whose linear skeleton lands in the event.
pub fn mdp_rate(spec: &ModelSpec, x0: &Path, target: &EventSpec, grid: &TimeGrid, cfg: &OptConfig) -> Result<RateResult> {
    target.validate(spec.dim)?;
    let sys = MdpSystem::new(spec, x0, grid)?;
    let (n, d) = (grid.n_steps(), spec.dim);
    let nc = sys.n_cells();
    let m = spec.intensity.as_ref().filter(|_| nc > 0);
    let ctrl_cells = spec.n_cells();
    let feas_tol = cfg.feasibility_tol.unwrap_or_else(|| target.feasibility_tol());

    if let EventSpec::PinPath { tol, .. } = target {
        if *tol > 0.0 {
            return mdp_rate_penalized(spec, &sys, target, grid, cfg, feas_tol);
        }
    }

    // columns: phi (step-major, d per step), then vphi (step-major, nc per step)
    let n_phi = n * d;
    let n_u = n_phi + n * nc;
    let unit = |col: usize| -> MdpControl {
        let mut u = MdpControl::zero(grid, d, ctrl_cells);
        if col < n_phi {
            u.phi[col] = 1.0;
        } else {
            let c = col - n_phi;
            u.vphi[(c / nc) * ctrl_cells + c % nc] = 1.0;
        }
        u
    };
    let weight = |col: usize| -> f64 {
        if col < n_phi {
            grid.dt(col / d)
        } else {
            let c = col - n_phi;
            grid.dt(c / nc) * m.unwrap().mass(c % nc)
        }
    };
    let rows = if target.is_terminal() { d } else { n * d };
    let cols: Vec<Vec<f64>> = (0..n_u)
        .into_par_iter()
        .map(|col| -> Result<Vec<f64>> {
            let k = sys.solve(&unit(col))?;
            let scale = weight(col).sqrt();
            Ok(if target.is_terminal() {
                k.terminal().iter().map(|v| v / scale).collect()
            } else {
                k.values()[d..].iter().map(|v| v / scale).collect()
            })
        })
        .collect::<Result<_>>()?;
    // a_tilde = A W^{-1/2}
    let a_tilde = DMatrix::from_fn(rows, n_u, |r, c| cols[c][r]);

    let v: Option<DVector<f64>> = match target {
        EventSpec::Halfspace { w, c } => {
            let wv = DVector::from_column_slice(w);
            let aw = a_tilde.transpose() * &wv;
            let q = aw.norm_squared();
            if *c <= 0.0 {
                Some(DVector::zeros(n_u))
            } else if q <= 1e-300 {
                None
            } else {
                Some(aw * (*c / q))
            }
        }
        EventSpec::PinTerminal { point, tol } => {
            let gram = &a_tilde * a_tilde.transpose();
            let eig = SymmetricEigen::new(gram);
            let lam_max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
            let cutoff = 1e-12 * lam_max.max(1e-300);
            let a_eig = eig.eigenvectors.transpose() * DVector::from_column_slice(point);
            let lam: Vec<f64> = eig.eigenvalues.iter().map(|&l| if l > cutoff { l } else { 0.0 }).collect();
            let miss = |mu: f64| -> f64 {
                a_eig
                    .iter()
                    .zip(&lam)
                    .map(|(ai, li)| (ai / (1.0 + mu * li)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let null_miss: f64 = a_eig
                .iter()
                .zip(&lam)
                .filter(|(_, &l)| l == 0.0)
                .map(|(ai, _)| ai * ai)
                .sum::<f64>()
                .sqrt();
            if a_eig.norm() <= *tol {
                Some(DVector::zeros(n_u))
            } else if null_miss > *tol * (1.0 + 1e-12) + 1e-12 {
                None
            } else {
                // y_i = a_i mu l_i / (1 + mu l_i) with |y - a| = tol
                let mu = if *tol == 0.0 {
                    f64::INFINITY
                } else {
                    let (mut lo, mut hi) = (0.0f64, 1.0f64);
                    while miss(hi) > *tol {
                        hi *= 2.0;
                        if hi > 1e300 {
                            break;
                        }
                    }
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if miss(mid) > *tol {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    hi
                };
                // lambda = G^+ y in the eigenbasis, v = A~^T lambda
                let lam_eig = DVector::from_iterator(
                    d,
                    a_eig.iter().zip(&lam).map(|(ai, &li)| {
                        if li == 0.0 {
                            0.0
                        } else if mu.is_infinite() {
                            ai / li
                        } else {
                            ai * mu / (1.0 + mu * li)
                        }
                    }),
                );
                Some(a_tilde.transpose() * (&eig.eigenvectors * lam_eig))
            }
        }
        EventSpec::PinPath { path, .. } => {
            // exact pin on every node after the first
            let mut y = DVector::zeros(rows);
            for k in 1..=n {
                let p = path.eval(grid.node(k))?;
                for i in 0..d {
                    y[(k - 1) * d + i] = p[i];
                }
            }
            let start = path.eval(0.0)?;
            if start.iter().any(|v| v.abs() > feas_tol) {
                None
            } else {
                let svd = a_tilde.clone().svd(true, true);
                let cut = 1e-12 * svd.singular_values.max().max(1e-300);
                let pinv = svd
                    .pseudo_inverse(cut)
                    .map_err(|e| Error::Numeric(e.to_string()))?;
                Some(pinv * y)
            }
        }
    };

    let infinite = v.is_none();
    let v = v.unwrap_or_else(|| DVector::zeros(n_u));
    let mut u = MdpControl::zero(grid, d, ctrl_cells);
    for col in 0..n_u {
        let val = v[col] / weight(col).sqrt();
        if col < n_phi {
            u.phi[col] = val;
        } else {
            let c = col - n_phi;
            u.vphi[(c / nc) * ctrl_cells + c % nc] = val;
        }
    }
    let k = sys.solve(&u)?;
    let residual = target.residual(&k)?;
    let feasible = !infinite && residual <= feas_tol;
    Ok(RateResult {
        value: mdp_cost(&u, spec.intensity.as_ref().filter(|_| nc > 0), grid),
        feasible,
        infinite: !feasible,
        control: OptimalControl::Mdp(u),
        achieved_path: k,
        constraint_residual: residual,
        feasibility_tol: feas_tol,
        exact: true,
        best_start: 0,
        trace: Vec::new(),
    })
}

/// Path pins with a tolerance tube: augmented Lagrangian on segment-wise
/// controls of the linear skeleton.
fn mdp_rate_penalized(
    spec: &ModelSpec,
    sys: &MdpSystem,
    target: &EventSpec,
    grid: &TimeGrid,
    cfg: &OptConfig,
    feas_tol: f64,
) -> Result<RateResult> {
    check_opt(cfg, grid)?;
    let (n, d, s) = (grid.n_steps(), spec.dim, cfg.segments);
    let nc = sys.n_cells();
    let ctrl_cells = spec.n_cells();
    let per = d + nc;
    let m = spec.intensity.as_ref().filter(|_| nc > 0);
    let control = |x: &[f64]| -> MdpControl {
        let mut u = MdpControl::zero(grid, d, ctrl_cells);
        for k in 0..n {
            let p = &x[segment_of(k, n, s) * per..];
            u.phi[k * d..(k + 1) * d].copy_from_slice(&p[..d]);
            for j in 0..nc {
                u.vphi[k * ctrl_cells + j] = p[d + j];
            }
        }
        u
    };
    let problem = ConstrainedProblem {
        lower: vec![f64::NEG_INFINITY; s * per],
        upper: vec![f64::INFINITY; s * per],
        eval: Box::new(|x: &[f64]| {
            let u = control(x);
            let k = sys.solve(&u)?;
            Evaluation::of(mdp_cost(&u, m, grid), target, &k)
        }),
    };
    // the problem is convex: one start suffices
    let (_, best, trace) = problem.solve(vec![vec![0.0; s * per]], feas_tol, cfg)?;
    let u = control(&best.x);
    let k = sys.solve(&u)?;
    let feasible = best.residual <= feas_tol;
    Ok(RateResult {
        value: mdp_cost(&u, m, grid),
        feasible,
        infinite: !feasible,
        control: OptimalControl::Mdp(u),
        achieved_path: k,
        constraint_residual: best.residual,
        feasibility_tol: feas_tol,
        exact: false,
        best_start: 0,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, builtin, ModelConfig};
    use crate::skeleton::{solve_limit_ode, solve_mdp_skeleton};
    use proptest::prelude::*;

    fn setup(name: &str, n: usize) -> (ModelSpec, TimeGrid, Path) {
        let m = builtin(name).unwrap();
        let g = TimeGrid::uniform(1.0, n).unwrap();
        let x0 = solve_limit_ode(&m, &g).unwrap();
        (m, g, x0)
    }

    /// Golden-section minimization of a unimodal function.
    fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let (c, d) = (b - r * (b - a), a + r * (b - a));
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        f(0.5 * (a + b))
    }

    #[test]
    fn cost_examples() {
        assert_eq!(ell(1.0).unwrap(), 0.0);
        assert_eq!(ell(0.0).unwrap(), 1.0);
        assert!((ell(1f64.exp()).unwrap() - 1.0).abs() < 1e-15);
        assert!(ell(-0.1).is_err());

        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(q1_cost(&[0.0; 8], 2, &g), 0.0);
        assert!((q1_cost(&[1.0, 0.0].repeat(4), 2, &g) - 0.5).abs() < 1e-15);
        assert!((q1_cost(&[2.0, 2.0, 0.0, 0.0], 1, &g) - 1.0).abs() < 1e-15);

        let m1 = IntensityMeasure::single(vec![1.0], 1.0).unwrap();
        let m2 = IntensityMeasure::single(vec![1.0], 2.0).unwrap();
        assert_eq!(q2_cost(&[1.0; 4], &m1, &g).unwrap(), 0.0);
        assert!((q2_cost(&[0.0; 4], &m2, &g).unwrap() - 2.0).abs() < 1e-15);
        assert!((q2_cost(&[1f64.exp(); 4], &m1, &g).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(q2_cost(&[1.0, -1.0, 1.0, 1.0], &m1, &g), Err(Error::InvalidControl(_))));
    }

    #[test]
    fn zero_rate_at_limit_path() {
        let (m, g, x0) = setup("example11", 100);
        let ev = EventSpec::PinTerminal {
            point: x0.terminal().to_vec(),
            tol: 0.0,
        };
        let r = ldp_rate(&m, &x0, &ev, &g, &OptConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.feasible);
        assert_eq!(r.best_start, 0);
    }

    #[test]
    fn gaussian_channel_rate() {
        let (m, g, x0) = setup("example11", 400);
        let a = 1f64.exp() + 0.5;
        // scan over constant controls phi: Y(1) = X0(1) + phi
        let scan = golden(
            |phi| {
                let u = Control::constant(&g, &[phi], 1.0, 0);
                let y = solve_ldp_skeleton(&m, &x0, &u, &g, &PicardConfig::default()).unwrap();
                0.5 * phi * phi + 1e6 * (y.path.terminal()[0] - a).powi(2)
            },
            -2.0,
            2.0,
        );
        let ev = EventSpec::PinTerminal { point: vec![a], tol: 0.0 };
        let r = ldp_rate(&m, &x0, &ev, &g, &OptConfig::default()).unwrap();
        assert!(r.feasible);
        assert!((r.value - 0.125).abs() < 1e-3, "{}", r.value);
        assert!((r.value - scan).abs() < 1e-3);
    }

    #[test]
    fn jump_channel_rate() {
        let (m, g, x0) = setup("pure_jump", 200);
        let mass = m.intensity.as_ref().unwrap().clone();
        let scan = golden(
            |psi| {
                let u = Control::constant(&g, &[0.0], psi.max(1e-9), 1);
                let y = solve_ldp_skeleton(&m, &x0, &u, &g, &PicardConfig::default()).unwrap();
                q2_cost(u.psi_values(), &mass, &g).unwrap() + 1e6 * (y.path.terminal()[0] - 1.0).powi(2)
            },
            0.5,
            4.0,
        );
        let ev = EventSpec::PinTerminal { point: vec![1.0], tol: 0.0 };
        let r = ldp_rate(&m, &x0, &ev, &g, &OptConfig::default()).unwrap();
        let want = 2.0 * 2f64.ln() - 1.0;
        assert!((r.value - want).abs() < 1e-3, "{}", r.value);
        assert!((scan - want).abs() < 1e-3);
    }

    #[test]
    fn larger_tolerance_never_costs_more() {
        let (m, g, x0) = setup("logistic_mf", 100);
        let cfg = OptConfig {
            starts: 2,
            ..OptConfig::default()
        };
        let mut prev = f64::INFINITY;
        for tol in [0.0, 0.05, 0.1, 0.2] {
            let ev = EventSpec::PinTerminal {
                point: vec![x0.terminal()[0] + 0.4],
                tol,
            };
            let r = ldp_rate(&m, &x0, &ev, &g, &cfg).unwrap();
            assert!(r.feasible);
            assert!(r.value <= prev + 1e-6, "tol {tol}: {} > {prev}", r.value);
            prev = r.value;
        }
    }

    #[test]
    fn result_is_self_consistent() {
        let (m, g, x0) = setup("logistic_mf", 100);
        let ev = EventSpec::Halfspace {
            w: vec![1.0],
            c: x0.terminal()[0] + 0.3,
        };
        let cfg = OptConfig {
            starts: 2,
            ..OptConfig::default()
        };
        let r = ldp_rate(&m, &x0, &ev, &g, &cfg).unwrap();
        let OptimalControl::Ldp(u) = &r.control else { panic!() };
        let y = solve_ldp_skeleton(&m, &x0, u, &g, &cfg.picard).unwrap();
        assert!(y.path.sup_distance(&r.achieved_path).unwrap() < 1e-10);
        assert!((control_cost(&m, u, &g).unwrap() - r.value).abs() < 1e-10);
        assert!(r.constraint_residual <= r.feasibility_tol);
        assert!(!r.trace.is_empty());
    }

    #[test]
    fn unreachable_event_is_infinite() {
        // no noise at all: only X^0 is reachable
        let text = "model = \"custom\"\ndim = 1\ninitial = [1.0]\n[custom]\ndrift_x = [[-1.0]]\n";
        let m = build(ModelConfig::from_toml(text).unwrap()).unwrap();
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        let x0 = solve_limit_ode(&m, &g).unwrap();
        let ev = EventSpec::PinTerminal { point: vec![2.0], tol: 0.0 };
        let r = ldp_rate(&m, &x0, &ev, &g, &OptConfig::default()).unwrap();
        assert!(r.infinite);
        assert_eq!(r.rate(), f64::INFINITY);
        let r = mdp_rate(&m, &x0, &ev, &g, &OptConfig::default()).unwrap();
        assert!(r.infinite);
    }

    #[test]
    fn mdp_rate_examples() {
        // zero-Jacobian mean-field drift, unit sigma: K(1) = int phi, rate r^2 / 2
        let (m, g, x0) = setup("example11", 400);
        let pin = |r: f64| EventSpec::PinTerminal { point: vec![r], tol: 0.0 };
        let r0 = mdp_rate(&m, &x0, &pin(0.0), &g, &OptConfig::default()).unwrap();
        assert_eq!(r0.value, 0.0);
        let r1 = mdp_rate(&m, &x0, &pin(1.0), &g, &OptConfig::default()).unwrap();
        assert!((r1.value - 0.5).abs() < 1e-10);

        // b = x: least-norm rate r^2 / (e^2 - 1), stable under refinement
        let (lg, g, x0) = setup("linear_gaussian", 400);
        let want = 1.0 / (1f64.exp().powi(2) - 1.0);
        let a = mdp_rate(&lg, &x0, &pin(1.0), &g, &OptConfig::default()).unwrap();
        let (_, g2, x02) = setup("linear_gaussian", 800);
        let b = mdp_rate(&lg, &x02, &pin(1.0), &g2, &OptConfig::default()).unwrap();
        assert!((a.value - want).abs() < 1e-4);
        assert!((a.value - b.value).abs() < 1e-6);
        // recomputed cost and skeleton
        let OptimalControl::Mdp(u) = &a.control else { panic!() };
        let k = solve_mdp_skeleton(&lg, &x0, u, &g).unwrap();
        assert!((k.terminal()[0] - 1.0).abs() < 1e-9);
        assert!((mdp_cost(u, None, &g) - a.value).abs() < 1e-10);

        // jump channel only
        let (pj, g, x0) = setup("pure_jump", 200);
        let r = mdp_rate(&pj, &x0, &pin(1.0), &g, &OptConfig::default()).unwrap();
        assert!((r.value - 0.5).abs() < 1e-10);
    }

    #[test]
    fn mdp_rate_tolerance_and_halfspace() {
        let (lg, g, x0) = setup("linear_gaussian", 200);
        let gram = (1f64.exp().powi(2) - 1.0) / 2.0;
        let r = mdp_rate(&lg, &x0, &EventSpec::PinTerminal { point: vec![1.0], tol: 0.25 }, &g, &OptConfig::default())
            .unwrap();
        assert!((r.value - 0.75f64.powi(2) / (2.0 * gram)).abs() < 1e-4);
        let h = mdp_rate(&lg, &x0, &EventSpec::Halfspace { w: vec![2.0], c: 1.0 }, &g, &OptConfig::default()).unwrap();
        assert!((h.value - 1.0 / (2.0 * 4.0 * gram)).abs() < 1e-4);
        let h0 = mdp_rate(&lg, &x0, &EventSpec::Halfspace { w: vec![1.0], c: -1.0 }, &g, &OptConfig::default()).unwrap();
        assert_eq!(h0.value, 0.0);
    }

    #[test]
    fn mdp_rate_path_pin() {
        // K(t) = t exactly under phi = 1 with zero Jacobian
        let (m, g, x0) = setup("example11", 40);
        let target = Path::new(g.clone(), 1, g.nodes().to_vec(), crate::path::Interpolation::Linear).unwrap();
        let r = mdp_rate(&m, &x0, &EventSpec::PinPath { path: target.clone(), tol: 0.0 }, &g, &OptConfig::default())
            .unwrap();
        assert!(r.feasible);
        assert!((r.value - 0.5).abs() < 1e-9);
        let r = mdp_rate(&m, &x0, &EventSpec::PinPath { path: target, tol: 0.1 }, &g, &OptConfig::default())
            .unwrap();
        assert!(r.feasible);
        assert!(r.value < 0.5 && r.value > 0.3, "{}", r.value);
    }

    #[test]
    fn mdp_rate_scales_quadratically() {
        let (m, g, x0) = setup("logistic_mf", 100);
        let pin = |r: f64| EventSpec::PinTerminal { point: vec![r], tol: 0.0 };
        let base = mdp_rate(&m, &x0, &pin(1.0), &g, &OptConfig::default()).unwrap().value;
        for r in [0.1, 0.5, 3.0] {
            let v = mdp_rate(&m, &x0, &pin(r), &g, &OptConfig::default()).unwrap().value;
            assert!((v - r * r * base).abs() < 1e-8 * (1.0 + v));
        }
    }

    #[test]
    fn mdp_matches_small_ldp() {
        // sigma-only nonlinear model: LDP(X0 + a r) / a^2 ~ MDP(r), a = eps^(1/4)
        let cfg_model = ModelConfig::builtin("logistic_mf").with_param("jump_scale", 0.0);
        let m = build(cfg_model).unwrap();
        let g = TimeGrid::uniform(1.0, 200).unwrap();
        let x0 = solve_limit_ode(&m, &g).unwrap();
        let a = 1e-2f64.powf(0.25);
        let delta = a * 0.1;
        let ldp = ldp_rate(
            &m,
            &x0,
            &EventSpec::PinTerminal {
                point: vec![x0.terminal()[0] + delta],
                tol: 0.0,
            },
            &g,
            &OptConfig {
                starts: 1,
                ..OptConfig::default()
            },
        )
        .unwrap();
        let mdp = mdp_rate(&m, &x0, &EventSpec::PinTerminal { point: vec![delta], tol: 0.0 }, &g, &OptConfig::default())
            .unwrap();
        assert!((ldp.value / mdp.value - 1.0).abs() < 0.05, "{} vs {}", ldp.value, mdp.value);
        // the gap is second order: halving the displacement halves it
        let ldp2 = ldp_rate(
            &m,
            &x0,
            &EventSpec::PinTerminal {
                point: vec![x0.terminal()[0] + delta / 2.0],
                tol: 0.0,
            },
            &g,
            &OptConfig {
                starts: 1,
                ..OptConfig::default()
            },
        )
        .unwrap();
        let gap = (ldp.value / mdp.value - 1.0).abs();
        let gap2 = (4.0 * ldp2.value / mdp.value - 1.0).abs();
        assert!(gap2 < 0.7 * gap, "{gap2} vs {gap}");
    }

    #[test]
    fn event_membership_and_rescaling() {
        let ev = EventSpec::Halfspace { w: vec![1.0], c: 1.0 };
        // lattice value eps * n - 1 landing on the boundary
        assert!(ev.contains_terminal(&[0.05 * 40.0 - 1.0]));
        assert!(!ev.contains_terminal(&[0.99]));
        let (_, g, x0) = setup("example11", 10);
        let r = ev.rescaled(&x0, 0.5).unwrap();
        let EventSpec::Halfspace { c, .. } = r else { panic!() };
        assert!((c - (1.0 - x0.terminal()[0]) / 0.5).abs() < 1e-15);
        let _ = g;
        assert!(EventSpec::Halfspace { w: vec![0.0], c: 1.0 }.validate(1).is_err());
    }

    proptest! {
        #[test]
        fn q2_nonnegative_zero_only_at_one(psi in prop::collection::vec(0.0..5.0f64, 8)) {
            let g = TimeGrid::uniform(1.0, 4).unwrap();
            let m = IntensityMeasure::new(1, vec![(vec![1.0], 0.7), (vec![-1.0], 1.3)]).unwrap();
            let q = q2_cost(&psi, &m, &g).unwrap();
            prop_assert!(q >= 0.0);
            let ones = psi.iter().all(|&p| p == 1.0);
            prop_assert_eq!(q == 0.0, ones);
        }
    }
}
