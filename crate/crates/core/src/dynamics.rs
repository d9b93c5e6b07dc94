//! Euler time stepping of the interacting particle system and its controlled
//! variants.
//!
//! Every simulator shares one per-particle kernel: drift and diffusion at the
//! left endpoint with the empirical law of that node, then the jumps of the
//! step in time order, each evaluated at the pre-jump state. The compensator
//! is always `-dt * int G dnu`: for a tilted jump measure,
//! `eps * (N^{psi/eps} - psi/eps nu dt) + (psi - 1) nu dt = eps N^{psi/eps} - nu dt`,
//! so the tilt-compensation drift and the tilted compensator cancel exactly.
//! With the null control the controlled simulators therefore reproduce the
//! uncontrolled one bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{Control, MdpControl};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::levy::{sample_controlled_prm, sample_prm, JumpEvent, JumpStream};
use crate::measure::EmpiricalMeasure;
use crate::model::{LawSummary, LawUsage, ModelConfig, ModelSpec};
use crate::path::{Interpolation, Path};
use crate::rng::{Purpose, SeedBlock};
use crate::skeleton::OVERFLOW_GUARD;

/// Which nodes of the particle states are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Record {
    Full,
    /// Only the terminal states; per-node moments are always kept.
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Uncontrolled,
    Frozen,
    SelfConsistent,
    Mdp,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub record: Record,
    /// Track `sup_k |x_i(t_k) - g(t_k)|` per particle.
    pub track_sup_from: Option<Path>,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            record: Record::Full,
            track_sup_from: None,
            jobs: None,
        }
    }
}

impl SimOptions {
    pub fn terminal() -> Self {
        Self {
            record: Record::Terminal,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    kind: EnsembleKind,
    grid: TimeGrid,
    dim: usize,
    n: usize,
    eps: f64,
    seed_block: SeedBlock,
    model: ModelConfig,
    record: Record,
    states: Vec<f64>,
    terminal_at: usize,
    means: Vec<f64>,
    variances: Vec<f64>,
    second_moments: Vec<f64>,
    sup_dev: Option<Vec<f64>>,
    clamped: usize,
}

impl ParticleEnsemble {
    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_particles(&self) -> usize {
        self.n
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn seed_block(&self) -> SeedBlock {
        self.seed_block
    }
    pub fn record(&self) -> Record {
        self.record
    }
    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    /// Empirical mean at node `k`.
    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    /// Componentwise empirical variance (divisor `N`) at node `k`.
    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    pub fn second_moment(&self, k: usize) -> f64 {
        self.second_moments[k]
    }

    /// Particle-major `N x d` states at the final node.
    pub fn terminal(&self) -> &[f64] {
        let off = self.terminal_at;
        &self.states[off..off + self.n * self.dim]
    }

    /// Particle-major states at node `k`, if recorded.
    pub fn states_at(&self, k: usize) -> Option<&[f64]> {
        let nd = self.n * self.dim;
        match self.record {
            Record::Full => Some(&self.states[k * nd..(k + 1) * nd]),
            Record::Terminal if k == self.grid.n_steps() => Some(self.terminal()),
            Record::Terminal => None,
        }
    }

    pub fn path(&self, i: usize) -> Result<Path> {
        if self.record != Record::Full {
            return Err(Error::Unsupported("paths need a fully recorded ensemble".into()));
        }
        if i >= self.n {
            return Err(Error::InvalidArgument(format!("particle {i} of {}", self.n)));
        }
        let d = self.dim;
        let values = (0..self.grid.n_nodes())
            .flat_map(|k| self.states_at(k).unwrap()[i * d..(i + 1) * d].to_vec())
            .collect();
        Path::new(self.grid.clone(), d, values, Interpolation::CadlagStep)
    }

    /// The empirical law `mu_N(t_k)`.
    pub fn law_flow(&self, k: usize) -> Result<EmpiricalMeasure> {
        let atoms = self
            .states_at(k)
            .ok_or_else(|| Error::Unsupported(format!("node {k} was not recorded")))?;
        EmpiricalMeasure::new(self.dim, atoms.to_vec())
    }

    /// The measure argument at node `k`, as much of it as was recorded.
    pub fn law_summary(&self, k: usize) -> LawSummary<'_> {
        match self.states_at(k) {
            Some(atoms) => LawSummary::Empirical {
                atoms,
                mean: self.mean(k),
            },
            None => LawSummary::Mean(self.mean(k)),
        }
    }

    /// Per-particle `sup_k |x_i(t_k) - g(t_k)|`, if tracked.
    pub fn sup_deviation(&self) -> Option<&[f64]> {
        self.sup_dev.as_deref()
    }

    /// Number of tilt cells clamped into the admissible range (MDP runs).
    pub fn clamped(&self) -> usize {
        self.clamped
    }
}

/// The driving noise of one ensemble, reproducible from its seeds.
#[derive(Debug, Clone)]
pub struct NoiseBundle<'a> {
    spec: &'a ModelSpec,
    eps: f64,
    grid: &'a TimeGrid,
    seeds: SeedBlock,
}

impl<'a> NoiseBundle<'a> {
    pub fn new(spec: &'a ModelSpec, eps: f64, grid: &'a TimeGrid, seed: u64) -> Self {
        Self {
            spec,
            eps,
            grid,
            seeds: SeedBlock::new(seed),
        }
    }

    /// Step-major Brownian increments of particle `i`, variance `dt` each.
    pub fn brownian(&self, i: usize) -> Vec<f64> {
        let mut rng = self.seeds.particle_rng(i, Purpose::Brownian);
        let d = self.spec.dim;
        (0..self.grid.n_steps())
            .flat_map(|k| {
                let sdt = self.grid.dt(k).sqrt();
                (0..d)
                    .map(|_| sdt * rng.sample::<f64, _>(StandardNormal))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Jump times and cells of particle `i`, tilted by `psi` when given.
    pub fn jumps(&self, i: usize, psi: Option<&Control>) -> Result<Option<JumpStream>> {
        let Some(m) = self.spec.intensity.as_ref().filter(|_| self.spec.has_jumps()) else {
            return Ok(None);
        };
        let seed = self.seeds.particle_seed(i, Purpose::Jumps);
        let rate = 1.0 / self.eps;
        Ok(Some(match psi {
            Some(psi) => sample_controlled_prm(m, psi, rate, self.grid, seed)?,
            None => sample_prm(m, rate, self.grid, seed)?,
        }))
    }
}

struct Particle {
    rng: ChaCha8Rng,
    jumps: Vec<JumpEvent>,
    cursor: usize,
    sup: f64,
}

enum LawSource<'a> {
    Own,
    Frozen(&'a ParticleEnsemble),
}

/// Moderate-deviation rescaling `M = (X - X^0) / a`.
struct MdpFrame<'a> {
    a: f64,
    x0: &'a Path,
    /// `b(t_k, X^0(t_k), delta_{X^0(t_k)})` per step.
    b0: Vec<f64>,
}

struct Run<'a> {
    spec: &'a ModelSpec,
    eps: f64,
    n: usize,
    grid: &'a TimeGrid,
    seed: u64,
    law: LawSource<'a>,
    /// Step-major drift shifts and a per-step activity flag.
    phi: Option<(Vec<f64>, Vec<bool>)>,
    psi: Option<Control>,
    mdp: Option<MdpFrame<'a>>,
    kind: EnsembleKind,
    clamped: usize,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

fn check_grid(spec: &ModelSpec, grid: &TimeGrid) -> Result<()> {
    if (grid.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon.max(1.0) {
        return Err(Error::IncompatibleGrids(format!(
            "grid horizon {} differs from model horizon {}",
            grid.horizon(),
            spec.horizon
        )));
    }
    Ok(())
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

fn check_frozen(spec: &ModelSpec, eps: f64, grid: &TimeGrid, frozen: &ParticleEnsemble) -> Result<()> {
    let bad = |why: String| Err(Error::IncompatibleFrozenLaw(why));
    if frozen.kind != EnsembleKind::Uncontrolled {
        return bad(format!("frozen law must come from an uncontrolled run, got {:?}", frozen.kind));
    }
    if frozen.grid != *grid {
        return bad("frozen ensemble was simulated on a different grid".into());
    }
    if frozen.eps != eps {
        return bad(format!("frozen ensemble has eps {}, requested {eps}", frozen.eps));
    }
    if frozen.model != spec.config {
        return bad(format!("frozen ensemble belongs to model {}", frozen.model.model));
    }
    if spec.law_usage() == LawUsage::Cloud && frozen.record != Record::Full {
        return bad("model reads the whole law; the frozen ensemble must be fully recorded".into());
    }
    Ok(())
}

fn phi_from(u: &Control) -> Option<(Vec<f64>, Vec<bool>)> {
    let active: Vec<bool> = (0..u.n_steps()).map(|k| u.has_phi(k)).collect();
    active
        .iter()
        .any(|&a| a)
        .then(|| (u.phi_values().to_vec(), active))
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidArgument("jobs must be at least 1".into())),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Fills per-node mean, variance and second moment of `cur` (particle-major).
fn moments(cur: &[f64], n: usize, d: usize, mean: &mut [f64], var: &mut [f64]) -> f64 {
    mean.fill(0.0);
    var.fill(0.0);
    let mut m2 = 0.0;
    for x in cur.chunks_exact(d) {
        for i in 0..d {
            mean[i] += x[i];
            m2 += x[i] * x[i];
        }
    }
    for v in mean.iter_mut() {
        *v /= n as f64;
    }
    for x in cur.chunks_exact(d) {
        for i in 0..d {
            let c = x[i] - mean[i];
            var[i] += c * c;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    m2 / n as f64
}

impl<'a> Run<'a> {
    fn execute(self, opts: &SimOptions) -> Result<ParticleEnsemble> {
        in_pool(opts.jobs, || self.execute_inner(opts))?
    }

    fn execute_inner(self, opts: &SimOptions) -> Result<ParticleEnsemble> {
        let spec = self.spec;
        let grid = self.grid;
        let (d, n, eps) = (spec.dim, self.n, self.eps);
        let n_nodes = grid.n_nodes();
        let seeds = SeedBlock::new(self.seed);
        let noise = NoiseBundle::new(spec, eps, grid, self.seed);
        if let Some(g) = &opts.track_sup_from {
            g.grid().check_same(grid)?;
            if g.dim() != d {
                return Err(Error::InvalidArgument("sup reference has wrong dimension".into()));
            }
        }

        let mut particles: Vec<Particle> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<Particle> {
                let jumps = noise.jumps(i, self.psi.as_ref())?.map_or(Vec::new(), |s| s.events);
                Ok(Particle {
                    rng: seeds.particle_rng(i, Purpose::Brownian),
                    jumps,
                    cursor: 0,
                    sup: 0.0,
                })
            })
            .collect::<Result<_>>()?;

        let init: Vec<f64> = match &self.mdp {
            Some(_) => vec![0.0; d],
            None => spec.initial.clone(),
        };
        let mut cur: Vec<f64> = init.iter().copied().cycle().take(n * d).collect();
        let full = opts.record == Record::Full;
        let mut states = Vec::with_capacity(if full { n_nodes * n * d } else { n * d });
        let mut means = vec![0.0; n_nodes * d];
        let mut variances = vec![0.0; n_nodes * d];
        let mut second_moments = vec![0.0; n_nodes];

        let track = |cur: &[f64], parts: &mut [Particle], k: usize| {
            if let Some(g) = &opts.track_sup_from {
                let gk = g.at(k);
                parts.par_iter_mut().zip(cur.par_chunks_exact(d)).for_each(|(p, x)| {
                    let dev = x
                        .iter()
                        .zip(gk)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    p.sup = p.sup.max(dev);
                });
            }
        };

        second_moments[0] = moments(&cur, n, d, &mut means[..d], &mut variances[..d]);
        if full {
            states.extend_from_slice(&cur);
        }
        track(&cur, &mut particles, 0);

        let needs_cloud = spec.law_usage() == LawUsage::Cloud;
        let has_jumps = spec.has_jumps();
        let noisy = !spec.coefficients.diffusion_free();
        let sqrt_eps = eps.sqrt();
        let mut snapshot = Vec::new();

        for k in 0..grid.n_steps() {
            let (t, dt, t1) = (grid.node(k), grid.dt(k), grid.node(k + 1));
            let own_mean = means[k * d..(k + 1) * d].to_vec();
            let law = match &self.law {
                LawSource::Frozen(f) => f.law_summary(k),
                LawSource::Own if needs_cloud => {
                    snapshot.clear();
                    snapshot.extend_from_slice(&cur);
                    LawSummary::Empirical {
                        atoms: &snapshot,
                        mean: &own_mean,
                    }
                }
                LawSource::Own => LawSummary::Mean(&own_mean),
            };
            let phi_k = self
                .phi
                .as_ref()
                .filter(|(_, active)| active[k])
                .map(|(v, _)| &v[k * d..(k + 1) * d]);
            let mdp = self.mdp.as_ref().map(|f| (f.a, f.x0.at(k), &f.b0[k * d..(k + 1) * d]));
            let c = &spec.coefficients;

            cur.par_chunks_exact_mut(d)
                .zip(particles.par_iter_mut())
                .try_for_each_init(
                    || (vec![0.0; d], vec![0.0; d], vec![0.0; d * d], vec![0.0; d], vec![0.0; d], vec![0.0; d]),
                    |(xe, inc, sig, dw, tmp, pre), (x, p)| -> Result<()> {
                        match mdp {
                            Some((a, x0k, _)) => {
                                for i in 0..d {
                                    xe[i] = x0k[i] + a * x[i];
                                }
                            }
                            None => xe.copy_from_slice(x),
                        }
                        c.drift(t, xe, &law, eps, tmp);
                        for i in 0..d {
                            inc[i] = tmp[i] * dt;
                        }
                        if noisy {
                            c.diffusion(t, xe, &law, eps, sig);
                            let sdt = dt.sqrt();
                            for w in dw.iter_mut() {
                                *w = sdt * p.rng.sample::<f64, _>(StandardNormal);
                            }
                            for i in 0..d {
                                inc[i] += sqrt_eps * (0..d).map(|j| sig[i * d + j] * dw[j]).sum::<f64>();
                            }
                            if let Some(phi) = phi_k {
                                let scale = mdp.map_or(1.0, |m| m.0);
                                for i in 0..d {
                                    inc[i] += scale * (0..d).map(|j| sig[i * d + j] * phi[j]).sum::<f64>() * dt;
                                }
                            }
                        }
                        if has_jumps {
                            tmp.fill(0.0);
                            spec.add_jump_integral(t, xe, &law, eps, None, pre, tmp);
                            for i in 0..d {
                                inc[i] -= tmp[i] * dt;
                            }
                            let m = spec.intensity.as_ref().unwrap();
                            while let Some(ev) = p.jumps.get(p.cursor).filter(|e| e.time <= t1) {
                                for i in 0..d {
                                    pre[i] = xe[i] + inc[i];
                                }
                                c.jump(ev.time, pre, &law, m.mark(ev.cell), eps, tmp);
                                for i in 0..d {
                                    inc[i] += eps * tmp[i];
                                }
                                p.cursor += 1;
                            }
                        }
                        match mdp {
                            Some((a, _, b0)) => {
                                for i in 0..d {
                                    x[i] += (inc[i] - b0[i] * dt) / a;
                                }
                            }
                            None => {
                                for i in 0..d {
                                    x[i] += inc[i];
                                }
                            }
                        }
                        if x.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_GUARD) {
                            return Err(Error::Diverged {
                                step: k + 1,
                                detail: "particle state left the overflow guard".into(),
                            });
                        }
                        Ok(())
                    },
                )?;

            let (lo, hi) = ((k + 1) * d, (k + 2) * d);
            second_moments[k + 1] = moments(&cur, n, d, &mut means[lo..hi], &mut variances[lo..hi]);
            if full {
                states.extend_from_slice(&cur);
            }
            track(&cur, &mut particles, k + 1);
        }

        if !full {
            states = cur;
        }
        let terminal_at = if full { grid.n_steps() * n * d } else { 0 };
        Ok(ParticleEnsemble {
            kind: self.kind,
            grid: grid.clone(),
            dim: d,
            n,
            eps,
            seed_block: seeds,
            model: spec.config.clone(),
            record: opts.record,
            states,
            terminal_at,
            means,
            variances,
            second_moments,
            sup_dev: opts
                .track_sup_from
                .as_ref()
                .map(|_| particles.iter().map(|p| p.sup).collect()),
            clamped: self.clamped,
        })
    }
}

/// The interacting particle approximation of the McKean-Vlasov equation at
/// noise level `eps`, with `N` particles.
pub fn simulate_mvsde(
    spec: &ModelSpec,
    eps: f64,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
    opts: &SimOptions,
) -> Result<ParticleEnsemble> {
    check_eps(eps)?;
    check_grid(spec, grid)?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 particles, got {n}")));
    }
    Run {
        spec,
        eps,
        n,
        grid,
        seed,
        law: LawSource::Own,
        phi: None,
        psi: None,
        mdp: None,
        kind: EnsembleKind::Uncontrolled,
        clamped: 0,
    }
    .execute(opts)
}

/// `M` replicas of the controlled equation whose measure argument is the
/// stored law flow of the uncontrolled ensemble `frozen`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_controlled_frozen(
    spec: &ModelSpec,
    eps: f64,
    u: &Control,
    frozen: &ParticleEnsemble,
    m: usize,
    grid: &TimeGrid,
    seed: u64,
    opts: &SimOptions,
) -> Result<ParticleEnsemble> {
    check_eps(eps)?;
    check_grid(spec, grid)?;
    check_control(spec, u, grid)?;
    check_frozen(spec, eps, grid, frozen)?;
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one replica".into()));
    }
    Run {
        spec,
        eps,
        n: m,
        grid,
        seed,
        law: LawSource::Frozen(frozen),
        phi: phi_from(u),
        psi: spec.has_jumps().then(|| u.clone()),
        mdp: None,
        kind: EnsembleKind::Frozen,
        clamped: 0,
    }
    .execute(opts)
}

/// The controlled particle system with the law taken from the controlled
/// particles themselves. Kept as a negative control.
pub fn simulate_controlled_selfconsistent(
    spec: &ModelSpec,
    eps: f64,
    u: &Control,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
    opts: &SimOptions,
) -> Result<ParticleEnsemble> {
    check_eps(eps)?;
    check_grid(spec, grid)?;
    check_control(spec, u, grid)?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 particles, got {n}")));
    }
    Run {
        spec,
        eps,
        n,
        grid,
        seed,
        law: LawSource::Own,
        phi: phi_from(u),
        psi: spec.has_jumps().then(|| u.clone()),
        mdp: None,
        kind: EnsembleKind::SelfConsistent,
        clamped: 0,
    }
    .execute(opts)
}

/// `M` replicas of the rescaled fluctuation `M = (X - X^0) / a` under the
/// control `(phi, vphi)`, with jump tilt `psi = clamp(1 + a vphi, lo, hi)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_mdp_controlled(
    spec: &ModelSpec,
    eps: f64,
    a_eps: f64,
    u: &MdpControl,
    psi_bounds: (f64, f64),
    frozen: &ParticleEnsemble,
    x0: &Path,
    m: usize,
    grid: &TimeGrid,
    seed: u64,
    opts: &SimOptions,
) -> Result<ParticleEnsemble> {
    check_eps(eps)?;
    check_grid(spec, grid)?;
    check_frozen(spec, eps, grid, frozen)?;
    x0.grid().check_same(grid)?;
    u.validate()?;
    if !(a_eps > 0.0 && a_eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("a(eps) must be positive, got {a_eps}")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one replica".into()));
    }
    if u.n_steps != grid.n_steps() || u.dim != spec.dim || u.n_cells != spec.n_cells() {
        return Err(Error::InvalidControl("MDP control does not match grid/model".into()));
    }
    let (lo, hi) = psi_bounds;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::InvalidMdpTilt(format!(
            "tilt 1 + a vphi cannot be kept positive with bounds ({lo}, {hi})"
        )));
    }
    let mut clamped = 0;
    let psi = if spec.has_jumps() {
        let values: Vec<f64> = u
            .vphi
            .iter()
            .map(|v| {
                let raw = 1.0 + a_eps * v;
                let c = raw.clamp(lo, hi);
                clamped += usize::from(c != raw);
                c
            })
            .collect();
        let zeros = vec![0.0; u.n_steps * u.dim];
        Some(Control::new(u.n_steps, u.dim, u.n_cells, zeros, values, psi_bounds)?)
    } else {
        None
    };
    let d = spec.dim;
    let mut b0 = vec![0.0; grid.n_steps() * d];
    for k in 0..grid.n_steps() {
        let xk = x0.at(k);
        spec.coefficients
            .drift(grid.node(k), xk, &LawSummary::Dirac(xk), 0.0, &mut b0[k * d..(k + 1) * d]);
    }
    let active: Vec<bool> = (0..u.n_steps).map(|k| u.phi(k).iter().any(|&v| v != 0.0)).collect();
    let phi = active.iter().any(|&a| a).then(|| (u.phi.clone(), active));
    Run {
        spec,
        eps,
        n: m,
        grid,
        seed,
        law: LawSource::Frozen(frozen),
        phi,
        psi,
        mdp: Some(MdpFrame { a: a_eps, x0, b0 }),
        kind: EnsembleKind::Mdp,
        clamped,
    }
    .execute(opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, builtin, ModelConfig};
    use crate::skeleton::solve_limit_ode;

    fn mean_sd(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn deterministic_and_schedule_independent() {
        let m = builtin("logistic_mf").unwrap();
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        let run = |jobs| {
            let opts = SimOptions {
                jobs: Some(jobs),
                ..SimOptions::default()
            };
            simulate_mvsde(&m, 0.1, 64, &g, 9, &opts).unwrap()
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.states, b.states);
        assert_eq!(a.means, b.means);
        let c = simulate_mvsde(&m, 0.1, 64, &g, 10, &SimOptions::default()).unwrap();
        assert_ne!(a.terminal(), c.terminal());
    }

    #[test]
    fn ensemble_invariants() {
        let m = builtin("logistic_mf").unwrap();
        let g = TimeGrid::uniform(1.0, 20).unwrap();
        let e = simulate_mvsde(&m, 0.1, 16, &g, 1, &SimOptions::default()).unwrap();
        for k in 0..=20 {
            let law = e.law_flow(k).unwrap();
            for i in 0..16 {
                assert_eq!(law.atom(i), e.path(i).unwrap().at(k));
            }
            assert!((law.mean()[0] - e.mean(k)[0]).abs() < 1e-12);
        }
        assert!(matches!(
            simulate_mvsde(&m, 0.1, 1, &g, 1, &SimOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
        let t = simulate_mvsde(&m, 0.1, 16, &g, 1, &SimOptions::terminal()).unwrap();
        assert_eq!(t.terminal(), e.terminal());
        assert!(t.law_flow(3).is_err());
    }

    #[test]
    fn noise_bundle_reproduces_the_simulation() {
        // with b = 0, sigma = 1 the path is the sum of its increments
        let text = "model = \"custom\"\ndim = 1\ninitial = [0.0]\nn_steps = 10\n[custom]\ndiffusion = [[1.0]]\n";
        let m = build(ModelConfig::from_toml(text).unwrap()).unwrap();
        let g = m.grid().unwrap();
        let eps = 0.25;
        let e = simulate_mvsde(&m, eps, 4, &g, 3, &SimOptions::default()).unwrap();
        let nb = NoiseBundle::new(&m, eps, &g, 3);
        for i in 0..4 {
            let w = nb.brownian(i);
            let mut x = 0.0;
            for k in 0..10 {
                x += 0.5 * w[k];
                assert_eq!(x, e.path(i).unwrap().at(k + 1)[0]);
            }
        }
    }

    #[test]
    fn example11_mean_grows_exponentially() {
        let m = builtin("example11").unwrap();
        let g = TimeGrid::uniform(1.0, 400).unwrap();
        let e = simulate_mvsde(&m, 0.01, 2000, &g, 11, &SimOptions::terminal()).unwrap();
        let tol = 3.0 * (0.01f64 / 2000.0).sqrt() * 1f64.exp();
        assert!((e.mean(400)[0] - 1f64.exp()).abs() < tol);
    }

    #[test]
    fn noiseless_reduces_to_euler() {
        let g = TimeGrid::uniform(1.0, 100).unwrap();
        // constant drift: Euler and RK4 are both exact
        let text = "model = \"custom\"\ndim = 1\ninitial = [0.5]\nn_steps = 100\n[custom]\ndrift_const = [2.0]\n";
        let m = build(ModelConfig::from_toml(text).unwrap()).unwrap();
        let e = simulate_mvsde(&m, 0.3, 2, &g, 0, &SimOptions::default()).unwrap();
        let x0 = solve_limit_ode(&m, &g).unwrap();
        for k in 0..=100 {
            assert!((e.mean(k)[0] - x0.at(k)[0]).abs() < 1e-12);
        }
        // nonlinear drift against a hand-rolled Euler recursion
        let text = "model = \"custom\"\ndim = 1\ninitial = [0.5]\n[custom]\ndrift_x = [[1.0]]\ndrift_poly = [[-1.0]]\n";
        let m = build(ModelConfig::from_toml(text).unwrap()).unwrap();
        let e = simulate_mvsde(&m, 0.3, 2, &g, 0, &SimOptions::default()).unwrap();
        let mut x = 0.5f64;
        for k in 0..100 {
            x += (x - x * x) * g.dt(k);
            assert!((e.path(0).unwrap().at(k + 1)[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_jump_is_centered_and_lattice_valued() {
        let m = builtin("pure_jump").unwrap();
        let g = TimeGrid::uniform(1.0, 100).unwrap();
        let eps = 0.05;
        let e = simulate_mvsde(&m, eps, 2000, &g, 5, &SimOptions::default()).unwrap();
        let xs = e.terminal();
        for &x in xs {
            let count = (x + 1.0) / eps;
            assert!((count - count.round()).abs() < 1e-6);
        }
        let (mean, sd) = mean_sd(xs);
        assert!(mean.abs() < 4.0 * sd, "mean {mean} sd {sd}");
        // compensator neutrality at every node
        for k in 0..=100 {
            let sd_k = (e.variance(k)[0] / 2000.0).sqrt().max(1e-12);
            assert!(e.mean(k)[0].abs() <= 4.0 * sd_k + 1e-12, "node {k}");
        }
    }

    #[test]
    fn null_control_is_bit_identical() {
        for name in ["logistic_mf", "example11", "pure_jump"] {
            let m = builtin(name).unwrap();
            let g = TimeGrid::uniform(1.0, 40).unwrap();
            let e = simulate_mvsde(&m, 0.1, 32, &g, 21, &SimOptions::default()).unwrap();
            let u = Control::null(&g, 1, m.n_cells());
            let f = simulate_controlled_frozen(&m, 0.1, &u, &e, 32, &g, 21, &SimOptions::default()).unwrap();
            assert_eq!(e.states, f.states, "{name}");
            let s = simulate_controlled_selfconsistent(&m, 0.1, &u, 32, &g, 21, &SimOptions::default())
                .unwrap();
            assert_eq!(e.states, s.states, "{name}");
        }
    }

    #[test]
    fn frozen_and_selfconsistent_controls_differ() {
        let m = builtin("example11").unwrap();
        let g = TimeGrid::uniform(1.0, 20_000).unwrap();
        let (eps, n) = (1e-4, 500);
        let frozen = simulate_mvsde(&m, eps, n, &g, 1, &SimOptions::terminal()).unwrap();
        let u = Control::constant(&g, &[1.0], 1.0, 0);
        let f = simulate_controlled_frozen(&m, eps, &u, &frozen, n, &g, 2, &SimOptions::terminal()).unwrap();
        // replica noise plus the integrated noise of the frozen mean
        let sd = (eps / n as f64 + 0.757 * eps / n as f64).sqrt();
        let e = 1f64.exp();
        assert!((f.mean(20_000)[0] - (e + 1.0)).abs() < 3.0 * sd);

        let s = simulate_controlled_selfconsistent(&m, eps, &u, n, &g, 3, &SimOptions::terminal()).unwrap();
        // Var of the self-consistent mean: eps / N * int_0^1 e^{2(1-r)} dr
        let sd = (eps / n as f64 * (e * e - 1.0) / 2.0).sqrt();
        assert!((s.mean(20_000)[0] - (2.0 * e - 1.0)).abs() < 3.0 * sd);
    }

    #[test]
    fn tilted_pure_jump_mean() {
        let m = builtin("pure_jump").unwrap();
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        let eps = 0.05;
        let frozen = simulate_mvsde(&m, eps, 2, &g, 1, &SimOptions::terminal()).unwrap();
        let u = Control::constant(&g, &[0.0], 2.0, 1);
        let f = simulate_controlled_frozen(&m, eps, &u, &frozen, 4000, &g, 2, &SimOptions::terminal()).unwrap();
        let (mean, _) = mean_sd(f.terminal());
        let sd = (2.0 * eps / 4000.0).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * sd, "mean {mean}");
    }

    #[test]
    fn frozen_law_must_match() {
        let m = builtin("example11").unwrap();
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let e = simulate_mvsde(&m, 0.1, 4, &g, 1, &SimOptions::default()).unwrap();
        let u = Control::null(&g, 1, 0);
        let err = |r: Result<ParticleEnsemble>| matches!(r, Err(Error::IncompatibleFrozenLaw(_)));
        assert!(err(simulate_controlled_frozen(&m, 0.2, &u, &e, 4, &g, 1, &SimOptions::default())));
        let lg = builtin("linear_gaussian").unwrap();
        assert!(err(simulate_controlled_frozen(&lg, 0.1, &u, &e, 4, &g, 1, &SimOptions::default())));
        let g2 = TimeGrid::uniform(1.0, 20).unwrap();
        let e2 = simulate_mvsde(&m, 0.1, 4, &g2, 1, &SimOptions::default()).unwrap();
        assert!(err(simulate_controlled_frozen(&m, 0.1, &u, &e2, 4, &g, 1, &SimOptions::default())));
        let f = simulate_controlled_frozen(&m, 0.1, &u, &e, 4, &g, 1, &SimOptions::default()).unwrap();
        assert!(err(simulate_controlled_frozen(&m, 0.1, &u, &f, 4, &g, 1, &SimOptions::default())));
    }

    #[test]
    fn mdp_fluctuation_variance() {
        // linear drift b = x: M(1) is Gaussian with variance (eps/a^2)(e^2-1)/2
        // plus O(dt) Euler error; mean-field b = mean: variance eps/a^2
        let g = TimeGrid::uniform(1.0, 400).unwrap();
        let (eps, a) = (1e-4, 1e-1);
        let reps = 10_000;
        for (name, var) in [
            ("linear_gaussian", (1f64.exp().powi(2) - 1.0) / 2.0),
            ("example11", 1.0),
        ] {
            let m = builtin(name).unwrap();
            let x0 = solve_limit_ode(&m, &g).unwrap();
            let frozen = simulate_mvsde(&m, eps, reps, &g, 1, &SimOptions::terminal()).unwrap();
            let u = MdpControl::zero(&g, 1, 0);
            let e = simulate_mdp_controlled(&m, eps, a, &u, (1e-3, 1e3), &frozen, &x0, reps, &g, 2, &SimOptions::terminal())
                .unwrap();
            let target = eps / (a * a) * var;
            // sample variance has relative sd sqrt(2/reps)
            let v = e.variance(400)[0];
            assert!((v / target - 1.0).abs() < 5.0 * (2.0 / reps as f64).sqrt() + 0.01, "{name}: {v} vs {target}");
        }
    }

    #[test]
    fn mdp_drift_shift_mean() {
        let g = TimeGrid::uniform(1.0, 2000).unwrap();
        let (eps, c) = (1e-6f64, 0.5);
        let a = eps.powf(0.25);
        let reps = 400;
        // b = x: mean c(e-1); b = mean(law): mean c
        for (name, want) in [("linear_gaussian", c * (1f64.exp() - 1.0)), ("example11", c)] {
            let m = builtin(name).unwrap();
            let x0 = solve_limit_ode(&m, &g).unwrap();
            let frozen = simulate_mvsde(&m, eps, reps, &g, 1, &SimOptions::terminal()).unwrap();
            let u = MdpControl::constant(&g, &[c], 0.0, 0);
            let e = simulate_mdp_controlled(&m, eps, a, &u, (1e-3, 1e3), &frozen, &x0, reps, &g, 2, &SimOptions::terminal())
                .unwrap();
            let (mean, sd) = mean_sd(e.terminal());
            // Euler drift of the frozen mean against RK4 X^0 adds O(dt / a)
            let bias = 1f64.exp() * g.dt(0) / a;
            assert!((mean - want).abs() < 3.0 * sd + bias, "{name}: {mean} vs {want}");
        }
    }

    #[test]
    fn mdp_noiseless_is_zero_and_clamps_are_counted() {
        let text = "model = \"custom\"\ndim = 1\ninitial = [1.0]\n[custom]\ndrift_x = [[-1.0]]\n";
        let m = build(ModelConfig::from_toml(text).unwrap()).unwrap();
        let g = TimeGrid::uniform(1.0, 400).unwrap();
        let x0 = solve_limit_ode(&m, &g).unwrap();
        let frozen = simulate_mvsde(&m, 1e-3, 2, &g, 1, &SimOptions::terminal()).unwrap();
        let e = simulate_mdp_controlled(&m, 1e-3, 0.1, &MdpControl::zero(&g, 1, 0), (1e-3, 1e3), &frozen, &x0, 3, &g, 1, &SimOptions::default())
            .unwrap();
        // the Euler/RK4 gap of the deterministic path only
        assert!(e.terminal().iter().all(|&v| v == 0.0));

        let pj = builtin("pure_jump").unwrap();
        let x0 = solve_limit_ode(&pj, &g).unwrap();
        let frozen = simulate_mvsde(&pj, 1e-2, 2, &g, 1, &SimOptions::terminal()).unwrap();
        let u = MdpControl::constant(&g, &[0.0], -50.0, 1);
        let e = simulate_mdp_controlled(&pj, 1e-2, 0.1, &u, (1e-3, 1e3), &frozen, &x0, 3, &g, 1, &SimOptions::terminal())
            .unwrap();
        assert_eq!(e.clamped(), 400);
        assert!(matches!(
            simulate_mdp_controlled(&pj, 1e-2, 0.1, &u, (0.0, 1e3), &frozen, &x0, 3, &g, 1, &SimOptions::terminal()),
            Err(Error::InvalidMdpTilt(_))
        ));
    }
}
