//! Model specifications: coefficient families, jump intensity and the
//! regularity constants a user asserts about them.
//!
//! Coefficients are evaluated through [`Coefficients`], whose methods take
//! the noise level `eps`; `eps = 0` selects the limit coefficients
//! `(b, sigma, G)`, `eps > 0` the perturbed family `(b_eps, sigma_eps,
//! G_eps)`. The measure argument arrives as a [`LawSummary`], so one
//! implementation serves the particle system (empirical law), the limit
//! equation (a Dirac mass) and the frozen-law controlled equations.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::levy::IntensityMeasure;
use crate::measure::mean_of;
use crate::path::norm_sq;
use crate::rng::{derive, rng_from, Purpose};

/// The measure argument handed to coefficients.
#[derive(Debug, Clone, Copy)]
pub enum LawSummary<'a> {
    Dirac(&'a [f64]),
    Mean(&'a [f64]),
    Empirical { atoms: &'a [f64], mean: &'a [f64] },
}

impl<'a> LawSummary<'a> {
    pub fn mean(&self) -> &'a [f64] {
        match *self {
            LawSummary::Dirac(p) | LawSummary::Mean(p) => p,
            LawSummary::Empirical { mean, .. } => mean,
        }
    }

    /// Atom-major particle cloud, when one is available.
    pub fn atoms(&self) -> Option<&'a [f64]> {
        match *self {
            LawSummary::Dirac(p) => Some(p),
            LawSummary::Empirical { atoms, .. } => Some(atoms),
            LawSummary::Mean(_) => None,
        }
    }
}

/// What part of the law the coefficients read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawUsage {
    /// Only the mean; stored law flows can be reduced to per-node means.
    Mean,
    /// The whole particle cloud.
    Cloud,
}

pub trait Coefficients: Send + Sync {
    fn drift(&self, t: f64, x: &[f64], law: &LawSummary, eps: f64, out: &mut [f64]);

    /// Row-major `d x d` matrix.
    fn diffusion(&self, t: f64, x: &[f64], law: &LawSummary, eps: f64, out: &mut [f64]);

    fn jump(&self, t: f64, x: &[f64], law: &LawSummary, z: &[f64], eps: f64, out: &mut [f64]);

    /// Exact `d b / d x` of the limit drift (row-major). Returns false when
    /// not provided, in which case finite differences are used.
    fn drift_jacobian(&self, _t: f64, _x: &[f64], _law: &LawSummary, _out: &mut [f64]) -> bool {
        false
    }

    fn law_usage(&self) -> LawUsage {
        LawUsage::Cloud
    }

    /// Whether `G` vanishes identically.
    fn jump_free(&self) -> bool {
        false
    }

    /// Whether `sigma` vanishes identically.
    fn diffusion_free(&self) -> bool {
        false
    }
}

/// `coef * eps^power`, the recorded uniform distance between perturbed and
/// limit coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoSpec {
    pub coef: f64,
    pub power: f64,
}

impl RhoSpec {
    pub const ZERO: RhoSpec = RhoSpec {
        coef: 0.0,
        power: 1.0,
    };

    pub fn at(&self, eps: f64) -> f64 {
        self.coef * eps.powf(self.power)
    }
}

impl Default for RhoSpec {
    fn default() -> Self {
        Self::ZERO
    }
}

/// User-asserted regularity data. Nothing here is enforced; [`probe_model`]
/// spot-checks the drift monotonicity constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constants {
    #[serde(rename = "L")]
    pub l: f64,
    pub q: f64,
    #[serde(rename = "L_prime")]
    pub l_prime: f64,
    pub q_prime: f64,
    pub rho_b: RhoSpec,
    pub rho_sigma: RhoSpec,
    pub rho_g: RhoSpec,
    /// Per-cell values of the jump Lipschitz, growth and perturbation bounds.
    pub l1: Option<Vec<f64>>,
    pub l2: Option<Vec<f64>>,
    pub l3: Option<Vec<f64>>,
    /// Existence and uniqueness of the solution for every eps.
    pub well_posed: bool,
    /// Pathwise uniqueness.
    pub pathwise_unique: bool,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            l: 1.0,
            q: 1.0,
            l_prime: 0.0,
            q_prime: 0.0,
            rho_b: RhoSpec::ZERO,
            rho_sigma: RhoSpec::ZERO,
            rho_g: RhoSpec::ZERO,
            l1: None,
            l2: None,
            l3: None,
            well_posed: true,
            pathwise_unique: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityCell {
    pub mark: Vec<f64>,
    pub mass: f64,
}

/// Declarative affine-plus-polynomial coefficients:
///
/// ```text
/// b_i(x, m)      = c_i + sum_j A_ij x_j + sum_j B_ij m_j + sum_k P_ik x_i^(k+2) + s_i sqrt(eps)
/// sigma(x, m)    = S
/// G_i(x, m, z)   = g_i + sum_j Gx_ij x_j + sum_l Gz_il z_l
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CustomCoefficients {
    pub drift_const: Vec<f64>,
    pub drift_x: Vec<Vec<f64>>,
    pub drift_mean: Vec<Vec<f64>>,
    pub drift_poly: Vec<Vec<f64>>,
    pub drift_eps_shift: Vec<f64>,
    pub diffusion: Vec<Vec<f64>>,
    pub jump_const: Vec<f64>,
    pub jump_x: Vec<Vec<f64>>,
    pub jump_mark: Vec<Vec<f64>>,
}

/// On-disk model description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Registry identifier: `example11`, `linear_gaussian`, `pure_jump`,
    /// `logistic_mf` or `custom`.
    pub model: String,
    pub dim: Option<usize>,
    pub horizon: Option<f64>,
    pub n_steps: Option<usize>,
    pub initial: Option<Vec<f64>>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub constants: Option<Constants>,
    pub intensity: Option<Vec<IntensityCell>>,
    pub custom: Option<CustomCoefficients>,
}

impl ModelConfig {
    pub fn builtin(name: &str) -> Self {
        Self {
            model: name.to_string(),
            dim: None,
            horizon: None,
            n_steps: None,
            initial: None,
            params: BTreeMap::new(),
            constants: None,
            intensity: None,
            custom: None,
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Model(e.to_string()))
    }
}

/// A complete problem instance.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub dim: usize,
    pub initial: Vec<f64>,
    pub horizon: f64,
    pub n_steps: usize,
    pub coefficients: Arc<dyn Coefficients>,
    pub intensity: Option<IntensityMeasure>,
    pub constants: Constants,
    /// The fully resolved configuration this spec was built from.
    pub config: ModelConfig,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("initial", &self.initial)
            .field("horizon", &self.horizon)
            .field("n_steps", &self.n_steps)
            .field("intensity", &self.intensity)
            .finish()
    }
}

impl ModelSpec {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon, self.n_steps)
    }

    pub fn n_cells(&self) -> usize {
        self.intensity.as_ref().map_or(0, |m| m.n_cells())
    }

    /// Whether the jump channel is present at all.
    pub fn has_jumps(&self) -> bool {
        self.intensity.is_some() && !self.coefficients.jump_free()
    }

    pub fn law_usage(&self) -> LawUsage {
        self.coefficients.law_usage()
    }

    /// Same model with a different initial condition.
    pub fn with_initial(mut self, initial: Vec<f64>) -> Result<Self> {
        if initial.len() != self.dim {
            return Err(Error::InvalidArgument("initial point has wrong dimension".into()));
        }
        self.config.initial = Some(initial.clone());
        self.initial = initial;
        Ok(self)
    }

    pub fn with_steps(mut self, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        self.config.n_steps = Some(n_steps);
        self.n_steps = n_steps;
        Ok(self)
    }

    /// `int_Z G(t, x, law, z) w_j nu(dz)` with per-cell weights `w`, added
    /// into `out`.
    pub(crate) fn add_jump_integral(
        &self,
        t: f64,
        x: &[f64],
        law: &LawSummary,
        eps: f64,
        weights: Option<&[f64]>,
        scratch: &mut [f64],
        out: &mut [f64],
    ) {
        let Some(m) = &self.intensity else { return };
        for (j, (z, mass)) in m.cells().enumerate() {
            let w = mass * weights.map_or(1.0, |w| w[j]);
            if w == 0.0 {
                continue;
            }
            self.coefficients.jump(t, x, law, z, eps, scratch);
            for (o, g) in out.iter_mut().zip(scratch.iter()) {
                *o += w * g;
            }
        }
    }
}

pub const BUILTIN_MODELS: [&str; 4] = ["example11", "linear_gaussian", "pure_jump", "logistic_mf"];

/// Build a registry model with default settings.
pub fn builtin(name: &str) -> Result<ModelSpec> {
    build(ModelConfig::builtin(name))
}

/// Load a model file from disk.
pub fn load_model(path: &std::path::Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path)?;
    build(ModelConfig::from_toml(&text)?)
}

fn param(cfg: &ModelConfig, key: &str, default: f64) -> Result<f64> {
    let v = cfg.params.get(key).copied().unwrap_or(default);
    if !v.is_finite() {
        return Err(Error::Model(format!("parameter {key} must be finite")));
    }
    Ok(v)
}

fn check_params(cfg: &ModelConfig, allowed: &[&str]) -> Result<()> {
    if let Some(k) = cfg.params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Model(format!(
            "unknown parameter '{k}' for model {} (allowed: {})",
            cfg.model,
            allowed.join(", ")
        )));
    }
    Ok(())
}

/// Resolve a configuration against the registry.
pub fn build(mut cfg: ModelConfig) -> Result<ModelSpec> {
    struct Defaults {
        dim: usize,
        initial: Vec<f64>,
        intensity: Option<Vec<IntensityCell>>,
        constants: Constants,
        coefficients: Arc<dyn Coefficients>,
    }
    let d = match cfg.model.as_str() {
        "example11" => {
            check_params(&cfg, &["eps_drift_shift"])?;
            let shift = param(&cfg, "eps_drift_shift", 0.0)?;
            Defaults {
                dim: 1,
                initial: vec![1.0],
                intensity: None,
                constants: Constants {
                    l: 1.0,
                    rho_b: RhoSpec {
                        coef: shift.abs(),
                        power: 0.5,
                    },
                    ..Constants::default()
                },
                coefficients: Arc::new(Example11 { shift }),
            }
        }
        "linear_gaussian" => {
            check_params(&cfg, &["a", "c", "s", "eps_drift_shift"])?;
            let c = LinearGaussian {
                a: param(&cfg, "a", 1.0)?,
                c: param(&cfg, "c", 0.0)?,
                s: param(&cfg, "s", 1.0)?,
                shift: param(&cfg, "eps_drift_shift", 0.0)?,
                dim: cfg.dim.unwrap_or(1),
            };
            Defaults {
                dim: c.dim,
                initial: vec![1.0; c.dim],
                intensity: None,
                constants: Constants {
                    l: c.a.abs().max(c.c.abs()).max(c.s.abs()),
                    rho_b: RhoSpec {
                        coef: c.shift.abs(),
                        power: 0.5,
                    },
                    ..Constants::default()
                },
                coefficients: Arc::new(c),
            }
        }
        "pure_jump" => {
            check_params(&cfg, &["jump_size", "lambda"])?;
            let g = param(&cfg, "jump_size", 1.0)?;
            let lambda = param(&cfg, "lambda", 1.0)?;
            Defaults {
                dim: 1,
                initial: vec![0.0],
                intensity: Some(vec![IntensityCell {
                    mark: vec![1.0],
                    mass: lambda,
                }]),
                constants: Constants {
                    l: 0.0,
                    l1: Some(vec![0.0]),
                    l2: Some(vec![g.abs()]),
                    l3: Some(vec![0.0]),
                    ..Constants::default()
                },
                coefficients: Arc::new(PureJump { g }),
            }
        }
        "logistic_mf" => {
            check_params(&cfg, &["r", "kappa", "s", "jump_scale"])?;
            let c = LogisticMf {
                r: param(&cfg, "r", 1.0)?,
                kappa: param(&cfg, "kappa", 0.5)?,
                s: param(&cfg, "s", 0.5)?,
                jump_scale: param(&cfg, "jump_scale", 1.0)?,
            };
            Defaults {
                dim: 1,
                initial: vec![0.5],
                intensity: Some(vec![
                    IntensityCell {
                        mark: vec![0.2],
                        mass: 1.0,
                    },
                    IntensityCell {
                        mark: vec![-0.2],
                        mass: 1.0,
                    },
                ]),
                // one-sided Lipschitz on the probe box |x| <= 3
                constants: Constants {
                    l: 7.0 * c.r.abs() + c.kappa.abs(),
                    q: 2.0,
                    l_prime: 2.0 * c.r.abs(),
                    q_prime: 0.0,
                    ..Constants::default()
                },
                coefficients: Arc::new(c),
            }
        }
        "custom" => {
            let custom = cfg
                .custom
                .clone()
                .ok_or_else(|| Error::Model("model 'custom' needs a [custom] block".into()))?;
            let dim = cfg
                .dim
                .ok_or_else(|| Error::Model("model 'custom' needs 'dim'".into()))?;
            let c = Custom::new(dim, custom, cfg.intensity.as_ref().map(|v| v[0].mark.len()))?;
            Defaults {
                dim,
                initial: vec![0.0; dim],
                intensity: None,
                constants: Constants::default(),
                coefficients: Arc::new(c),
            }
        }
        other => {
            return Err(Error::Model(format!(
                "unknown model '{other}' (builtin: {}, or custom)",
                BUILTIN_MODELS.join(", ")
            )))
        }
    };

    let dim = cfg.dim.unwrap_or(d.dim);
    if dim != d.dim {
        return Err(Error::Model(format!(
            "model {} has dimension {}, file says {dim}",
            cfg.model, d.dim
        )));
    }
    let initial = cfg.initial.clone().unwrap_or(d.initial);
    if initial.len() != dim || initial.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model(format!(
            "initial must be {dim} finite numbers"
        )));
    }
    let horizon = cfg.horizon.unwrap_or(1.0);
    let n_steps = cfg.n_steps.unwrap_or(400);
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Model(format!("horizon must be positive, got {horizon}")));
    }
    if n_steps == 0 {
        return Err(Error::Model("n_steps must be at least 1".into()));
    }
    let cells = cfg.intensity.clone().or(d.intensity);
    let intensity = match &cells {
        Some(cells) => {
            let k = cells.first().map_or(1, |c| c.mark.len());
            Some(
                IntensityMeasure::new(
                    k,
                    cells.iter().map(|c| (c.mark.clone(), c.mass)).collect(),
                )
                .map_err(|e| Error::Model(format!("intensity: {e}")))?,
            )
        }
        None => None,
    };
    let constants = cfg.constants.clone().unwrap_or_else(|| {
        // registry per-cell bounds only describe the registry intensity
        let mut c = d.constants;
        if cfg.intensity.is_some() {
            (c.l1, c.l2, c.l3) = (None, None, None);
        }
        c
    });
    for (name, v) in [("l1", &constants.l1), ("l2", &constants.l2), ("l3", &constants.l3)] {
        if let Some(v) = v {
            if intensity.as_ref().map_or(0, |m| m.n_cells()) != v.len() {
                return Err(Error::Model(format!(
                    "constants.{name} must list one value per intensity cell"
                )));
            }
        }
    }

    cfg.dim = Some(dim);
    cfg.initial = Some(initial.clone());
    cfg.horizon = Some(horizon);
    cfg.n_steps = Some(n_steps);
    cfg.intensity = cells;
    cfg.constants = Some(constants.clone());
    Ok(ModelSpec {
        name: cfg.model.clone(),
        dim,
        initial,
        horizon,
        n_steps,
        coefficients: d.coefficients,
        intensity,
        constants,
        config: cfg,
    })
}

/// `b(t,x,mu) = E_mu[Y] (+ shift * sqrt(eps))`, `sigma = 1`, no jumps.
#[derive(Debug, Clone)]
pub struct Example11 {
    pub shift: f64,
}

impl Coefficients for Example11 {
    fn drift(&self, _t: f64, _x: &[f64], law: &LawSummary, eps: f64, out: &mut [f64]) {
        out[0] = law.mean()[0] + self.shift * eps.sqrt();
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _law: &LawSummary, _eps: f64, out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn jump(&self, _t: f64, _x: &[f64], _law: &LawSummary, _z: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn drift_jacobian(&self, _t: f64, _x: &[f64], _law: &LawSummary, out: &mut [f64]) -> bool {
        out[0] = 0.0;
        true
    }
    fn law_usage(&self) -> LawUsage {
        LawUsage::Mean
    }
    fn jump_free(&self) -> bool {
        true
    }
}

/// `b = a x + c E_mu[Y] (+ shift sqrt(eps))`, `sigma = s I`, no jumps.
#[derive(Debug, Clone)]
pub struct LinearGaussian {
    pub a: f64,
    pub c: f64,
    pub s: f64,
    pub shift: f64,
    pub dim: usize,
}

impl Coefficients for LinearGaussian {
    fn drift(&self, _t: f64, x: &[f64], law: &LawSummary, eps: f64, out: &mut [f64]) {
        let m = law.mean();
        let shift = self.shift * eps.sqrt();
        for i in 0..self.dim {
            out[i] = self.a * x[i] + self.c * m[i] + shift;
        }
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _law: &LawSummary, _eps: f64, out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.s;
        }
    }
    fn jump(&self, _t: f64, _x: &[f64], _law: &LawSummary, _z: &[f64], _eps: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn drift_jacobian(&self, _t: f64, _x: &[f64], _law: &LawSummary, out: &mut [f64]) -> bool {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.a;
        }
        true
    }
    fn law_usage(&self) -> LawUsage {
        LawUsage::Mean
    }
    fn jump_free(&self) -> bool {
        true
    }
    fn diffusion_free(&self) -> bool {
        self.s == 0.0
    }
}

/// `b = 0`, `sigma = 0`, `G(z) = g z_0`.
#[derive(Debug, Clone)]
pub struct PureJump {
    pub g: f64,
}

impl Coefficients for PureJump {
    fn drift(&self, _t: f64, _x: &[f64], _law: &LawSummary, _eps: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _law: &LawSummary, _eps: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn jump(&self, _t: f64, _x: &[f64], _law: &LawSummary, z: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = self.g * z[0];
    }
    fn drift_jacobian(&self, _t: f64, _x: &[f64], _law: &LawSummary, out: &mut [f64]) -> bool {
        out[0] = 0.0;
        true
    }
    fn law_usage(&self) -> LawUsage {
        LawUsage::Mean
    }
    fn diffusion_free(&self) -> bool {
        true
    }
}

/// `b = r x (1 - x) + kappa (E_mu[Y] - x)`, `sigma = s`, `G(z) = jump_scale z_0`.
#[derive(Debug, Clone)]
pub struct LogisticMf {
    pub r: f64,
    pub kappa: f64,
    pub s: f64,
    pub jump_scale: f64,
}

impl Coefficients for LogisticMf {
    fn drift(&self, _t: f64, x: &[f64], law: &LawSummary, _eps: f64, out: &mut [f64]) {
        out[0] = self.r * x[0] * (1.0 - x[0]) + self.kappa * (law.mean()[0] - x[0]);
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _law: &LawSummary, _eps: f64, out: &mut [f64]) {
        out[0] = self.s;
    }
    fn jump(&self, _t: f64, _x: &[f64], _law: &LawSummary, z: &[f64], _eps: f64, out: &mut [f64]) {
        out[0] = self.jump_scale * z[0];
    }
    fn drift_jacobian(&self, _t: f64, x: &[f64], _law: &LawSummary, out: &mut [f64]) -> bool {
        out[0] = self.r * (1.0 - 2.0 * x[0]) - self.kappa;
        true
    }
    fn law_usage(&self) -> LawUsage {
        LawUsage::Mean
    }
    fn jump_free(&self) -> bool {
        self.jump_scale == 0.0
    }
    fn diffusion_free(&self) -> bool {
        self.s == 0.0
    }
}

/// Coefficients assembled from a [`CustomCoefficients`] block.
#[derive(Debug, Clone)]
pub struct Custom {
    dim: usize,
    mark_dim: usize,
    c: CustomCoefficients,
}

impl Custom {
    pub fn new(dim: usize, mut c: CustomCoefficients, mark_dim: Option<usize>) -> Result<Self> {
        let mark_dim = mark_dim.unwrap_or(1);
        let vec_or_zero = |v: &mut Vec<f64>, name: &str| -> Result<()> {
            if v.is_empty() {
                *v = vec![0.0; dim];
            }
            if v.len() != dim {
                return Err(Error::Model(format!("custom.{name} must have {dim} entries")));
            }
            Ok(())
        };
        let mat_or_zero = |m: &mut Vec<Vec<f64>>, cols: usize, name: &str| -> Result<()> {
            if m.is_empty() {
                *m = vec![vec![0.0; cols]; dim];
            }
            if m.len() != dim || m.iter().any(|r| r.len() != cols) {
                return Err(Error::Model(format!("custom.{name} must be {dim} x {cols}")));
            }
            Ok(())
        };
        vec_or_zero(&mut c.drift_const, "drift_const")?;
        vec_or_zero(&mut c.drift_eps_shift, "drift_eps_shift")?;
        vec_or_zero(&mut c.jump_const, "jump_const")?;
        mat_or_zero(&mut c.drift_x, dim, "drift_x")?;
        mat_or_zero(&mut c.drift_mean, dim, "drift_mean")?;
        mat_or_zero(&mut c.diffusion, dim, "diffusion")?;
        mat_or_zero(&mut c.jump_x, dim, "jump_x")?;
        mat_or_zero(&mut c.jump_mark, mark_dim, "jump_mark")?;
        if c.drift_poly.is_empty() {
            c.drift_poly = vec![Vec::new(); dim];
        }
        if c.drift_poly.len() != dim {
            return Err(Error::Model(format!("custom.drift_poly must have {dim} rows")));
        }
        let all = c
            .drift_const
            .iter()
            .chain(&c.drift_eps_shift)
            .chain(&c.jump_const)
            .chain(c.drift_x.iter().flatten())
            .chain(c.drift_mean.iter().flatten())
            .chain(c.diffusion.iter().flatten())
            .chain(c.jump_x.iter().flatten())
            .chain(c.jump_mark.iter().flatten())
            .chain(c.drift_poly.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("custom coefficients must be finite".into()));
        }
        Ok(Self { dim, mark_dim, c })
    }
}

impl Coefficients for Custom {
    fn drift(&self, _t: f64, x: &[f64], law: &LawSummary, eps: f64, out: &mut [f64]) {
        let m = law.mean();
        let se = eps.sqrt();
        for i in 0..self.dim {
            let mut v = self.c.drift_const[i] + self.c.drift_eps_shift[i] * se;
            for j in 0..self.dim {
                v += self.c.drift_x[i][j] * x[j] + self.c.drift_mean[i][j] * m[j];
            }
            let mut p = x[i] * x[i];
            for coef in &self.c.drift_poly[i] {
                v += coef * p;
                p *= x[i];
            }
            out[i] = v;
        }
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _law: &LawSummary, _eps: f64, out: &mut [f64]) {
        for i in 0..self.dim {
            out[i * self.dim..(i + 1) * self.dim].copy_from_slice(&self.c.diffusion[i]);
        }
    }
    fn jump(&self, _t: f64, x: &[f64], _law: &LawSummary, z: &[f64], _eps: f64, out: &mut [f64]) {
        for i in 0..self.dim {
            let mut v = self.c.jump_const[i];
            for j in 0..self.dim {
                v += self.c.jump_x[i][j] * x[j];
            }
            for l in 0..self.mark_dim.min(z.len()) {
                v += self.c.jump_mark[i][l] * z[l];
            }
            out[i] = v;
        }
    }
    fn drift_jacobian(&self, _t: f64, x: &[f64], _law: &LawSummary, out: &mut [f64]) -> bool {
        for i in 0..self.dim {
            for j in 0..self.dim {
                out[i * self.dim + j] = self.c.drift_x[i][j];
            }
            let mut p = x[i];
            for (k, coef) in self.c.drift_poly[i].iter().enumerate() {
                out[i * self.dim + i] += (k + 2) as f64 * coef * p;
                p *= x[i];
            }
        }
        true
    }
    fn law_usage(&self) -> LawUsage {
        LawUsage::Mean
    }
    fn jump_free(&self) -> bool {
        self.c
            .jump_const
            .iter()
            .chain(self.c.jump_x.iter().flatten())
            .chain(self.c.jump_mark.iter().flatten())
            .all(|&v| v == 0.0)
    }
    fn diffusion_free(&self) -> bool {
        self.c.diffusion.iter().flatten().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeViolation {
    pub t: f64,
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub lhs: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probes: usize,
    pub declared_l: f64,
    /// Largest observed `<x-x', b(x)-b(x')> / |x-x'|^2`.
    pub observed_l: f64,
    pub violations: Vec<ProbeViolation>,
}

/// Spot-check the drift monotonicity constant `L` on random probes in the
/// box `|x_i| <= radius`. Violations are reported, never fatal.
pub fn probe_model(spec: &ModelSpec, probes: usize, radius: f64, seed: u64) -> ProbeReport {
    let d = spec.dim;
    let mut rng = rng_from(derive(seed, Purpose::Probe as u64));
    let l = spec.constants.l;
    let mut report = ProbeReport {
        probes,
        declared_l: l,
        observed_l: f64::NEG_INFINITY,
        violations: Vec::new(),
    };
    let (mut bx, mut bxp) = (vec![0.0; d], vec![0.0; d]);
    for _ in 0..probes {
        let t = rng.random::<f64>() * spec.horizon;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-radius..radius)).collect();
        let xp: Vec<f64> = (0..d).map(|_| rng.random_range(-radius..radius)).collect();
        let cloud: Vec<f64> = (0..8 * d).map(|_| rng.random_range(-radius..radius)).collect();
        let m = mean_of(&cloud, d);
        let law = if rng.random::<bool>() {
            LawSummary::Empirical {
                atoms: &cloud,
                mean: &m,
            }
        } else {
            LawSummary::Dirac(&cloud[..d])
        };
        spec.coefficients.drift(t, &x, &law, 0.0, &mut bx);
        spec.coefficients.drift(t, &xp, &law, 0.0, &mut bxp);
        let diff: Vec<f64> = x.iter().zip(&xp).map(|(a, b)| a - b).collect();
        let dist2 = norm_sq(&diff);
        let lhs: f64 = diff
            .iter()
            .zip(bx.iter().zip(&bxp))
            .map(|(dx, (b1, b2))| dx * (b1 - b2))
            .sum();
        if dist2 > 0.0 {
            report.observed_l = report.observed_l.max(lhs / dist2);
        }
        let bound = l * dist2 + 1e-9 * (1.0 + dist2);
        if lhs > bound {
            report.violations.push(ProbeViolation {
                t,
                x,
                x_prime: xp,
                lhs,
                bound,
            });
        }
    }
    report
}
