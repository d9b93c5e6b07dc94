//! Small-noise large and moderate deviations for McKean-Vlasov SDEs with
//! Brownian and Poisson jump noise: particle simulation, limit equations,
//! controlled skeletons, rate-function optimization and Monte Carlo checks.

pub mod control;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod io;
pub mod levy;
pub mod measure;
pub mod model;
pub mod path;
pub mod rate;
pub mod rng;
pub mod skeleton;
pub mod verify;

pub use control::{Control, MdpControl, DEFAULT_PSI_BOUNDS};
pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use levy::{cell_integral, sample_controlled_prm, sample_prm, IntensityMeasure, JumpEvent, JumpStream};
pub use measure::{coupling_bound_check, wasserstein2, EmpiricalMeasure, W2};
pub use model::{builtin, load_model, Coefficients, LawSummary, LawUsage, ModelConfig, ModelSpec};
pub use dynamics::{
    simulate_controlled_frozen, simulate_controlled_selfconsistent, simulate_mdp_controlled, simulate_mvsde,
    ParticleEnsemble, Record, SimOptions,
};
pub use path::{path_sup_distance, Interpolation, Path};
pub use rate::{ell, ldp_rate, mdp_rate, q1_cost, q2_cost, EventSpec, OptConfig, RateResult};
pub use skeleton::{solve_ldp_skeleton, solve_limit_ode, solve_mdp_skeleton, solve_selfconsistent_skeleton, PicardConfig};
pub use verify::{
    check_controlled_convergence, check_ldp, check_limit_convergence, check_mdp, demo_frozen_vs_selfconsistent,
    MdpSpeed, SlopeReport, VerifyConfig,
};
