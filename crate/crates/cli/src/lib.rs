//! Subcommands of the `mvldp` binary. Each `cmd_*` writes its tables and a
//! reproduction manifest into the output directory.

use std::fs;
use std::path::{Path as FsPath, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvldp::io;
use mvldp::rate::OptimalControl;
use mvldp::{
    check_ldp, check_mdp, ldp_rate, load_model, mdp_rate, simulate_mvsde, solve_ldp_skeleton, solve_limit_ode,
    solve_mdp_skeleton, solve_selfconsistent_skeleton, Control, Error, EventSpec, MdpControl, MdpSpeed, ModelSpec,
    OptConfig, PicardConfig, SimOptions, TimeGrid, VerifyConfig,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Verification(_) => 4,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Verification(_) => "verification-failure",
            CliError::Core(e) => e.kind(),
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "exit_code": self.exit_code(),
            }
        });
        if let CliError::Core(Error::Optimization { control, .. }) = self {
            v["error"]["control"] = serde_json::json!(control);
        }
        v
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mvldp", version, about = "Small-noise deviations of McKean-Vlasov jump diffusions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the particle system and write per-node moments.
    Simulate(SimulateArgs),
    /// Solve the limit equation or a controlled skeleton.
    Skeleton(SkeletonArgs),
    /// Compute the large- or moderate-deviation rate of an event.
    Rate(RateArgs),
    /// Monte Carlo check of a large-deviation rate.
    VerifyLdp(VerifyLdpArgs),
    /// Monte Carlo check of a moderate-deviation rate.
    VerifyMdp(VerifyMdpArgs),
    /// Frozen-law versus self-consistent controlled means on example11.
    DemoExample11(DemoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Model file (TOML) or `builtin:<name>`.
    #[arg(long, default_value = "builtin:example11")]
    pub model: String,
    /// Time steps; defaults to the model's own.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Worker threads for simulations.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
    #[arg(long, default_value_t = 2000)]
    pub particles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonKind {
    Limit,
    Ldp,
    SelfConsistent,
    Mdp,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SkeletonArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value_t = SkeletonKind::Ldp)]
    pub kind: SkeletonKind,
    /// Constant Brownian control, one value per dimension.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub phi: Vec<f64>,
    /// Constant jump tilt (or MDP jump control) on every cell.
    #[arg(long, allow_negative_numbers = true)]
    pub psi: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RateKind {
    Ldp,
    Mdp,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RateArgs {
    #[command(flatten)]
    pub common: Common,
    /// `pin:a1,..[@tol]`, `halfspace:w1,..:c` or `path:<csv>[@tol]`.
    #[arg(long, allow_hyphen_values = true)]
    pub event: String,
    #[arg(long, value_enum, default_value_t = RateKind::Ldp)]
    pub kind: RateKind,
    #[arg(long, default_value_t = 10)]
    pub segments: usize,
    #[arg(long, default_value_t = 5)]
    pub starts: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyLdpArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, allow_hyphen_values = true, default_value = "halfspace:1:3.218281828459045")]
    pub event: String,
    #[arg(long, default_value = "0.2,0.1,0.05")]
    pub eps_list: String,
    #[arg(long, default_value_t = 100_000)]
    pub particles: usize,
    #[arg(long, default_value_t = 0.03)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyMdpArgs {
    #[command(flatten)]
    pub common: Common,
    /// Event on the rescaled fluctuation `(X - X^0) / a(eps)`.
    #[arg(long, allow_hyphen_values = true, default_value = "halfspace:1:1")]
    pub event: String,
    #[arg(long, default_value = "0.01,0.004,0.001")]
    pub eps_list: String,
    /// `a(eps) = eps^a_exp`, with `0 < a_exp < 1/2`.
    #[arg(long, default_value_t = 0.25)]
    pub a_exp: f64,
    #[arg(long, default_value_t = 100_000)]
    pub particles: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 10_000)]
    pub particles: usize,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Human-readable lines for stdout.
    pub summary: Vec<String>,
    /// `false` for a failed verification.
    pub pass: bool,
}

#[derive(Serialize)]
struct Manifest<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    model: Option<&'a mvldp::ModelConfig>,
    model_sha256: Option<String>,
    seed: Option<u64>,
    args: &'a A,
    outputs: Vec<String>,
}

pub fn load(model: &str) -> CliResult<ModelSpec> {
    match model.strip_prefix("builtin:") {
        Some(name) => Ok(mvldp::builtin(name)?),
        None => load_model(FsPath::new(model)).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("model file {model}: {io}"))).into(),
            e => e.into(),
        }),
    }
}

fn model_hash(spec: &ModelSpec) -> CliResult<String> {
    let bytes = serde_json::to_vec(&spec.config).map_err(Error::from)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn parse_list(s: &str, what: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("{what}: cannot parse '{v}' as a number")))
        })
        .collect()
}

pub fn parse_eps_list(s: &str) -> CliResult<Vec<f64>> {
    let v = parse_list(s, "--eps-list")?;
    if v.iter().any(|e| !(*e > 0.0 && e.is_finite())) || v.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CliError::Usage("--eps-list must be strictly decreasing positive numbers".into()));
    }
    Ok(v)
}

fn split_tol(body: &str) -> CliResult<(&str, f64)> {
    match body.rsplit_once('@') {
        Some((head, tol)) => {
            let t = tol
                .trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("--event: bad tolerance '{tol}'")))?;
            Ok((head, t))
        }
        None => Ok((body, 0.0)),
    }
}

/// Parses `pin:a1,..[@tol]`, `halfspace:w1,..:c` and `path:<csv>[@tol]`.
pub fn parse_event(s: &str) -> CliResult<EventSpec> {
    let (kind, body) = s
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("--event '{s}': expected <kind>:<data>")))?;
    match kind {
        "pin" => {
            let (pts, tol) = split_tol(body)?;
            Ok(EventSpec::PinTerminal {
                point: parse_list(pts, "--event")?,
                tol,
            })
        }
        "halfspace" => {
            let (w, c) = body
                .rsplit_once(':')
                .ok_or_else(|| CliError::Usage("--event halfspace needs w1,..:c".into()))?;
            let c = c
                .trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("--event: bad halfspace level '{c}'")))?;
            Ok(EventSpec::Halfspace {
                w: parse_list(w, "--event")?,
                c,
            })
        }
        "path" => {
            let (file, tol) = split_tol(body)?;
            Ok(EventSpec::PinPath {
                path: io::read_path_csv_file(FsPath::new(file))?,
                tol,
            })
        }
        other => Err(CliError::Usage(format!("--event: unknown kind '{other}' (pin, halfspace, path)"))),
    }
}

fn grid_for(spec: &ModelSpec, steps: Option<u64>) -> CliResult<TimeGrid> {
    let n = steps.map(|s| s as usize).unwrap_or(spec.n_steps);
    Ok(TimeGrid::uniform(spec.horizon, n)?)
}

fn prepare_out(dir: &FsPath) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn create(dir: &FsPath, name: &str, files: &mut Vec<PathBuf>) -> CliResult<fs::File> {
    let p = dir.join(name);
    let f = fs::File::create(&p).map_err(Error::from)?;
    files.push(p);
    Ok(f)
}

fn write_manifest<A: Serialize>(
    dir: &FsPath,
    command: &str,
    spec: Option<&ModelSpec>,
    seed: Option<u64>,
    args: &A,
    files: &mut Vec<PathBuf>,
) -> CliResult<()> {
    let outputs = files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        model: spec.map(|s| &s.config),
        model_sha256: spec.map(model_hash).transpose()?,
        seed,
        args,
        outputs,
    };
    let f = create(dir, "manifest.json", files)?;
    io::write_json(&m, f)?;
    Ok(())
}

fn jobs(j: Option<u64>) -> Option<usize> {
    j.map(|j| j as usize)
}

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<Outcome> {
    let spec = load(&a.common.model)?;
    let grid = grid_for(&spec, a.common.steps)?;
    let opts = SimOptions {
        jobs: jobs(a.common.jobs),
        ..SimOptions::terminal()
    };
    let ens = simulate_mvsde(&spec, a.eps, a.particles, &grid, a.common.seed, &opts)?;
    let limit = solve_limit_ode(&spec, &grid).ok();
    let dir = &a.common.out;
    prepare_out(dir)?;
    let mut files = Vec::new();
    match a.common.format {
        Format::Csv => io::write_ensemble_summary_csv(&ens, limit.as_ref(), create(dir, "summary.csv", &mut files)?)?,
        Format::Json => {
            #[derive(Serialize)]
            struct Summary {
                t: Vec<f64>,
                mean: Vec<Vec<f64>>,
                var: Vec<Vec<f64>>,
            }
            let n = grid.n_nodes();
            let s = Summary {
                t: grid.nodes().to_vec(),
                mean: (0..n).map(|k| ens.mean(k).to_vec()).collect(),
                var: (0..n).map(|k| ens.variance(k).to_vec()).collect(),
            };
            io::write_json(&s, create(dir, "summary.json", &mut files)?)?;
        }
    }
    write_manifest(dir, "simulate", Some(&spec), Some(a.common.seed), a, &mut files)?;
    let mean_t = ens.mean(grid.n_steps()).to_vec();
    Ok(Outcome {
        files,
        summary: vec![format!("mean at T: {mean_t:?}")],
        pass: true,
    })
}

pub fn cmd_skeleton(a: &SkeletonArgs) -> CliResult<Outcome> {
    let spec = load(&a.common.model)?;
    let grid = grid_for(&spec, a.common.steps)?;
    let phi = if a.phi.is_empty() { vec![0.0; spec.dim] } else { a.phi.clone() };
    if phi.len() != spec.dim {
        return Err(CliError::Usage(format!("--phi needs {} values", spec.dim)));
    }
    let x0 = solve_limit_ode(&spec, &grid)?;
    let path = match a.kind {
        SkeletonKind::Limit => x0,
        SkeletonKind::Ldp => {
            let u = Control::constant(&grid, &phi, a.psi.unwrap_or(1.0), spec.n_cells());
            u.validate()?;
            solve_ldp_skeleton(&spec, &x0, &u, &grid, &PicardConfig::default())?.path
        }
        SkeletonKind::SelfConsistent => {
            let u = Control::constant(&grid, &phi, a.psi.unwrap_or(1.0), spec.n_cells());
            u.validate()?;
            solve_selfconsistent_skeleton(&spec, &u, &grid)?
        }
        SkeletonKind::Mdp => {
            let u = MdpControl::constant(&grid, &phi, a.psi.unwrap_or(0.0), spec.n_cells());
            solve_mdp_skeleton(&spec, &x0, &u, &grid)?
        }
    };
    let dir = &a.common.out;
    prepare_out(dir)?;
    let mut files = Vec::new();
    match a.common.format {
        Format::Csv => io::write_path_csv(&path, create(dir, "path.csv", &mut files)?)?,
        Format::Json => io::write_json(&path, create(dir, "path.json", &mut files)?)?,
    }
    write_manifest(dir, "skeleton", Some(&spec), None, a, &mut files)?;
    Ok(Outcome {
        files,
        summary: vec![format!("terminal value: {:?}", path.terminal())],
        pass: true,
    })
}

pub fn cmd_rate(a: &RateArgs) -> CliResult<Outcome> {
    let spec = load(&a.common.model)?;
    let grid = grid_for(&spec, a.common.steps)?;
    let event = parse_event(&a.event)?;
    let x0 = solve_limit_ode(&spec, &grid)?;
    let cfg = OptConfig {
        segments: a.segments,
        starts: a.starts,
        seed: a.common.seed,
        ..OptConfig::default()
    };
    let r = match a.kind {
        RateKind::Ldp => ldp_rate(&spec, &x0, &event, &grid, &cfg)?,
        RateKind::Mdp => mdp_rate(&spec, &x0, &event, &grid, &cfg)?,
    };
    let dir = &a.common.out;
    prepare_out(dir)?;
    let mut files = Vec::new();
    io::write_json(&r, create(dir, "rate.json", &mut files)?)?;
    if a.common.format == Format::Csv {
        match &r.control {
            OptimalControl::Ldp(u) => io::write_control_csv(u, &grid, create(dir, "control.csv", &mut files)?)?,
            OptimalControl::Mdp(u) => io::write_mdp_control_csv(u, &grid, create(dir, "control.csv", &mut files)?)?,
        }
        io::write_path_csv(&r.achieved_path, create(dir, "path.csv", &mut files)?)?;
    }
    write_manifest(dir, "rate", Some(&spec), Some(a.common.seed), a, &mut files)?;
    let value = if r.infinite { "inf".to_string() } else { format!("{:.6}", r.value) };
    Ok(Outcome {
        files,
        summary: vec![format!(
            "rate: {value} (residual {:.2e}, feasible {})",
            r.constraint_residual, r.feasible
        )],
        pass: true,
    })
}

fn write_report(
    dir: &FsPath,
    r: &mvldp::SlopeReport,
    format: Format,
    files: &mut Vec<PathBuf>,
) -> CliResult<()> {
    io::write_json(r, create(dir, "report.json", files)?)?;
    if format == Format::Csv {
        io::write_report_csv(r, create(dir, "report.csv", files)?)?;
    }
    Ok(())
}

fn report_summary(r: &mvldp::SlopeReport) -> Vec<String> {
    let mut lines: Vec<String> = r
        .points
        .iter()
        .map(|p| match p.statistic {
            Some(s) => format!("eps {:<8} hits {:>7} statistic {s:.4}", p.eps, p.hits.unwrap_or(0)),
            None => format!("eps {:<8} censored", p.eps),
        })
        .collect();
    let fitted = r.fitted.map(|f| format!("{f:.4}")).unwrap_or_else(|| "none".into());
    lines.push(format!(
        "fitted {fitted}  reference {:.4}  tolerance {}  pass {}",
        r.reference, r.tolerance, r.pass
    ));
    lines.extend(r.notes.iter().map(|n| format!("note: {n}")));
    lines
}

pub fn cmd_verify_ldp(a: &VerifyLdpArgs) -> CliResult<Outcome> {
    let spec = load(&a.common.model)?;
    let grid = grid_for(&spec, a.common.steps)?;
    let event = parse_event(&a.event)?;
    let eps = parse_eps_list(&a.eps_list)?;
    let cfg = VerifyConfig {
        tolerance: a.tolerance,
        jobs: jobs(a.common.jobs),
        ..VerifyConfig::default()
    };
    let r = check_ldp(&spec, &event, &eps, a.particles, &grid, a.common.seed, &cfg)?;
    let dir = &a.common.out;
    prepare_out(dir)?;
    let mut files = Vec::new();
    write_report(dir, &r, a.common.format, &mut files)?;
    write_manifest(dir, "verify-ldp", Some(&spec), Some(a.common.seed), a, &mut files)?;
    Ok(Outcome {
        files,
        summary: report_summary(&r),
        pass: r.pass,
    })
}

pub fn cmd_verify_mdp(a: &VerifyMdpArgs) -> CliResult<Outcome> {
    let spec = load(&a.common.model)?;
    let grid = grid_for(&spec, a.common.steps)?;
    let event = parse_event(&a.event)?;
    let eps = parse_eps_list(&a.eps_list)?;
    if !(a.a_exp > 0.0 && a.a_exp < 0.5) {
        return Err(CliError::Usage("--a-exp must lie in (0, 1/2)".into()));
    }
    let speed = MdpSpeed::power(a.a_exp, &eps)?;
    let cfg = VerifyConfig {
        tolerance: a.tolerance,
        jobs: jobs(a.common.jobs),
        ..VerifyConfig::default()
    };
    let r = check_mdp(&spec, &event, &speed, a.particles, &grid, a.common.seed, &cfg)?;
    let dir = &a.common.out;
    prepare_out(dir)?;
    let mut files = Vec::new();
    write_report(dir, &r, a.common.format, &mut files)?;
    write_manifest(dir, "verify-mdp", Some(&spec), Some(a.common.seed), a, &mut files)?;
    Ok(Outcome {
        files,
        summary: report_summary(&r),
        pass: r.pass,
    })
}

pub fn cmd_demo_example11(a: &DemoArgs) -> CliResult<Outcome> {
    let grid = TimeGrid::uniform(1.0, a.steps as usize)?;
    let r = mvldp::verify::demo_with_control(a.eps, a.particles, &grid, a.seed, 1.0, jobs(a.jobs))?;
    prepare_out(&a.out)?;
    let mut files = Vec::new();
    io::write_json(&r, create(&a.out, "demo.json", &mut files)?)?;
    let spec = mvldp::builtin("example11")?;
    write_manifest(&a.out, "demo-example11", Some(&spec), Some(a.seed), a, &mut files)?;
    let summary = vec![
        format!("{:<26}{:>12}{:>12}", "", "simulated", "ODE"),
        format!(
            "{:<26}{:>12.5}{:>12.5}",
            "frozen law (correct)", r.frozen_mean_t, r.skeleton_t
        ),
        format!(
            "{:<26}{:>12.5}{:>12.5}",
            "self-consistent (wrong)", r.selfconsistent_mean_t, r.wrong_ode_t
        ),
        format!("gap {:.5}  band {:.5}", r.gap, r.band),
    ];
    Ok(Outcome {
        files,
        summary,
        pass: r.frozen_matches && r.selfconsistent_matches && r.gap > 0.5,
    })
}

pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let out = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Skeleton(a) => cmd_skeleton(a),
        Command::Rate(a) => cmd_rate(a),
        Command::VerifyLdp(a) => cmd_verify_ldp(a),
        Command::VerifyMdp(a) => cmd_verify_mdp(a),
        Command::DemoExample11(a) => cmd_demo_example11(a),
    }?;
    Ok(out)
}

/// Parses arguments, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(o) => {
            for l in &o.summary {
                println!("{l}");
            }
            if o.pass {
                0
            } else {
                let e = CliError::Verification("check did not pass; see report".into());
                eprintln!("{}", e.to_json());
                e.exit_code()
            }
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
