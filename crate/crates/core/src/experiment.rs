//! Configured experiments: scenario construction, the flat config format and
//! the three runners behind the `minmaxot` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{self, method_preset, Method, ParticleSystem, Trajectory, TrajectoryRecord};
use crate::io::{self, Cell, Table, SWEEP_HEADER};
use crate::model::{
    cost_by_name, make_empirical, make_isotropic_gaussian, make_mixture, make_ring_peak,
    FlowConfig, Law, Marginal,
};
use crate::oracle::{discrete_ot, gaussian_w2_squared, DISCRETE_OT_BUDGET};
use crate::response::{lambda_growth_bound, solve_lambda_ode, OdePoint, ResponseEvaluator};

/// Which pair of marginals an experiment transports between.
#[derive(Clone, Debug, PartialEq)]
pub enum Scenario {
    /// `N((0.4, 0.4), 0.02 I)` to `N((0.6, 0.6), 0.02 I)`.
    GaussianPair,
    /// Ring with a central peak to a four-component Gaussian mixture.
    RingToMixture,
    /// Headerless point files, one point per row.
    CustomCsv { mu_csv: PathBuf, nu_csv: PathBuf },
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::GaussianPair => "gaussian_pair",
            Scenario::RingToMixture => "ring_to_mixture",
            Scenario::CustomCsv { .. } => "custom_csv",
        }
    }

    /// Builds `(μ, ν)`.
    pub fn marginals(&self) -> Result<(Marginal, Marginal)> {
        match self {
            Scenario::GaussianPair => Ok((
                make_isotropic_gaussian(&[0.4, 0.4], 0.02)?,
                make_isotropic_gaussian(&[0.6, 0.6], 0.02)?,
            )),
            Scenario::RingToMixture => {
                let mu = make_ring_peak(1.0, 0.15, 0.3, 0.2)?;
                let mut parts = Vec::with_capacity(4);
                for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    parts.push((0.25, make_isotropic_gaussian(&[0.75 * a, 0.75 * b], 0.03)?));
                }
                Ok((mu, make_mixture(parts)?))
            }
            Scenario::CustomCsv { mu_csv, nu_csv } => Ok((
                make_empirical(io::read_points_csv(mu_csv)?)?,
                make_empirical(io::read_points_csv(nu_csv)?)?,
            )),
        }
    }
}

/// Everything one invocation needs. Built from a flat `key = value` file,
/// then overridden field by field.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub method: Method,
    pub cost: String,
    pub flow: FlowConfig,
    pub output_dir: PathBuf,
    /// Steps at which particle snapshots are written; `None` means the first
    /// and last step.
    pub snapshot_steps: Option<Vec<usize>>,
    pub interpolant_s: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub ode_lambda0: f64,
    pub ode_horizon: f64,
    pub ode_dt: f64,
    pub quad_nodes: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::GaussianPair,
            method: Method::I,
            cost: "quadratic".into(),
            flow: FlowConfig::default(),
            output_dir: PathBuf::from("results"),
            snapshot_steps: None,
            interpolant_s: vec![0.25, 0.5, 0.75],
            lambda_grid: vec![0.01, 0.05, 0.1, 0.5, 1.0, 5.0],
            ode_lambda0: 0.1,
            ode_horizon: 100.0,
            ode_dt: 0.1,
            quad_nodes: crate::response::DEFAULT_NODES_PER_DIM,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentSpec {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped;
    /// later keys override earlier ones.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        let mut mu_csv = None;
        let mut nu_csv = None;
        let mut scenario = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "scenario" => scenario = Some(value.to_string()),
                "mu_csv" => mu_csv = Some(PathBuf::from(value)),
                "nu_csv" => nu_csv = Some(PathBuf::from(value)),
                _ => spec.set(key, value)?,
            }
        }
        if let Some(s) = scenario {
            spec.scenario = match s.as_str() {
                "gaussian_pair" => Scenario::GaussianPair,
                "ring_to_mixture" => Scenario::RingToMixture,
                "custom_csv" => Scenario::CustomCsv {
                    mu_csv: mu_csv
                        .ok_or_else(|| Error::Config("custom_csv needs `mu_csv`".into()))?,
                    nu_csv: nu_csv
                        .ok_or_else(|| Error::Config("custom_csv needs `nu_csv`".into()))?,
                },
                other => return Err(Error::Config(format!("unknown scenario `{other}`"))),
            };
        }
        Ok(spec)
    }

    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_config_str(&fs::read_to_string(path)?)
    }

    /// Sets one non-scenario key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = &mut self.flow;
        match key {
            "method" => self.method = parse_value(key, value)?,
            "cost" => {
                cost_by_name(value)?;
                self.cost = value.to_string();
            }
            "seed" => f.seed = parse_value(key, value)?,
            "steps" => f.steps = parse_value(key, value)?,
            "dt" => f.dt = parse_value(key, value)?,
            "beta" => f.beta = parse_value(key, value)?,
            "lambda0" => f.lambda0 = parse_value(key, value)?,
            "particles" => f.n_pairs = parse_value(key, value)?,
            "bins" => f.bins_per_dim = parse_value(key, value)?,
            "noise" => f.noise_std_coeff = parse_value(key, value)?,
            "eta" => f.eta_var = parse_value(key, value)?,
            "freeze_lambda" => f.freeze_lambda = parse_value(key, value)?,
            "box_refresh" => f.box_refresh = parse_value(key, value)?,
            "box_padding" => f.box_padding = parse_value(key, value)?,
            "out" => self.output_dir = PathBuf::from(value),
            "snapshot_steps" => self.snapshot_steps = Some(parse_list(key, value)?),
            "interpolant_s" => self.interpolant_s = parse_list(key, value)?,
            "lambda_grid" => self.lambda_grid = parse_list(key, value)?,
            "ode_lambda0" => self.ode_lambda0 = parse_value(key, value)?,
            "ode_horizon" => self.ode_horizon = parse_value(key, value)?,
            "ode_dt" => self.ode_dt = parse_value(key, value)?,
            "quad_nodes" => self.quad_nodes = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// The fully resolved spec in the same format [`from_config_str`]
    /// reads.
    ///
    /// [`from_config_str`]: ExperimentSpec::from_config_str
    pub fn to_config_string(&self) -> String {
        let f = &self.flow;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("scenario", self.scenario.name().into());
        if let Scenario::CustomCsv { mu_csv, nu_csv } = &self.scenario {
            kv("mu_csv", mu_csv.display().to_string());
            kv("nu_csv", nu_csv.display().to_string());
        }
        kv("method", self.method.to_string());
        kv("cost", self.cost.clone());
        kv("seed", f.seed.to_string());
        kv("steps", f.steps.to_string());
        kv("dt", f.dt.to_string());
        kv("beta", f.beta.to_string());
        kv("lambda0", f.lambda0.to_string());
        kv("particles", f.n_pairs.to_string());
        kv("bins", f.bins_per_dim.to_string());
        kv("noise", f.noise_std_coeff.to_string());
        kv("eta", f.eta_var.to_string());
        kv("freeze_lambda", f.freeze_lambda.to_string());
        kv("box_refresh", f.box_refresh.to_string());
        kv("box_padding", f.box_padding.to_string());
        kv("out", self.output_dir.display().to_string());
        kv("snapshot_steps", join(&self.snapshot_steps()));
        kv("interpolant_s", join(&self.interpolant_s));
        kv("lambda_grid", join(&self.lambda_grid));
        kv("ode_lambda0", self.ode_lambda0.to_string());
        kv("ode_horizon", self.ode_horizon.to_string());
        kv("ode_dt", self.ode_dt.to_string());
        kv("quad_nodes", self.quad_nodes.to_string());
        s
    }

    pub fn snapshot_steps(&self) -> Vec<usize> {
        match &self.snapshot_steps {
            Some(v) => v.clone(),
            None if self.flow.steps == 0 => vec![0],
            None => vec![0, self.flow.steps],
        }
    }

    /// The flow configuration with the method's divergence pair applied.
    pub fn flow_config(&self) -> FlowConfig {
        let (vx, vy) = method_preset(self.method);
        FlowConfig {
            kl_variant_x: vx,
            kl_variant_y: vy,
            ..self.flow.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow_config().validate()?;
        if let Some(&s) = self
            .interpolant_s
            .iter()
            .find(|s| !(0.0..=1.0).contains(*s))
        {
            return Err(Error::Config(format!("interpolant s = {s} outside [0, 1]")));
        }
        if let Some(k) = self
            .snapshot_steps()
            .into_iter()
            .find(|&k| k > self.flow.steps)
        {
            return Err(Error::Config(format!(
                "snapshot step {k} beyond steps = {}",
                self.flow.steps
            )));
        }
        cost_by_name(&self.cost)?;
        Ok(())
    }
}

/// What [`cmd_run`] produced.
#[derive(Debug)]
pub struct RunReport {
    pub trajectory: Trajectory,
    pub system: ParticleSystem,
    pub wall_seconds: f64,
    pub files: Vec<PathBuf>,
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "seed",
    "steps",
    "t",
    "lambda",
    "cost",
    "kl1",
    "kl2",
    "reverse_kl1",
    "reverse_kl2",
    "l2_mu",
    "l2_nu",
];

pub const METHODS_HEADER: [&str; 5] = ["method", "l2_error", "kl", "reverse_kl", "total_kl"];

pub const REPORT_HEADER: [&str; 10] = [
    "lambda",
    "Z",
    "V",
    "dV_dlambda",
    "dV_dlambda_fd",
    "E_d",
    "dE_d_dlambda_fd",
    "danskin_residual",
    "danskin_residual_rel",
    "z_lower_bound",
];

pub const ODE_BOUND_HEADER: [&str; 5] = ["t", "lambda", "V", "bound", "margin"];

pub fn summary_table(seed: u64, steps: usize, r: &TrajectoryRecord) -> Table {
    let mut t = Table::new(&SUMMARY_HEADER);
    t.push(vec![
        seed as f64,
        steps as f64,
        r.t,
        r.lambda,
        r.cost,
        r.kl1,
        r.kl2,
        r.reverse_kl1,
        r.reverse_kl2,
        r.l2_mu,
        r.l2_nu,
    ]);
    t
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        let p = self.dir.join(name);
        t.write(&p)?;
        self.files.push(p);
        Ok(())
    }

    fn text(&mut self, name: &str, s: &str) -> Result<()> {
        let p = self.dir.join(name);
        fs::write(&p, s)?;
        self.files.push(p);
        Ok(())
    }
}

/// Runs the flow and writes its artifacts into `spec.output_dir`.
///
/// On a numerical blow-up the partial trajectory is still written before
/// the error is returned.
pub fn cmd_run(spec: &ExperimentSpec) -> Result<RunReport> {
    spec.validate()?;
    let (mu, nu) = spec.scenario.marginals()?;
    let cost = cost_by_name(&spec.cost)?;
    let cfg = spec.flow_config();
    let mut out = Artifacts::new(&spec.output_dir)?;
    out.text("config.resolved.txt", &spec.to_config_string())?;

    let started = Instant::now();
    let result = flow::run(&mu, &nu, cost.as_ref(), &cfg, &spec.snapshot_steps())?;
    let wall_seconds = started.elapsed().as_secs_f64();

    out.table("trajectory.csv", &io::trajectory_table(&result.trajectory))?;
    if let Some(e) = result.abort {
        return Err(e);
    }
    for (k, ps) in &result.snapshots {
        out.table(&format!("particles_step{k}.csv"), &io::particles_table(ps))?;
    }
    for &s in &spec.interpolant_s {
        let z = flow::interpolant(&result.system, s)?;
        out.table(&format!("interpolant_s{s}.csv"), &io::interpolant_table(&z))?;
    }
    let last = result
        .trajectory
        .last()
        .expect("at least the initial record");
    out.table("summary.csv", &summary_table(cfg.seed, cfg.steps, last))?;
    let mut timing = Table::new(&["wall_seconds"]);
    timing.push(vec![wall_seconds]);
    out.table("timing.csv", &timing)?;

    Ok(RunReport {
        trajectory: result.trajectory,
        system: result.system,
        wall_seconds,
        files: out.files,
    })
}

/// One row of the method comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodRow {
    pub method: Method,
    pub l2_error: f64,
    pub kl: f64,
    pub reverse_kl: f64,
}

impl MethodRow {
    pub fn total_kl(&self) -> f64 {
        self.kl + self.reverse_kl
    }

    pub fn from_record(method: Method, r: &TrajectoryRecord) -> Self {
        Self {
            method,
            l2_error: r.l2_error(),
            kl: r.total_kl(),
            reverse_kl: r.total_reverse_kl(),
        }
    }
}

pub fn methods_table(rows: &[MethodRow]) -> Table {
    let mut t = Table::new(&METHODS_HEADER);
    for r in rows {
        t.push_cells(vec![
            Cell::from(r.method.as_str()),
            r.l2_error.into(),
            r.kl.into(),
            r.reverse_kl.into(),
            r.total_kl().into(),
        ]);
    }
    t
}

/// Runs methods I, II and III in turn with the same seed and writes
/// `methods.csv` plus one trajectory per method.
pub fn cmd_compare_methods(spec: &ExperimentSpec) -> Result<Vec<MethodRow>> {
    spec.validate()?;
    let (mu, nu) = spec.scenario.marginals()?;
    if mu.as_analytic().is_none() || nu.as_analytic().is_none() {
        return Err(Error::Config(
            "compare-methods needs a scenario with analytic marginals".into(),
        ));
    }
    let cost = cost_by_name(&spec.cost)?;
    let mut out = Artifacts::new(&spec.output_dir)?;
    out.text("config.resolved.txt", &spec.to_config_string())?;
    let mut rows = Vec::with_capacity(3);
    for method in Method::ALL {
        let one = ExperimentSpec {
            method,
            ..spec.clone()
        };
        let (traj, _) =
            flow::run(&mu, &nu, cost.as_ref(), &one.flow_config(), &[])?.into_result()?;
        out.table(
            &format!("trajectory_{}.csv", method.as_str()),
            &io::trajectory_table(&traj),
        )?;
        rows.push(MethodRow::from_record(
            method,
            traj.last().expect("initial record"),
        ));
    }
    out.table("methods.csv", &methods_table(&rows))?;
    Ok(rows)
}

/// `c*` for the scenario: the Bures formula for a Gaussian pair under
/// quadratic cost, zero for the zero cost, otherwise exact discrete OT
/// between `DISCRETE_OT_BUDGET` samples of each side.
pub fn optimal_cost(mu: &Marginal, nu: &Marginal, cost_name: &str, seed: u64) -> Result<f64> {
    if cost_name == "zero" {
        return Ok(0.0);
    }
    if let (Some(a), Some(b)) = (mu.as_analytic(), nu.as_analytic()) {
        if let (Law::Gaussian(g1), Law::Gaussian(g2), "quadratic") = (a.law(), b.law(), cost_name) {
            return gaussian_w2_squared(
                g1.mean(),
                g1.covariance().transpose().as_slice(),
                g2.mean(),
                g2.covariance().transpose().as_slice(),
            );
        }
    }
    let cost = cost_by_name(cost_name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = mu.sample_n(DISCRETE_OT_BUDGET, &mut rng);
    let ys = nu.sample_n(DISCRETE_OT_BUDGET, &mut rng);
    Ok(discrete_ot(&xs, &ys, cost.as_ref())?.cost)
}

/// One grid point of the response validation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResponseRow {
    pub lambda: f64,
    pub z: f64,
    pub v: f64,
    pub dv_dlambda: f64,
    pub dv_dlambda_fd: f64,
    pub e_d: f64,
    pub de_d_fd: f64,
    pub z_lower_bound: bool,
}

impl ResponseRow {
    /// `|dE_d/dΛ − V|` with the derivative taken by finite differences.
    pub fn danskin_residual(&self) -> f64 {
        (self.de_d_fd - self.v).abs()
    }

    /// Residual relative to `V`; the absolute residual when `V = 0`.
    pub fn danskin_residual_rel(&self) -> f64 {
        if self.v > 0.0 {
            self.danskin_residual() / self.v
        } else {
            self.danskin_residual()
        }
    }
}

/// Output of [`cmd_validate_response`].
#[derive(Clone, Debug)]
pub struct ResponseValidation {
    pub c_star: f64,
    pub rows: Vec<ResponseRow>,
    pub ode: Vec<OdePoint>,
}

impl ResponseValidation {
    pub fn bound_at(&self, p: &OdePoint) -> f64 {
        lambda_growth_bound(self.c_star, self.ode[0].lambda, p.t)
    }

    pub fn bound_violations(&self) -> usize {
        self.ode
            .iter()
            .filter(|p| p.lambda > self.bound_at(p))
            .count()
    }
}

/// Central finite difference of `f` at `x` with step `1e-4·x`.
pub fn central_difference(f: impl Fn(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let h = 1e-4 * x;
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Evaluates the best-response quantities on the spec's `Λ` grid, integrates
/// the `Λ` ODE, and writes `response_report.csv`, `response_sweep.csv` and
/// `ode_trace.csv`.
pub fn cmd_validate_response(spec: &ExperimentSpec) -> Result<ResponseValidation> {
    let (mu, nu) = spec.scenario.marginals()?;
    let cost: Arc<dyn crate::model::Cost> = Arc::from(cost_by_name(&spec.cost)?);
    let ev = ResponseEvaluator::new(&mu, &nu, cost, spec.quad_nodes)?;
    let c_star = optimal_cost(&mu, &nu, &spec.cost, spec.flow.seed)?;

    let mut rows = Vec::with_capacity(spec.lambda_grid.len());
    for &lambda in &spec.lambda_grid {
        let m = ev.moments(lambda)?;
        rows.push(ResponseRow {
            lambda,
            z: m.z,
            v: m.v(),
            dv_dlambda: m.dv_dlambda(),
            dv_dlambda_fd: central_difference(|l| ev.v_of_lambda(l), lambda)?,
            e_d: m.e_d(),
            de_d_fd: central_difference(|l| ev.e_d(l), lambda)?,
            z_lower_bound: ev.z_lower_bound_holds(lambda, c_star)?,
        });
    }
    let ode = solve_lambda_ode(&ev, spec.ode_lambda0, spec.ode_horizon, spec.ode_dt)?;
    let report = ResponseValidation { c_star, rows, ode };

    let mut out = Artifacts::new(&spec.output_dir)?;
    out.text("config.resolved.txt", &spec.to_config_string())?;
    let mut sweep = Table::new(&SWEEP_HEADER);
    let mut full = Table::new(&REPORT_HEADER);
    for r in &report.rows {
        sweep.push(vec![r.lambda, r.z, r.v, r.dv_dlambda, r.e_d]);
        full.push(vec![
            r.lambda,
            r.z,
            r.v,
            r.dv_dlambda,
            r.dv_dlambda_fd,
            r.e_d,
            r.de_d_fd,
            r.danskin_residual(),
            r.danskin_residual_rel(),
            if r.z_lower_bound { 1.0 } else { 0.0 },
        ]);
    }
    out.table("response_sweep.csv", &sweep)?;
    out.table("response_report.csv", &full)?;
    let mut trace = Table::new(&ODE_BOUND_HEADER);
    for p in &report.ode {
        let bound = report.bound_at(p);
        trace.push(vec![p.t, p.lambda, p.v, bound, bound - p.lambda]);
    }
    out.table("ode_trace.csv", &trace)?;
    let mut consts = Table::new(&["c_star", "ode_lambda0", "ode_horizon", "bound_violations"]);
    consts.push(vec![
        c_star,
        spec.ode_lambda0,
        spec.ode_horizon,
        report.bound_violations() as f64,
    ]);
    out.table("response_summary.csv", &consts)?;
    Ok(report)
}
