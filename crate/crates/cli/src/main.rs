use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use minmax_ot::experiment::{cmd_compare_methods, cmd_run, cmd_validate_response, ExperimentSpec};
use minmax_ot::flow::Method;

/// Particle min-max optimal transport experiments.
#[derive(Parser)]
#[command(name = "minmaxot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle flow and write its trajectory, snapshots and summary.
    Run(Overrides),
    /// Run methods I, II and III with a shared seed and write methods.csv.
    CompareMethods(Overrides),
    /// Sweep the best-response quantities over a grid of Λ and integrate the Λ ODE.
    ValidateResponse(Overrides),
}

/// Flags override values from `--config`.
#[derive(Args)]
struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    /// Particle pairs per family.
    #[arg(long)]
    particles: Option<usize>,
    /// Histogram bins per dimension.
    #[arg(long)]
    bins: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::from_config_file(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentSpec::default(),
        };
        let f = &mut spec.flow;
        if let Some(v) = self.seed {
            f.seed = v;
        }
        if let Some(v) = self.steps {
            f.steps = v;
        }
        if let Some(v) = self.dt {
            f.dt = v;
        }
        if let Some(v) = self.beta {
            f.beta = v;
        }
        if let Some(v) = self.lambda0 {
            f.lambda0 = v;
        }
        if let Some(v) = self.particles {
            f.n_pairs = v;
        }
        if let Some(v) = self.bins {
            f.bins_per_dim = v;
        }
        if let Some(m) = self.method {
            spec.method = m;
        }
        if let Some(o) = &self.out {
            spec.output_dir = o.clone();
        }
        Ok(spec)
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MINMAXOT_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("MINMAXOT_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Run(o) => {
            let spec = o.resolve()?;
            let report = cmd_run(&spec)?;
            let last = report.trajectory.last().expect("initial record");
            println!(
                "steps {}  lambda {}  cost {}  kl {}  l2 {}  ({:.2} s)",
                last.step,
                last.lambda,
                last.cost,
                last.total_kl(),
                last.l2_error(),
                report.wall_seconds
            );
            println!(
                "wrote {} files to {}",
                report.files.len(),
                spec.output_dir.display()
            );
        }
        Command::CompareMethods(o) => {
            let spec = o.resolve()?;
            for r in cmd_compare_methods(&spec)? {
                println!(
                    "{:>3}  l2 {:.4}  kl {:.4}  reverse {:.4}  total {:.4}",
                    r.method.as_str(),
                    r.l2_error,
                    r.kl,
                    r.reverse_kl,
                    r.total_kl()
                );
            }
            println!("wrote {}", spec.output_dir.join("methods.csv").display());
        }
        Command::ValidateResponse(o) => {
            let spec = o.resolve()?;
            let v = cmd_validate_response(&spec)?;
            println!("c* = {}", v.c_star);
            for r in &v.rows {
                println!(
                    "lambda {:<8} Z {:.6e}  V {:.6e}  danskin rel {:.3e}  lower bound {}",
                    r.lambda,
                    r.z,
                    r.v,
                    r.danskin_residual_rel(),
                    r.z_lower_bound
                );
            }
            let end = v.ode.last().expect("ODE start point");
            println!(
                "ode: lambda({}) = {}  bound violations {}",
                end.t,
                end.lambda,
                v.bound_violations()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
