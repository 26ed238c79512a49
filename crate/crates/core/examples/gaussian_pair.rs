//! Runs the two-Gaussian experiment and prints a thinned trace.
//!
//! Usage: `gaussian_pair [key=value ...]` with the config-file keys
//! (`seed`, `steps`, `lambda0`, `beta`, `bins`, `method`, ...).

use std::time::Instant;

use minmax_ot::experiment::{ExperimentSpec, Scenario};
use minmax_ot::flow::run;
use minmax_ot::model::QuadraticCost;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = ExperimentSpec::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        spec.set(k, v)?;
    }
    let cfg = spec.flow_config();
    let (mu, nu) = Scenario::GaussianPair.marginals()?;
    let start = Instant::now();
    let out = run(&mu, &nu, &QuadraticCost, &cfg, &[])?;
    let secs = start.elapsed().as_secs_f64();
    if let Some(e) = &out.abort {
        println!("aborted: {e}");
    }
    let traj = &out.trajectory;
    for r in traj.records.iter().step_by((cfg.steps / 10).max(1)) {
        println!(
            "step {:5} t {:.4} lambda {:.4} cost {:.4} kl {:.4} rkl {:.4} l2 {:.4}/{:.4}",
            r.step,
            r.t,
            r.lambda,
            r.cost,
            r.total_kl(),
            r.total_reverse_kl(),
            r.l2_mu,
            r.l2_nu
        );
    }
    let last = traj.last().ok_or("empty trajectory")?;
    println!(
        "final cost {:.4} l2 {:.4} kl {:.4} lambda {:.4} bound violations {} time {:.1}s",
        last.cost,
        last.l2_error(),
        last.total_kl(),
        last.lambda,
        traj.growth_bound_violations(0.08).len(),
        secs
    );
    Ok(())
}
