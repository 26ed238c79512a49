//! Ring-with-peak source against a four-Gaussian target; prints the final
//! marginal errors of each method.
//!
//! Usage: `ring_mixture [key=value ...]` with the config-file keys.

use minmax_ot::experiment::{ExperimentSpec, Scenario};
use minmax_ot::flow::{run, Method};
use minmax_ot::model::QuadraticCost;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = ExperimentSpec::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        spec.set(k, v)?;
    }
    let (mu, nu) = Scenario::RingToMixture.marginals()?;
    for m in Method::ALL {
        spec.method = m;
        let out = run(&mu, &nu, &QuadraticCost, &spec.flow_config(), &[])?;
        if let Some(e) = &out.abort {
            println!("{m}: aborted {e}");
        }
        let r = out.trajectory.last().ok_or("empty trajectory")?;
        println!(
            "{m:>3}: l2 {:.4} ({:.4}/{:.4}) kl {:.4} rkl {:.4} total {:.4} cost {:.4}",
            r.l2_error(),
            r.l2_mu,
            r.l2_nu,
            r.total_kl(),
            r.total_reverse_kl(),
            r.total_kl() + r.total_reverse_kl(),
            r.cost
        );
    }
    Ok(())
}
