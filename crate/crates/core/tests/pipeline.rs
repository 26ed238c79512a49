use std::sync::{Arc, OnceLock};

use minmax_ot::experiment::{ExperimentSpec, Scenario};
use minmax_ot::flow::{run, Method};
use minmax_ot::model::{PointCloud, QuadraticCost};
use minmax_ot::oracle::discrete_ot;
use minmax_ot::response::{lambda_growth_bound, solve_lambda_ode, ResponseEvaluator};
use proptest::prelude::*;

fn evaluator() -> &'static ResponseEvaluator {
    static EV: OnceLock<ResponseEvaluator> = OnceLock::new();
    EV.get_or_init(|| {
        let (mu, nu) = Scenario::GaussianPair.marginals().unwrap();
        ResponseEvaluator::new(&mu, &nu, Arc::new(QuadraticCost), 48).unwrap()
    })
}

#[test]
fn ode_stays_under_growth_envelope() {
    let trace = solve_lambda_ode(evaluator(), 0.1, 20.0, 0.25).unwrap();
    assert_eq!(trace.len(), 81);
    for w in trace.windows(2) {
        assert!(w[1].lambda >= w[0].lambda);
    }
    for p in &trace {
        assert!(p.lambda <= lambda_growth_bound(0.08, 0.1, p.t) + 1e-9);
    }
}

#[test]
fn short_runs_are_finite_for_every_method() {
    let (mu, nu) = Scenario::GaussianPair.marginals().unwrap();
    let mut spec = ExperimentSpec::default();
    for (k, v) in [("particles", "500"), ("steps", "20"), ("bins", "12")] {
        spec.set(k, v).unwrap();
    }
    for m in Method::ALL {
        spec.method = m;
        let out = run(&mu, &nu, &QuadraticCost, &spec.flow_config(), &[10]).unwrap();
        assert!(out.abort.is_none(), "{m}");
        assert_eq!(out.trajectory.len(), 21);
        assert!(out.trajectory.lambda_non_decreasing());
        assert!(out.system.all_finite());
        assert_eq!(out.snapshots.len(), 1);
        let last = out.trajectory.last().unwrap();
        assert!(last.cost.is_finite() && last.total_kl() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partition_function_and_value_are_bounded(lambda in 0.01f64..20.0) {
        let ev = evaluator();
        let z = ev.partition_z(lambda).unwrap();
        prop_assert!(z > 0.0 && z <= 1.0 + 1e-12);
        prop_assert!(ev.v_of_lambda(lambda).unwrap() >= -1e-12);
    }

    #[test]
    fn translated_cloud_costs_the_shift(
        pts in prop::collection::vec(-1.0f64..1.0, 2..24),
        a in -1.0f64..1.0,
        b in -1.0f64..1.0,
    ) {
        let n = pts.len() / 2;
        let xs = PointCloud::new(2, pts[..2 * n].to_vec()).unwrap();
        let mut ys = xs.clone();
        for i in 0..n {
            let p = ys.point_mut(i);
            p[0] += a;
            p[1] += b;
        }
        let plan = discrete_ot(&xs, &ys, &QuadraticCost).unwrap();
        prop_assert!((plan.cost - (a * a + b * b)).abs() < 1e-9);
    }
}
