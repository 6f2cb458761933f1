use kyle_eq::backward::run_backward;
use kyle_eq::simulator::strategy_cost;
use kyle_eq::verify::{verify_solution, VerifyConfig};
use kyle_eq::{solve, LinearStrategy, ModelParams, Tolerances};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = ModelParams> {
    (2usize..=15, 0.5f64..5.0, 0.2f64..4.0, 0.1f64..2.0, 0.05f64..=1.0)
        .prop_map(|(n, sa, sv, sw, rho)| ModelParams::new(n, sa, sv, sw, rho).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scaling_in_b(p in params(), a_frac in 0.001f64..1.0, b in 0.01f64..100.0, c in 0.01f64..100.0) {
        let tol = Tolerances::default();
        let a = a_frac * solve(&p, tol).unwrap().a_hat;
        let base = run_backward(a, b, &p, &tol).unwrap();
        let scaled = run_backward(a, c * b, &p, &tol).unwrap();
        prop_assert!((scaled.phi() / base.phi() - 1.0).abs() < 1e-12);
        prop_assert!((scaled.psi() / (c * base.psi()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phi_exceeds_a(p in params(), a in 1e-4f64..10.0) {
        let tol = Tolerances::default();
        let run = run_backward(a, 1.0, &p, &tol).unwrap();
        prop_assert!(run.phi() > a);
        for w in run.moments.windows(2) {
            prop_assert!(w[0].sigma1 > w[1].sigma1);
        }
    }

    #[test]
    fn solved_equilibria_verify(p in params()) {
        let sol = solve(&p, Tolerances::default()).unwrap();
        let config = VerifyConfig { scaling_samples: 10, ..VerifyConfig::default() };
        let report = verify_solution(&sol, &config).unwrap();
        let failed: Vec<_> = report.failed().map(|c| c.name.clone()).collect();
        prop_assert!(report.passed, "{:?}: {:?}", p, failed);
        prop_assert!(sol.values.iter().all(|v| v.k <= 0.0));
        prop_assert!(sol.values.windows(2).all(|w| w[0].k <= w[1].k));
    }

    #[test]
    fn exact_cost_matches_value_function(p in params()) {
        let sol = solve(&p, Tolerances::default()).unwrap();
        let cost = strategy_cost(&sol, &LinearStrategy::equilibrium(&sol)).unwrap();
        let v0 = sol.values[0];
        let expected = v0.i * p.sigma_a * p.sigma_a + v0.k;
        prop_assert!((cost - expected).abs() <= 1e-10 * expected.abs());
    }

    #[test]
    fn single_date_is_a_projection(sa in 0.1f64..10.0, sv in 0.1f64..10.0, sw in 0.05f64..5.0, rho in 0.01f64..=1.0) {
        let p = ModelParams::new(1, sa, sv, sw, rho).unwrap();
        let sol = solve(&p, Tolerances::default()).unwrap();
        let lambda = rho * sa * sv / (sa * sa + sw * sw);
        prop_assert!((sol.stages[0].lambda() - lambda).abs() <= 1e-12 * lambda);
        let cost = strategy_cost(&sol, &LinearStrategy::equilibrium(&sol)).unwrap();
        prop_assert!((cost - lambda * sa * sa).abs() <= 1e-12 * cost);
    }
}

#[test]
fn conditional_cost_averages_to_unconditional() {
    let sol = solve(&ModelParams::reference(5).unwrap(), Tolerances::default()).unwrap();
    let sa = sol.params.sigma_a;
    // The conditional cost is quadratic in a, so the 2-point rule at +-sigma_a is exact.
    let avg = 0.5 * (sol.conditional_cost(sa) + sol.conditional_cost(-sa));
    assert!((avg - sol.equilibrium_cost()).abs() <= 1e-14 * avg.abs());
}
