//! Forward simulation of the market under a solved equilibrium, Monte Carlo
//! moment estimation, and the exact second-moment cost oracle.

mod monte_carlo;
mod oracle;
pub mod rng;

pub use monte_carlo::{
    check_estimate, estimate_cost, estimate_moments, expected_profit, verify_simulation, CrossMoment,
    DateMoments, Estimate, MomentEstimate, PriceMoments, ProfitCheck, SimulationReport, StatCheck,
};
pub use oracle::{
    best_response_check, coordinate_argmin, quadratic_ratio, strategy_cost, BestResponseConfig,
    BestResponseReport, ConvexityProbe, Coordinate, Deviation,
};

use serde::{Deserialize, Serialize};

use crate::error::{KyleError, Result};
use crate::model::{EquilibriumSolution, LinearStrategy, MarketPath, ModelParams};
use rng::NormalStream;

/// Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub paths: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl SimConfig {
    pub fn new(paths: usize, seed: u64, antithetic: bool) -> Result<Self> {
        let min = if antithetic { 2 } else { 1 };
        if paths < min {
            return Err(KyleError::InvalidParameter {
                name: "paths",
                reason: format!("must be >= {min}, got {paths}"),
            });
        }
        Ok(SimConfig {
            paths,
            seed,
            antithetic,
        })
    }

    /// Independent sampling units: paths, or antithetic pairs.
    pub(crate) fn units(&self) -> usize {
        if self.antithetic {
            self.paths / 2
        } else {
            self.paths
        }
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            paths: 100_000,
            seed: 42,
            antithetic: false,
        }
    }
}

/// Draws `(a, v)` with the prescribed variances and correlation:
/// `a = sigma_a g1`, `v = sigma_v (rho g1 + sqrt(1 - rho^2) g2)`.
pub fn sample_primitives(params: &ModelParams, normals: &mut NormalStream) -> (f64, f64) {
    let g1 = normals.next_normal();
    let g2 = normals.next_normal();
    primitives_from_normals(params, g1, g2)
}

pub(crate) fn primitives_from_normals(params: &ModelParams, g1: f64, g2: f64) -> (f64, f64) {
    let a = params.sigma_a * g1;
    let v = params.sigma_v * (params.rho * g1 + (1.0 - params.rho * params.rho).sqrt() * g2);
    (a, v)
}

/// Replays one realisation. `strategy` replaces the trader's coefficients at
/// dates `1..N`; pricing and filtering always use the equilibrium rule. The
/// final trade is forced to `a - theta_{N-1}`.
pub fn simulate_path(
    solution: &EquilibriumSolution,
    a: f64,
    v: f64,
    noise: &[f64],
    strategy: Option<&LinearStrategy>,
) -> Result<MarketPath> {
    let n_dates = solution.dates();
    if noise.len() != n_dates {
        return Err(KyleError::Dimension {
            what: "noise",
            expected: n_dates,
            got: noise.len(),
        });
    }
    if let Some(s) = strategy {
        if s.len() != n_dates - 1 {
            return Err(KyleError::Dimension {
                what: "strategy",
                expected: n_dates - 1,
                got: s.len(),
            });
        }
    }

    let mut path = MarketPath {
        a,
        v,
        dw: noise.to_vec(),
        theta: Vec::with_capacity(n_dates + 1),
        y: Vec::with_capacity(n_dates),
        p: Vec::with_capacity(n_dates + 1),
        q: Vec::with_capacity(n_dates + 1),
        z: Vec::with_capacity(n_dates),
    };
    let (mut theta, mut p, mut q) = (0.0, 0.0, 0.0);
    path.theta.push(theta);
    path.p.push(p);
    path.q.push(q);

    for (idx, stage) in solution.stages.iter().enumerate() {
        let n = idx + 1;
        let (lambda, r, alpha) = (stage.lambda(), stage.r(), stage.alpha());
        let x = a - theta - q;
        let d_theta = if n == n_dates {
            a - theta
        } else {
            let (b, c) = match strategy {
                Some(s) => s.at(n),
                None => (stage.beta(), stage.alpha()),
            };
            b * x + c * q
        };
        let y = d_theta + noise[idx];
        let d_p = lambda * y - lambda * alpha * q;
        let d_q = r * y - (1.0 + r) * alpha * q;

        path.z.push(y - alpha * q);
        path.y.push(y);
        theta = if n == n_dates { a } else { theta + d_theta };
        p += d_p;
        q += d_q;
        path.theta.push(theta);
        path.p.push(p);
        path.q.push(q);
    }
    Ok(path)
}

/// Draws the primitives and noise of one path from its keyed stream.
pub(crate) fn draw_path(
    solution: &EquilibriumSolution,
    seed: u64,
    unit: u64,
    negate: bool,
    noise: &mut Vec<f64>,
) -> (f64, f64) {
    let mut normals = NormalStream::new(seed, unit, negate);
    let (a, v) = sample_primitives(&solution.params, &mut normals);
    noise.clear();
    noise.extend((0..solution.dates()).map(|_| solution.params.sigma_w * normals.next_normal()));
    (a, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::solve;
    use crate::model::Tolerances;

    fn reference(n: usize) -> EquilibriumSolution {
        solve(&ModelParams::reference(n).unwrap(), Tolerances::default()).unwrap()
    }

    #[test]
    fn perfect_correlation_makes_v_proportional() {
        let p = ModelParams::new(3, 2.0, 5.0, 1.0, 1.0).unwrap();
        for g in [-1.3, 0.2, 2.7] {
            let (a, v) = primitives_from_normals(&p, g, 0.9);
            assert!((v - 2.5 * a).abs() <= 1e-15 * v.abs());
        }
    }

    #[test]
    fn zero_inputs_stay_at_zero() {
        let sol = reference(5);
        let path = simulate_path(&sol, 0.0, 0.0, &[0.0; 5], None).unwrap();
        assert!(path.theta.iter().chain(&path.p).chain(&path.q).all(|&x| x == 0.0));
    }

    #[test]
    fn terminal_constraint_is_exact() {
        let sol = reference(10);
        let mut noise = Vec::new();
        for unit in 0..500 {
            let (a, v) = draw_path(&sol, 3, unit, false, &mut noise);
            let path = simulate_path(&sol, a, v, &noise, None).unwrap();
            assert_eq!(path.theta[10], a);
            assert_eq!(path.q[10], 0.0);
            assert_eq!(path.theta[0], 0.0);
            for n in 1..=10 {
                let beta = sol.stage(n).unwrap().beta();
                let x = a - path.theta[n - 1] - path.q[n - 1];
                let z = beta * x + path.dw[n - 1];
                assert!((path.z[n - 1] - z).abs() <= 1e-12 * (1.0 + z.abs()));
            }
        }
    }

    #[test]
    fn noise_length_is_checked() {
        let sol = reference(4);
        assert!(matches!(
            simulate_path(&sol, 1.0, 0.0, &[0.0; 3], None),
            Err(KyleError::Dimension { .. })
        ));
    }

    #[test]
    fn config_rejects_empty_runs() {
        assert!(SimConfig::new(0, 1, false).is_err());
        assert!(SimConfig::new(1, 1, true).is_err());
        assert!(SimConfig::new(2, 1, true).is_ok());
    }
}
