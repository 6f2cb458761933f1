//! Assembly of the equilibrium object from a backward pass, the quadratic
//! value function, and the first-order-condition diagnostics.
//!
//! The `xi`-form relations used by the backward pass are authoritative. The
//! `beta`-form filter gains in this module ([`lambda_from_beta`],
//! [`r_from_beta`], [`moments_forward`]) are an independent route used only
//! for verification.

use serde::{Deserialize, Serialize};

use crate::backward::BackwardRun;
use crate::error::{KyleError, Result};
use crate::model::{
    EquilibriumSolution, ModelParams, MomentPair, StageCoefficients, Tolerances, ValueCoefficients,
};
use crate::shooting;

/// Builds the equilibrium object from a completed backward pass.
pub fn assemble(
    run: &BackwardRun,
    params: &ModelParams,
    tol: Tolerances,
    warnings: Vec<String>,
) -> Result<EquilibriumSolution> {
    let n_dates = params.n;
    if run.moments.len() != n_dates || run.interior.len() + 1 != n_dates {
        return Err(KyleError::Dimension {
            what: "backward run",
            expected: n_dates,
            got: run.moments.len(),
        });
    }

    let mut stages = Vec::with_capacity(n_dates);
    for st in &run.interior {
        let j = run.values[st.n].j;
        let alpha = 1.0 - st.lambda / ((1.0 + st.r) * j);
        stages.push(StageCoefficients::interior(st.n, st.xi, st.lambda, st.r, alpha)?);
    }
    stages.push(StageCoefficients::terminal(n_dates, run.lambda_terminal)?);

    let target = params.initial_moments();
    Ok(EquilibriumSolution {
        params: *params,
        stages,
        moments: run.moments.clone(),
        values: run.values.clone(),
        a_hat: run.a,
        b_hat: run.b,
        residual_phi: (run.phi() - target.sigma1).abs() / target.sigma1,
        residual_psi: (run.psi() - target.sigma2).abs() / target.sigma2,
        tol,
        warnings,
    })
}

/// Single-date market: the whole target is traded at date 1.
pub fn solve_n1(params: &ModelParams) -> Result<EquilibriumSolution> {
    if params.n != 1 {
        return Err(KyleError::InvalidParameter {
            name: "n",
            reason: format!("solve_n1 needs N = 1, got {}", params.n),
        });
    }
    let m0 = params.initial_moments();
    let lambda = m0.sigma2 / (m0.sigma1 + params.noise_var());
    Ok(EquilibriumSolution {
        params: *params,
        stages: vec![StageCoefficients::terminal(1, lambda)?],
        moments: vec![m0],
        values: vec![ValueCoefficients::new(lambda, lambda, 0.0)?],
        a_hat: m0.sigma1,
        b_hat: m0.sigma2,
        residual_phi: 0.0,
        residual_psi: 0.0,
        tol: Tolerances::default(),
        warnings: Vec::new(),
    })
}

/// Solves for the linear equilibrium at `params`.
pub fn solve(params: &ModelParams, tol: Tolerances) -> Result<EquilibriumSolution> {
    let params = crate::model::validate(*params)?;
    if params.n == 1 {
        let mut sol = solve_n1(&params)?;
        sol.tol = tol;
        return Ok(sol);
    }
    Ok(shooting::solve_boundary(&params, tol)?.solution)
}

/// Expected remaining cost `I_n x^2 + J_n x q + K_n` at date `n` in `0..=N-1`.
pub fn value_at(n: usize, x: f64, q: f64, solution: &EquilibriumSolution) -> Result<f64> {
    Ok(solution.value(n)?.eval(x, q))
}

/// First-order-condition coefficients of the date-`n` trading problem before
/// the pricing drift `h_{n-1}` is eliminated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub eta: f64,
    pub gamma: f64,
    /// Coefficient of `q_{n-1}` in `h_{n-1}`, i.e. `-lambda_n alpha_n`.
    pub h_coef: f64,
    /// `beta_n` from the first-order condition.
    pub beta_foc: f64,
    /// `xi_n` from the first-order condition.
    pub xi_foc: f64,
    /// Relative gap between `-eta lambda / (1 + gamma lambda)` and `h_coef`.
    pub h_residual: f64,
}

pub fn diagnostics_at(n: usize, solution: &EquilibriumSolution) -> Result<Diagnostics> {
    let last = solution.dates().saturating_sub(1);
    if n == 0 || n > last {
        return Err(KyleError::Index {
            index: n,
            lo: 1,
            hi: last,
        });
    }
    let stage = solution.stage(n)?;
    let ValueCoefficients { i, j, .. } = *solution.value(n)?;
    let (lambda, r) = (stage.lambda(), stage.r());

    let inner = (1.0 + r) * i - r * j;
    if inner == 0.0 {
        return Err(KyleError::Domain {
            date: n,
            reason: "(1 + r) I - r J vanishes".into(),
        });
    }
    let eta = ((1.0 + r) * j - lambda) / (2.0 * (1.0 + r) * inner);
    let gamma = ((1.0 + 2.0 * r) * j - 2.0 * (1.0 + r) * i) / (2.0 * lambda * inner);
    let h_coef = -lambda * stage.alpha();
    let h_from_foc = -eta * lambda / (1.0 + gamma * lambda);
    let beta_foc = (2.0 * (1.0 + r) * i - r * j - lambda) / (2.0 * (1.0 + r) * inner);
    let xi_foc = (2.0 * (1.0 + r) * i - r * j - lambda)
        / (2.0 * r * (1.0 + r) * i - r * (1.0 + 2.0 * r) * j + lambda);

    Ok(Diagnostics {
        eta,
        gamma,
        h_coef,
        beta_foc,
        xi_foc,
        h_residual: crate::backward::rel_diff(h_from_foc, h_coef),
    })
}

/// Price impact from the projection of `v - p_{n-1}` on the innovation.
pub fn lambda_from_beta(beta: f64, prev: &MomentPair, sigma_w2: f64) -> f64 {
    beta * prev.sigma2 / (beta * beta * prev.sigma1 + sigma_w2)
}

/// Filter gain from the projection of the residual demand on the innovation.
pub fn r_from_beta(beta: f64, prev: &MomentPair, sigma_w2: f64) -> f64 {
    (1.0 - beta) * beta * prev.sigma1 / (beta * beta * prev.sigma1 + sigma_w2)
}

/// Moments of date `n` from those of date `n - 1`, propagated forward.
pub fn moments_forward(beta: f64, prev: &MomentPair, sigma_w2: f64) -> MomentPair {
    let denom = beta * beta * prev.sigma1 + sigma_w2;
    MomentPair {
        sigma1: (1.0 - beta).powi(2) * sigma_w2 * prev.sigma1 / denom,
        sigma2: (1.0 - beta) * sigma_w2 * prev.sigma2 / denom,
    }
}

/// `I_{n-1}` in the `beta`-form of the value recursion.
pub fn i_prev_from_beta(beta: f64, r: f64, value: &ValueCoefficients) -> f64 {
    (1.0 - (1.0 + r).powi(2) * beta * beta) * value.i + beta * beta * r * (1.0 + r) * value.j
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_date_projection() {
        let p = ModelParams::new(1, 3.0, 1.0, 1.0, 1.0 / 3.0).unwrap();
        let sol = solve(&p, Tolerances::default()).unwrap();
        // Cov(v, a + w) / Var(a + w) = rho sa sv / (sa^2 + sw^2) = 1 / 10
        assert!((sol.stages[0].lambda() - 0.1).abs() < 1e-15);
        assert_eq!(sol.values[0].i, sol.values[0].j);
        assert_eq!(sol.values[0].k, 0.0);
        assert_eq!(sol.stages[0].beta(), 1.0);
    }

    #[test]
    fn single_date_perfect_correlation() {
        let p = ModelParams::new(1, 1.0, 1.0, 1.0, 1.0).unwrap();
        let sol = solve(&p, Tolerances::default()).unwrap();
        assert!((sol.stages[0].lambda() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn solve_n1_rejects_longer_horizons() {
        let p = ModelParams::reference(3).unwrap();
        assert!(solve_n1(&p).is_err());
    }

    #[test]
    fn assembled_terminal_and_interior() {
        let p = ModelParams::reference(5).unwrap();
        let sol = solve(&p, Tolerances::default()).unwrap();
        let last = sol.stage(5).unwrap();
        assert_eq!((last.beta(), last.alpha(), last.r()), (1.0, 1.0, 0.0));
        assert_eq!(sol.values[4].k, 0.0);
        for n in 1..5 {
            let s = sol.stage(n).unwrap();
            assert!(s.beta() > 0.0 && s.beta() < 1.0);
            assert_eq!(s.beta(), s.xi().unwrap() / (1.0 + s.xi().unwrap()));
        }
    }

    #[test]
    fn value_function_at_last_interior_date() {
        let p = ModelParams::reference(4).unwrap();
        let sol = solve(&p, Tolerances::default()).unwrap();
        let lam = sol.stage(4).unwrap().lambda();
        let v = value_at(3, 0.7, -0.2, &sol).unwrap();
        assert!((v - (lam * 0.49 + lam * 0.7 * -0.2)).abs() < 1e-15);
        for n in 0..4 {
            let k = value_at(n, 0.0, 0.0, &sol).unwrap();
            assert!(k <= 0.0);
        }
        assert!(matches!(value_at(4, 0.0, 0.0, &sol), Err(KyleError::Index { .. })));
    }

    #[test]
    fn diagnostics_are_consistent() {
        let p = ModelParams::reference(6).unwrap();
        let sol = solve(&p, Tolerances::default()).unwrap();
        for n in 1..6 {
            let d = diagnostics_at(n, &sol).unwrap();
            let s = sol.stage(n).unwrap();
            assert!(d.h_residual < 1e-10, "date {n}: {}", d.h_residual);
            assert!((d.beta_foc - s.beta()).abs() < 1e-10);
            assert!((d.xi_foc - s.xi().unwrap()).abs() < 1e-10 * s.xi().unwrap());
        }
        assert!(diagnostics_at(0, &sol).is_err());
        assert!(diagnostics_at(6, &sol).is_err());
    }

    #[test]
    fn diagnostics_when_i_equals_j() {
        // With I = J the eta numerator is (1 + r) J - lambda and the inner SOC
        // term collapses to I.
        let p = ModelParams::reference(2).unwrap();
        let sol = solve(&p, Tolerances::default()).unwrap();
        let d = diagnostics_at(1, &sol).unwrap();
        let s = sol.stage(1).unwrap();
        let v = sol.values[1];
        assert_eq!(v.i, v.j);
        let expected = ((1.0 + s.r()) * v.j - s.lambda()) / (2.0 * (1.0 + s.r()) * v.i);
        assert!((d.eta - expected).abs() <= 1e-14 * expected.abs().max(1.0));
    }
}
