//! Boundary matching at date 0.
//!
//! `Phi(a, c b) = Phi(a, b)` and `Psi(a, c b) = c Psi(a, b)`, so it is enough
//! to find `a_hat` with `Phi(a_hat, 1) = sigma_a^2` and then set
//! `b_hat = rho sigma_a sigma_v / Psi(a_hat, 1)`.

use log::{debug, warn};
use rayon::prelude::*;

use crate::backward::{run_backward, BackwardRun};
use crate::equilibrium::assemble;
use crate::error::{KyleError, Result};
use crate::model::{EquilibriumSolution, ModelParams, Tolerances};

const MAX_DOUBLINGS: usize = 200;
const MAX_BISECTIONS: usize = 400;
/// Grid used to look for additional sign changes: 4 points per octave over 40
/// octaves below `sigma_a^2`. No root can lie above `sigma_a^2` since `Phi(a, 1) > a`.
const SCAN_POINTS_PER_OCTAVE: usize = 4;
const SCAN_OCTAVES: usize = 40;

/// `Phi(a, 1)`.
pub fn phi_of_a(a: f64, params: &ModelParams, tol: &Tolerances) -> Result<f64> {
    Ok(run_backward(a, 1.0, params, tol)?.phi())
}

#[derive(Debug, Clone)]
pub struct ShootingResult {
    pub a_hat: f64,
    pub b_hat: f64,
    /// Final bisection bracket in `a`.
    pub bracket: (f64, f64),
    /// Number of sign changes of `Phi(a, 1) - sigma_a^2` seen on the scan grid.
    pub sign_changes: usize,
    pub solution: EquilibriumSolution,
}

/// Solves the boundary value problem for `N >= 2`.
pub fn solve_boundary(params: &ModelParams, tol: Tolerances) -> Result<ShootingResult> {
    if params.n < 2 {
        return Err(KyleError::InvalidParameter {
            name: "n",
            reason: "shooting needs N >= 2".into(),
        });
    }
    let target = params.initial_moments();
    let gap = |a: f64| -> Result<f64> { Ok(phi_of_a(a, params, &tol)? - target.sigma1) };

    // Geometric bracket expansion from sigma_a^2 / 2.
    let mut a = 0.5 * target.sigma1;
    let mut g = gap(a)?;
    let (mut lo, mut hi) = (a, a);
    let mut found = g == 0.0;
    for _ in 0..MAX_DOUBLINGS {
        if found {
            break;
        }
        let next = if g > 0.0 { 0.5 * a } else { 2.0 * a };
        let g_next = gap(next)?;
        if (g_next > 0.0) != (g > 0.0) || g_next == 0.0 {
            (lo, hi) = if next < a { (next, a) } else { (a, next) };
            found = true;
        }
        a = next;
        g = g_next;
    }
    if !found {
        return Err(KyleError::NoBracket {
            doublings: MAX_DOUBLINGS,
        });
    }
    debug!("shooting bracket [{lo:e}, {hi:e}]");

    let abs_tol = tol.shoot * target.sigma1;
    let mut g_lo = gap(lo)?;
    let mut a_hat = lo;
    let mut g_hat = g_lo;
    let mut converged = g_lo.abs() <= abs_tol;
    if !converged {
        let g_hi = gap(hi)?;
        if g_hi.abs() <= abs_tol {
            a_hat = hi;
            g_hat = g_hi;
            converged = true;
        }
    }
    for _ in 0..MAX_BISECTIONS {
        if converged {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g_mid = gap(mid)?;
        a_hat = mid;
        g_hat = g_mid;
        if g_mid.abs() <= abs_tol {
            converged = true;
        } else if (g_mid > 0.0) == (g_lo > 0.0) {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    if !converged {
        return Err(KyleError::Convergence(format!(
            "bisection on a stalled at a = {a_hat:e} with |Phi - sigma_a^2| = {:e}",
            g_hat.abs()
        )));
    }

    let unit = run_backward(a_hat, 1.0, params, &tol)?;
    let b_hat = target.sigma2 / unit.psi();
    let run = run_backward(a_hat, b_hat, params, &tol)?;

    let sign_changes = count_sign_changes(params, &tol);
    let mut warnings = Vec::new();
    if sign_changes > 1 {
        let msg = format!(
            "Phi(a, 1) - sigma_a^2 changes sign {sign_changes} times on the scan grid; \
             returned the root from the first bracket found"
        );
        warn!("{msg}");
        warnings.push(msg);
    }

    let solution = assemble(&run, params, tol, warnings)?;
    check_boundary(&run, params, &tol)?;
    Ok(ShootingResult {
        a_hat,
        b_hat,
        bracket: (lo, hi),
        sign_changes,
        solution,
    })
}

fn check_boundary(run: &BackwardRun, params: &ModelParams, tol: &Tolerances) -> Result<()> {
    let target = params.initial_moments();
    let r1 = (run.phi() - target.sigma1).abs() / target.sigma1;
    let r2 = (run.psi() - target.sigma2).abs() / target.sigma2;
    if r1 > tol.shoot || r2 > tol.shoot {
        return Err(KyleError::Convergence(format!(
            "boundary residuals ({r1:e}, {r2:e}) exceed {:e}",
            tol.shoot
        )));
    }
    Ok(())
}

/// Sign changes of `Phi(a, 1) - sigma_a^2` on a logarithmic grid below `sigma_a^2`.
/// Grid points where the recursion fails are skipped.
pub fn count_sign_changes(params: &ModelParams, tol: &Tolerances) -> usize {
    let top = params.sigma_a * params.sigma_a;
    let points = SCAN_POINTS_PER_OCTAVE * SCAN_OCTAVES + 1;
    let signs: Vec<Option<bool>> = (0..points)
        .into_par_iter()
        .map(|k| {
            let a = top * (-(k as f64) / SCAN_POINTS_PER_OCTAVE as f64).exp2();
            phi_of_a(a, params, tol).ok().map(|phi| phi - top > 0.0)
        })
        .collect();
    signs
        .iter()
        .flatten()
        .collect::<Vec<_>>()
        .windows(2)
        .filter(|w| w[0] != w[1])
        .count()
}
