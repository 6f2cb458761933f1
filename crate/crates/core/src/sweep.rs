//! Equilibria across horizons, for comparing the per-date sequences on the
//! common time scale `t = n / N`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::solve;
use crate::error::Result;
use crate::model::{EquilibriumSolution, ModelParams, StageCoefficients, Tolerances};

/// How the noise-trade scale is chosen for each horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScale {
    Fixed(f64),
    /// `sigma_w = 1 / sqrt(N)`, so total noise variance is one.
    InvSqrtN,
}

impl NoiseScale {
    pub fn sigma_w(&self, n: usize) -> f64 {
        match *self {
            NoiseScale::Fixed(s) => s,
            NoiseScale::InvSqrtN => 1.0 / (n as f64).sqrt(),
        }
    }
}

/// Solves every horizon in `horizons` concurrently; results keep the input order.
pub fn solve_horizons(
    sigma_a: f64,
    sigma_v: f64,
    rho: f64,
    noise: NoiseScale,
    horizons: &[usize],
    tol: Tolerances,
) -> Result<Vec<EquilibriumSolution>> {
    horizons
        .par_iter()
        .map(|&n| {
            let params = ModelParams::new(n, sigma_a, sigma_v, noise.sigma_w(n), rho)?;
            solve(&params, tol)
        })
        .collect()
}

/// Piecewise-linear interpolant through `(n / N, values[n - 1])`, `n = 1..=N`.
/// `t` is clamped to `[1 / N, 1]`.
pub fn interpolate(values: &[f64], t: f64) -> f64 {
    let len = values.len();
    if len == 1 {
        return values[0];
    }
    let pos = (t * len as f64 - 1.0).clamp(0.0, (len - 1) as f64);
    let lo = (pos.floor() as usize).min(len - 2);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[lo + 1] - values[lo])
}

/// Largest gap between the interpolants of two sequences on `[start, 1]`,
/// where `start` must be at least `max(1/N1, 1/N2)`. Both interpolants are
/// linear between grid points, so the supremum is attained on the union of
/// the two grids and the window start.
pub fn sup_gap(a: &[f64], b: &[f64], start: f64) -> f64 {
    let grid = |len: usize| (1..=len).map(move |n| n as f64 / len as f64);
    grid(a.len())
        .chain(grid(b.len()))
        .filter(|&t| t >= start)
        .chain(std::iter::once(start))
        .map(|t| (interpolate(a, t) - interpolate(b, t)).abs())
        .fold(0.0, f64::max)
}

/// Sup-gaps of `lambda` and `r` between consecutive horizons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonGap {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub lambda: f64,
    pub r: f64,
}

/// Gaps between consecutive solutions, all measured on the same window
/// `[1 / N_min, 1]` fixed by the coarsest horizon. A window that widened with
/// the finer grid would reach ever closer to `t = 0`, where the early-date
/// coefficients keep growing with `N`, and would not measure convergence.
pub fn consecutive_gaps(solutions: &[EquilibriumSolution]) -> Vec<HorizonGap> {
    let start = gap_window_start(solutions);
    let series = |s: &EquilibriumSolution, f: fn(&StageCoefficients) -> f64| -> Vec<f64> {
        s.stages.iter().map(f).collect()
    };
    solutions
        .windows(2)
        .map(|w| HorizonGap {
            n_coarse: w[0].dates(),
            n_fine: w[1].dates(),
            lambda: sup_gap(
                &series(&w[0], StageCoefficients::lambda),
                &series(&w[1], StageCoefficients::lambda),
                start,
            ),
            r: sup_gap(
                &series(&w[0], StageCoefficients::r),
                &series(&w[1], StageCoefficients::r),
                start,
            ),
        })
        .collect()
}

/// `1 / N_min` over the solutions.
pub fn gap_window_start(solutions: &[EquilibriumSolution]) -> f64 {
    solutions
        .iter()
        .map(|s| 1.0 / s.dates() as f64)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_hits_grid_points() {
        let v = [4.0, 2.0, 1.0, 0.0];
        assert_eq!(interpolate(&v, 0.25), 4.0);
        assert_eq!(interpolate(&v, 0.5), 2.0);
        assert_eq!(interpolate(&v, 1.0), 0.0);
        assert_eq!(interpolate(&v, 0.375), 3.0);
        assert_eq!(interpolate(&v, 0.1), 4.0);
    }

    #[test]
    fn gap_of_linear_functions_sampled_differently() {
        // Both sample t -> 2 - t exactly, so the interpolants coincide.
        let a: Vec<f64> = (1..=4).map(|n| 2.0 - n as f64 / 4.0).collect();
        let b: Vec<f64> = (1..=8).map(|n| 2.0 - n as f64 / 8.0).collect();
        assert!(sup_gap(&a, &b, 0.25) < 1e-15);
    }

    #[test]
    fn gap_sees_interior_grid_points() {
        let a = [1.0, 1.0];
        let b = [1.0, 3.0, 1.0, 1.0];
        assert!((sup_gap(&a, &b, 0.5) - 2.0).abs() < 1e-15);
        assert_eq!(sup_gap(&a, &b, 0.75), 0.0);
    }

    #[test]
    fn inv_sqrt_rule() {
        assert!((NoiseScale::InvSqrtN.sigma_w(4) - 0.5).abs() < 1e-16);
        assert_eq!(NoiseScale::Fixed(0.3).sigma_w(9), 0.3);
    }
}
