//! Exact expected cost of a linear trading strategy against the equilibrium
//! pricing rule.
//!
//! The state `(x_n, q_n)` with `x_n = a - theta_n - q_n` evolves linearly, so
//! its 2x2 second-moment matrix can be propagated exactly. The cost increment
//! at date `n` is `E[(x_{n-1} + q_{n-1}) dp_n]`, which only needs those
//! moments because the noise is independent of the state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KyleError, Result};
use crate::model::{EquilibriumSolution, LinearStrategy};

#[derive(Debug, Clone, Copy)]
struct StateMoments {
    xx: f64,
    xq: f64,
    qq: f64,
}

/// `E[sum_n (a - theta_{n-1}) dp_n]` under `strategy`.
pub fn strategy_cost(solution: &EquilibriumSolution, strategy: &LinearStrategy) -> Result<f64> {
    let n_dates = solution.dates();
    if strategy.len() + 1 != n_dates {
        return Err(KyleError::Dimension {
            what: "strategy",
            expected: n_dates - 1,
            got: strategy.len(),
        });
    }
    let w2 = solution.params.noise_var();
    let mut m = StateMoments {
        xx: solution.params.sigma_a * solution.params.sigma_a,
        xq: 0.0,
        qq: 0.0,
    };
    let mut cost = 0.0;
    for (idx, stage) in solution.stages.iter().enumerate() {
        let n = idx + 1;
        let (lambda, r, alpha) = (stage.lambda(), stage.r(), stage.alpha());
        let (b, c) = if n == n_dates { (1.0, 1.0) } else { strategy.at(n) };
        let d = c - alpha;

        cost += lambda * (b * m.xx + (b + d) * m.xq + d * m.qq);

        // x' = a11 x + a12 q - r w,  q' = a21 x + a22 q + r w
        let a11 = 1.0 - (1.0 + r) * b;
        let a12 = -(1.0 + r) * d;
        let a21 = r * b;
        let a22 = 1.0 + r * c - (1.0 + r) * alpha;
        let noise = r * r * w2;
        m = StateMoments {
            xx: a11 * a11 * m.xx + 2.0 * a11 * a12 * m.xq + a12 * a12 * m.qq + noise,
            xq: a11 * a21 * m.xx + (a11 * a22 + a12 * a21) * m.xq + a12 * a22 * m.qq - noise,
            qq: a21 * a21 * m.xx + 2.0 * a21 * a22 * m.xq + a22 * a22 * m.qq + noise,
        };
    }
    Ok(cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestResponseConfig {
    pub perturbations: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub tol_opt: f64,
}

impl Default for BestResponseConfig {
    fn default() -> Self {
        BestResponseConfig {
            perturbations: 100,
            epsilon: 0.1,
            seed: 7,
            tol_opt: 1e-10,
        }
    }
}

/// A strategy that was strictly cheaper than equilibrium beyond `tol_opt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub index: usize,
    pub beta_dev: Vec<f64>,
    pub alpha_dev: Vec<f64>,
    pub excess_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coordinate {
    Beta,
    Alpha,
}

/// Central second difference of the cost along one strategy coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityProbe {
    pub n: usize,
    pub coordinate: Coordinate,
    pub second_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponseReport {
    pub equilibrium_cost: f64,
    pub evaluated: usize,
    pub weakly_costlier: usize,
    pub min_excess: f64,
    pub violations: Vec<Deviation>,
    pub convexity: Vec<ConvexityProbe>,
    pub convexity_violations: usize,
    pub passed: bool,
}

/// Random linear deviations around the equilibrium strategy, each of which
/// must cost at least the equilibrium cost minus `tol_opt`.
pub fn best_response_check(
    solution: &EquilibriumSolution,
    config: &BestResponseConfig,
) -> Result<BestResponseReport> {
    let eq = LinearStrategy::equilibrium(solution);
    let base = strategy_cost(solution, &eq)?;
    let dates = eq.len();
    let eps = config.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut violations = Vec::new();
    let mut weakly_costlier = 0;
    let mut min_excess = f64::INFINITY;
    let mut evaluated = 0;
    if dates > 0 {
        for index in 0..config.perturbations {
            let forced = rng.random_range(1..=dates);
            let mut s = eq.clone();
            for n in 1..=dates {
                let chosen = rng.random_bool(0.5);
                let db = eps * rng.random_range(-1.0..=1.0);
                let da = eps * rng.random_range(-1.0..=1.0);
                if chosen || n == forced {
                    s = s.perturbed(n, db, da);
                }
            }
            let excess = strategy_cost(solution, &s)? - base;
            evaluated += 1;
            min_excess = min_excess.min(excess);
            if excess >= -config.tol_opt {
                weakly_costlier += 1;
            } else {
                violations.push(Deviation {
                    index,
                    beta_dev: s.beta_dev().to_vec(),
                    alpha_dev: s.alpha_dev().to_vec(),
                    excess_cost: excess,
                });
            }
        }
    }

    let mut convexity = Vec::new();
    for n in 1..=dates {
        for coordinate in [Coordinate::Beta, Coordinate::Alpha] {
            let (plus, minus) = match coordinate {
                Coordinate::Beta => (eq.perturbed(n, eps, 0.0), eq.perturbed(n, -eps, 0.0)),
                Coordinate::Alpha => (eq.perturbed(n, 0.0, eps), eq.perturbed(n, 0.0, -eps)),
            };
            let second_difference =
                strategy_cost(solution, &plus)? - 2.0 * base + strategy_cost(solution, &minus)?;
            convexity.push(ConvexityProbe {
                n,
                coordinate,
                second_difference,
            });
        }
    }
    let convexity_violations = convexity
        .iter()
        .filter(|p| p.second_difference < -config.tol_opt)
        .count();

    Ok(BestResponseReport {
        equilibrium_cost: base,
        evaluated,
        weakly_costlier,
        min_excess: if evaluated > 0 { min_excess } else { 0.0 },
        passed: violations.is_empty() && convexity_violations == 0,
        violations,
        convexity,
        convexity_violations,
    })
}

/// Cost increase at `2 eps` over the increase at `eps` when only `beta'_n`
/// moves. Close to 4 for a quadratic objective with its minimum at equilibrium.
pub fn quadratic_ratio(solution: &EquilibriumSolution, n: usize, eps: f64) -> Result<f64> {
    let eq = LinearStrategy::equilibrium(solution);
    let base = strategy_cost(solution, &eq)?;
    let one = strategy_cost(solution, &eq.perturbed(n, eps, 0.0))? - base;
    let two = strategy_cost(solution, &eq.perturbed(n, 2.0 * eps, 0.0))? - base;
    Ok(two / one)
}

/// Minimises the cost over one coordinate of the date-`n` strategy with all
/// other coordinates at equilibrium. Returns `None` when the cost does not
/// depend on that coordinate (e.g. `alpha'_1`, since `q_0 = 0`).
///
/// Golden-section search on `[-10, 10]`, finished with a parabolic step
/// through three points around the golden-section estimate.
pub fn coordinate_argmin(
    solution: &EquilibriumSolution,
    n: usize,
    coordinate: Coordinate,
) -> Result<Option<f64>> {
    let eq = LinearStrategy::equilibrium(solution);
    if n == 0 || n > eq.len() {
        return Err(KyleError::Index {
            index: n,
            lo: 1,
            hi: eq.len(),
        });
    }
    let cost = |value: f64| -> Result<f64> {
        let s = match coordinate {
            Coordinate::Beta => eq.with_beta(n, value),
            Coordinate::Alpha => eq.with_alpha(n, value),
        };
        strategy_cost(solution, &s)
    };

    let f0 = cost(0.0)?;
    let curvature = cost(1.0)? - 2.0 * f0 + cost(-1.0)?;
    if curvature.abs() <= 1e-13 * f0.abs().max(1.0) {
        return Ok(None);
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-10.0_f64, 10.0_f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (cost(x1)?, cost(x2)?);
    while hi - lo > 1e-6 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = cost(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = cost(x2)?;
        }
    }
    let m = 0.5 * (lo + hi);
    let h = 1e-2;
    let (fm, fp, fn_) = (cost(m)?, cost(m + h)?, cost(m - h)?);
    let denom = fp - 2.0 * fm + fn_;
    if denom > 0.0 {
        Ok(Some(m - 0.5 * h * (fp - fn_) / denom))
    } else {
        Ok(Some(m))
    }
}
