//! Seeded Monte Carlo over independent paths.
//!
//! Paths are grouped in fixed-size chunks. Chunks run in parallel and are
//! merged in chunk order, so results are bit-identical for any thread count.
//! Statistics are checked at 3 standard errors; a failing statistic is
//! re-estimated on an independent replicate and only counts as a violation
//! if it fails again.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng::replicate_seed;
use super::{draw_path, simulate_path, strategy_cost, SimConfig};
use crate::error::Result;
use crate::model::{EquilibriumSolution, LinearStrategy, MarketPath};

const CHUNK: usize = 2048;
const Z_LIMIT: f64 = 3.0;

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
    }

    fn merge(&mut self, other: &Welford) {
        if other.count == 0.0 {
            return;
        }
        let total = self.count + other.count;
        let d = other.mean - self.mean;
        self.mean += d * other.count / total;
        self.m2 += other.m2 + d * d * self.count * other.count / total;
        self.count = total;
    }

    fn estimate(&self) -> Estimate {
        let se = if self.count > 1.0 {
            (self.m2 / (self.count - 1.0) / self.count).sqrt()
        } else {
            f64::INFINITY
        };
        Estimate {
            mean: self.mean,
            se,
        }
    }
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

struct Accumulated {
    stats: Vec<Welford>,
    maxima: Vec<f64>,
}

/// Runs `per_path` over every path of `config`. Under antithetic sampling the
/// two mirrored paths of a pair are averaged into one sample.
fn accumulate<F>(
    solution: &EquilibriumSolution,
    config: &SimConfig,
    width: usize,
    max_width: usize,
    per_path: F,
) -> Accumulated
where
    F: Fn(&MarketPath, &mut [f64], &mut [f64]) + Sync,
{
    let units = config.units();
    let chunks = units.div_ceil(CHUNK);
    let parts: Vec<Accumulated> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Accumulated {
                stats: vec![Welford::default(); width],
                maxima: vec![0.0; max_width],
            };
            let mut noise = Vec::with_capacity(solution.dates());
            let mut sample = vec![0.0; width];
            let mut mirror = vec![0.0; width];
            let end = ((c + 1) * CHUNK).min(units);
            for unit in c * CHUNK..end {
                let mut run = |negate: bool, out: &mut [f64], maxima: &mut [f64]| {
                    let (a, v) = draw_path(solution, config.seed, unit as u64, negate, &mut noise);
                    let path = simulate_path(solution, a, v, &noise, None)
                        .expect("noise length matches the solution");
                    per_path(&path, out, maxima);
                };
                run(false, &mut sample, &mut acc.maxima);
                if config.antithetic {
                    run(true, &mut mirror, &mut acc.maxima);
                    for (s, m) in sample.iter_mut().zip(&mirror) {
                        *s = 0.5 * (*s + m);
                    }
                }
                for (w, &x) in acc.stats.iter_mut().zip(&sample) {
                    w.push(x);
                }
            }
            acc
        })
        .collect();

    let mut total = Accumulated {
        stats: vec![Welford::default(); width],
        maxima: vec![0.0; max_width],
    };
    for part in &parts {
        for (t, p) in total.stats.iter_mut().zip(&part.stats) {
            t.merge(p);
        }
        for (t, p) in total.maxima.iter_mut().zip(&part.maxima) {
            *t = t.max(*p);
        }
    }
    total
}

/// Variant of [`accumulate`] for a deviating trader; only the realised cost
/// is recorded.
fn accumulate_cost(
    solution: &EquilibriumSolution,
    config: &SimConfig,
    strategy: Option<&LinearStrategy>,
) -> Result<Estimate> {
    let units = config.units();
    let chunks = units.div_ceil(CHUNK);
    let parts: Vec<Result<Welford>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Welford::default();
            let mut noise = Vec::with_capacity(solution.dates());
            let end = ((c + 1) * CHUNK).min(units);
            for unit in c * CHUNK..end {
                let mut sample = 0.0;
                let reps: &[bool] = if config.antithetic { &[false, true] } else { &[false] };
                for &negate in reps {
                    let (a, v) = draw_path(solution, config.seed, unit as u64, negate, &mut noise);
                    let path = simulate_path(solution, a, v, &noise, strategy)?;
                    sample += realised_cost(&path);
                }
                acc.push(sample / reps.len() as f64);
            }
            Ok(acc)
        })
        .collect();
    let mut total = Welford::default();
    for part in parts {
        total.merge(&part?);
    }
    Ok(total.estimate())
}

/// `sum_n (a - theta_{n-1}) dp_n` along one path.
fn realised_cost(path: &MarketPath) -> f64 {
    (1..path.p.len())
        .map(|n| (path.a - path.theta[n - 1]) * (path.p[n] - path.p[n - 1]))
        .sum()
}

/// `sum_n (v - p_n) d_theta_n` along one path.
fn realised_profit(path: &MarketPath) -> f64 {
    (1..path.p.len())
        .map(|n| (path.v - path.p[n]) * (path.theta[n] - path.theta[n - 1]))
        .sum()
}

/// Index layout of the per-path statistics vector.
struct Layout {
    dates: usize,
    /// `(n, k)` with `1 <= k < n <= N`.
    lower_pairs: Vec<(usize, usize)>,
    /// `(n, k)` with `1 <= k <= n <= N - 1`.
    residual_pairs: Vec<(usize, usize)>,
}

impl Layout {
    fn new(dates: usize) -> Self {
        let lower_pairs = (1..=dates)
            .flat_map(|n| (1..n).map(move |k| (n, k)))
            .collect();
        let residual_pairs = (1..dates)
            .flat_map(|n| (1..=n).map(move |k| (n, k)))
            .collect();
        Layout {
            dates,
            lower_pairs,
            residual_pairs,
        }
    }
    fn sigma1(&self) -> usize {
        0
    }
    fn sigma2(&self) -> usize {
        self.dates
    }
    fn dp(&self) -> usize {
        2 * self.dates
    }
    fn dp_sq(&self) -> usize {
        3 * self.dates
    }
    fn innovation(&self) -> usize {
        4 * self.dates
    }
    fn residual(&self) -> usize {
        self.innovation() + self.lower_pairs.len()
    }
    fn price_flow(&self) -> usize {
        self.residual() + self.residual_pairs.len()
    }
    fn cost(&self) -> usize {
        self.price_flow() + self.lower_pairs.len()
    }
    fn profit(&self) -> usize {
        self.cost() + 1
    }
    fn width(&self) -> usize {
        self.profit() + 1
    }

    fn fill(&self, path: &MarketPath, out: &mut [f64], maxima: &mut [f64]) {
        let nd = self.dates;
        let x = |n: usize| path.a - path.theta[n] - path.q[n];
        let dp = |n: usize| path.p[n] - path.p[n - 1];
        for n in 0..nd {
            let xn = x(n);
            out[self.sigma1() + n] = xn * xn;
            out[self.sigma2() + n] = xn * (path.v - path.p[n]);
        }
        for n in 1..=nd {
            let d = dp(n);
            out[self.dp() + n - 1] = d;
            out[self.dp_sq() + n - 1] = d * d;
        }
        for (idx, &(n, k)) in self.lower_pairs.iter().enumerate() {
            out[self.innovation() + idx] = path.z[n - 1] * path.z[k - 1];
            out[self.price_flow() + idx] = dp(n) * path.y[k - 1];
        }
        for (idx, &(n, k)) in self.residual_pairs.iter().enumerate() {
            out[self.residual() + idx] = x(n) * path.z[k - 1];
        }
        out[self.cost()] = realised_cost(path);
        out[self.profit()] = realised_profit(path);
        maxima[0] = maxima[0].max((path.theta[nd] - path.a).abs());
        maxima[1] = maxima[1].max(path.q[nd].abs());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DateMoments {
    pub n: usize,
    /// Estimate of `E[(a - theta_n - q_n)^2]`.
    pub sigma1: Estimate,
    /// Estimate of `E[(a - theta_n - q_n)(v - p_n)]`.
    pub sigma2: Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceMoments {
    pub n: usize,
    pub mean: Estimate,
    /// Estimate of `E[dp_n^2]`.
    pub second_moment: Estimate,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossMoment {
    pub n: usize,
    pub k: usize,
    pub estimate: Estimate,
}

/// Monte Carlo moments of the equilibrium dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Dates `0..=N-1`.
    pub sigma: Vec<DateMoments>,
    /// Dates `1..=N`.
    pub price_changes: Vec<PriceMoments>,
    /// `E[z_n z_k]`, `k < n`.
    pub innovation_cross: Vec<CrossMoment>,
    /// `E[(a - theta_n - q_n) z_k]`, `k <= n < N`.
    pub residual_innovation: Vec<CrossMoment>,
    /// `E[dp_n y_k]`, `k < n`.
    pub price_flow: Vec<CrossMoment>,
    pub cost: Estimate,
    pub profit: Estimate,
    pub max_terminal_position_error: f64,
    pub max_terminal_belief: f64,
}

pub fn estimate_moments(solution: &EquilibriumSolution, config: &SimConfig) -> MomentEstimate {
    let layout = Layout::new(solution.dates());
    let acc = accumulate(solution, config, layout.width(), 2, |path, out, maxima| {
        layout.fill(path, out, maxima)
    });
    let est = |i: usize| acc.stats[i].estimate();
    let nd = solution.dates();

    let sigma = (0..nd)
        .map(|n| DateMoments {
            n,
            sigma1: est(layout.sigma1() + n),
            sigma2: est(layout.sigma2() + n),
        })
        .collect();
    let price_changes = (1..=nd)
        .map(|n| {
            let mean = est(layout.dp() + n - 1);
            let second_moment = est(layout.dp_sq() + n - 1);
            PriceMoments {
                n,
                mean,
                second_moment,
                variance: second_moment.mean - mean.mean * mean.mean,
            }
        })
        .collect();
    let cross = |base: usize, pairs: &[(usize, usize)]| -> Vec<CrossMoment> {
        pairs
            .iter()
            .enumerate()
            .map(|(idx, &(n, k))| CrossMoment {
                n,
                k,
                estimate: est(base + idx),
            })
            .collect()
    };

    MomentEstimate {
        paths: config.units() * if config.antithetic { 2 } else { 1 },
        seed: config.seed,
        antithetic: config.antithetic,
        sigma,
        price_changes,
        innovation_cross: cross(layout.innovation(), &layout.lower_pairs),
        residual_innovation: cross(layout.residual(), &layout.residual_pairs),
        price_flow: cross(layout.price_flow(), &layout.lower_pairs),
        cost: est(layout.cost()),
        profit: est(layout.profit()),
        max_terminal_position_error: acc.maxima[0],
        max_terminal_belief: acc.maxima[1],
    }
}

/// Monte Carlo estimate of the expected cost of `strategy` (equilibrium if `None`).
pub fn estimate_cost(
    solution: &EquilibriumSolution,
    strategy: Option<&LinearStrategy>,
    config: &SimConfig,
) -> Result<Estimate> {
    accumulate_cost(solution, config, strategy)
}

fn z_score(estimate: &Estimate, expected: f64) -> f64 {
    let diff = estimate.mean - expected;
    if estimate.se > 0.0 {
        diff / estimate.se
    } else if diff.abs() <= 1e-12 * expected.abs().max(1.0) {
        0.0
    } else {
        f64::INFINITY
    }
}

/// One statistic compared with its theoretical value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatCheck {
    pub name: String,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub estimate: f64,
    pub se: f64,
    pub expected: f64,
    pub z: f64,
    /// z-score on the independent replicate, present only if the first estimate failed.
    pub retry_z: Option<f64>,
    pub violation: bool,
}

impl StatCheck {
    fn new(name: &str, n: Option<usize>, k: Option<usize>, estimate: Estimate, expected: f64) -> Self {
        let z = z_score(&estimate, expected);
        StatCheck {
            name: name.to_string(),
            n,
            k,
            estimate: estimate.mean,
            se: estimate.se,
            expected,
            z,
            retry_z: None,
            violation: false,
        }
    }

    fn first_failed(&self) -> bool {
        !(self.z.abs() < Z_LIMIT)
    }

    fn key(&self) -> (String, Option<usize>, Option<usize>) {
        (self.name.clone(), self.n, self.k)
    }
}

fn moment_checks(solution: &EquilibriumSolution, est: &MomentEstimate) -> Vec<StatCheck> {
    let w2 = solution.params.noise_var();
    let mut checks = Vec::new();
    for d in &est.sigma {
        let m = solution.moments[d.n];
        checks.push(StatCheck::new("sigma1", Some(d.n), None, d.sigma1, m.sigma1));
        checks.push(StatCheck::new("sigma2", Some(d.n), None, d.sigma2, m.sigma2));
    }
    for pc in &est.price_changes {
        let stage = &solution.stages[pc.n - 1];
        let prev = solution.moments[pc.n - 1];
        let innovation_var = stage.beta() * stage.beta() * prev.sigma1 + w2;
        let expected = stage.lambda() * stage.lambda() * innovation_var;
        checks.push(StatCheck::new("price_change_mean", Some(pc.n), None, pc.mean, 0.0));
        checks.push(StatCheck::new(
            "price_change_second_moment",
            Some(pc.n),
            None,
            pc.second_moment,
            expected,
        ));
    }
    for c in &est.innovation_cross {
        checks.push(StatCheck::new("innovation_cross", Some(c.n), Some(c.k), c.estimate, 0.0));
    }
    for c in &est.residual_innovation {
        checks.push(StatCheck::new("residual_innovation", Some(c.n), Some(c.k), c.estimate, 0.0));
    }
    for c in &est.price_flow {
        checks.push(StatCheck::new("price_martingale", Some(c.n), Some(c.k), c.estimate, 0.0));
    }
    let cost = solution.equilibrium_cost();
    checks.push(StatCheck::new("cost", None, None, est.cost, cost));
    checks.push(StatCheck::new("profit", None, None, est.profit, profit_target(solution)));
    checks
}

/// `rho sigma_a sigma_v - (I_0 sigma_a^2 + K_0)`, the expected trader profit.
fn profit_target(solution: &EquilibriumSolution) -> f64 {
    let p = &solution.params;
    p.rho * p.sigma_v / p.sigma_a * (p.sigma_a * p.sigma_a) - solution.equilibrium_cost()
}

/// Full Monte Carlo verification of a solved equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    pub max_terminal_position_error: f64,
    pub max_terminal_belief: f64,
    pub pathwise_exact: bool,
    pub checks: Vec<StatCheck>,
    pub first_pass_failures: usize,
    pub violations: usize,
    pub passed: bool,
}

impl SimulationReport {
    pub fn checks_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a StatCheck> + 'a {
        self.checks.iter().filter(move |c| c.name == name)
    }
}

/// Runs every statistical invariant, plus `deviations` random linear
/// deviations whose Monte Carlo cost is compared with the exact oracle.
pub fn verify_simulation(
    solution: &EquilibriumSolution,
    config: &SimConfig,
    deviations: usize,
) -> Result<SimulationReport> {
    check_estimate(solution, &estimate_moments(solution, config), config, deviations)
}

/// [`verify_simulation`] for an estimate already produced by
/// [`estimate_moments`] under `config`.
pub fn check_estimate(
    solution: &EquilibriumSolution,
    est: &MomentEstimate,
    config: &SimConfig,
    deviations: usize,
) -> Result<SimulationReport> {
    let mut checks = moment_checks(solution, est);

    if checks.iter().any(StatCheck::first_failed) {
        let retry_cfg = SimConfig {
            seed: replicate_seed(config.seed, 1),
            ..*config
        };
        let retry = moment_checks(solution, &estimate_moments(solution, &retry_cfg));
        for check in checks.iter_mut().filter(|c| c.first_failed()) {
            let again = retry
                .iter()
                .find(|r| r.key() == check.key())
                .expect("same layout on the replicate");
            check.retry_z = Some(again.z);
            check.violation = again.first_failed();
        }
    }

    if solution.dates() > 1 {
        let eq = LinearStrategy::equilibrium(solution);
        for i in 0..deviations {
            let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(config.seed, 1000 + i as u64));
            let mut s = eq.clone();
            for n in 1..=eq.len() {
                s = s.perturbed(
                    n,
                    0.1 * rng.random_range(-1.0..=1.0),
                    0.1 * rng.random_range(-1.0..=1.0),
                );
            }
            let exact = strategy_cost(solution, &s)?;
            let cfg = SimConfig {
                seed: replicate_seed(config.seed, 2000 + i as u64),
                ..*config
            };
            let mut check = StatCheck::new(
                "deviation_cost",
                Some(i),
                None,
                estimate_cost(solution, Some(&s), &cfg)?,
                exact,
            );
            if check.first_failed() {
                let cfg = SimConfig {
                    seed: replicate_seed(config.seed, 3000 + i as u64),
                    ..*config
                };
                let again = z_score(&estimate_cost(solution, Some(&s), &cfg)?, exact);
                check.retry_z = Some(again);
                check.violation = !(again.abs() < Z_LIMIT);
            }
            checks.push(check);
        }
    }

    let pathwise_exact = est.max_terminal_position_error == 0.0 && est.max_terminal_belief == 0.0;
    let first_pass_failures = checks.iter().filter(|c| c.first_failed()).count();
    let violations = checks.iter().filter(|c| c.violation).count();
    Ok(SimulationReport {
        paths: est.paths,
        seed: config.seed,
        antithetic: config.antithetic,
        max_terminal_position_error: est.max_terminal_position_error,
        max_terminal_belief: est.max_terminal_belief,
        pathwise_exact,
        checks,
        first_pass_failures,
        violations,
        passed: pathwise_exact && violations == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfitCheck {
    pub estimate: Estimate,
    /// `rho sigma_v / sigma_a E[a^2]` minus the exact expected cost.
    pub target: f64,
    pub z: f64,
    pub passed: bool,
}

/// Monte Carlo trader profit against the profit-cost identity.
pub fn expected_profit(solution: &EquilibriumSolution, config: &SimConfig) -> ProfitCheck {
    let acc = accumulate(solution, config, 1, 0, |path, out, _| {
        out[0] = realised_profit(path);
    });
    let estimate = acc.stats[0].estimate();
    let target = profit_target(solution);
    let z = z_score(&estimate, target);
    ProfitCheck {
        estimate,
        target,
        z,
        passed: z.abs() < Z_LIMIT,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1 - 3.0).collect();
        let mut whole = Welford::default();
        xs.iter().for_each(|&x| whole.push(x));
        let mut left = Welford::default();
        let mut right = Welford::default();
        xs[..313].iter().for_each(|&x| left.push(x));
        xs[313..].iter().for_each(|&x| right.push(x));
        left.merge(&right);
        assert!((left.mean - whole.mean).abs() < 1e-12);
        assert!((left.m2 - whole.m2).abs() < 1e-9 * whole.m2);
    }

    #[test]
    fn zero_se_compares_exactly() {
        let e = Estimate { mean: 1.0, se: 0.0 };
        assert_eq!(z_score(&e, 1.0), 0.0);
        assert!(z_score(&e, 1.1).is_infinite());
    }

    #[test]
    fn layout_widths() {
        let l = Layout::new(3);
        // 4 * 3 + 3 lower pairs + 3 residual pairs + 3 lower pairs + 2
        assert_eq!(l.width(), 12 + 3 + 3 + 3 + 2);
    }
}
