//! Exogenous parameters and the value types shared by the solver, the
//! simulator and the command-line front end.
//!
//! Everything here is an immutable value object once built. Constructors
//! reject non-finite numbers; the solver is responsible for the sign
//! invariants that hold along a valid backward trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{KyleError, Result};

fn finite(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(KyleError::InvalidParameter {
            name,
            reason: format!("must be finite, got {value}"),
        })
    }
}

fn positive(name: &'static str, value: f64) -> Result<f64> {
    finite(name, value)?;
    if value > 0.0 {
        Ok(value)
    } else {
        Err(KyleError::InvalidParameter {
            name,
            reason: format!("must be > 0, got {value}"),
        })
    }
}

/// Model primitives: number of trading dates and the Gaussian scales of the
/// trading target, the fundamental value and the noise-trade increments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub sigma_a: f64,
    pub sigma_v: f64,
    pub sigma_w: f64,
    pub rho: f64,
}

impl ModelParams {
    pub fn new(n: usize, sigma_a: f64, sigma_v: f64, sigma_w: f64, rho: f64) -> Result<Self> {
        validate(ModelParams {
            n,
            sigma_a,
            sigma_v,
            sigma_w,
            rho,
        })
    }

    /// Exogenous values used in the reference comparison figure:
    /// `sigma_w = 1/sqrt(N)`, `sigma_v = 1`, `sigma_a = 3`, `rho = 1/3`.
    pub fn reference(n: usize) -> Result<Self> {
        Self::new(n, 3.0, 1.0, 1.0 / (n.max(1) as f64).sqrt(), 1.0 / 3.0)
    }

    pub fn noise_var(&self) -> f64 {
        self.sigma_w * self.sigma_w
    }

    /// `(E[a^2], E[a v])`, the moments the backward recursion must hit at date 0.
    pub fn initial_moments(&self) -> MomentPair {
        MomentPair {
            sigma1: self.sigma_a * self.sigma_a,
            sigma2: self.rho * self.sigma_a * self.sigma_v,
        }
    }

    pub fn with_n(self, n: usize) -> Result<Self> {
        validate(ModelParams { n, ..self })
    }
}

/// Returns `params` unchanged if every bound holds.
pub fn validate(params: ModelParams) -> Result<ModelParams> {
    if params.n < 1 {
        return Err(KyleError::InvalidParameter {
            name: "n",
            reason: format!("must be >= 1, got {}", params.n),
        });
    }
    positive("sigma_a", params.sigma_a)?;
    positive("sigma_v", params.sigma_v)?;
    positive("sigma_w", params.sigma_w)?;
    finite("rho", params.rho)?;
    if !(params.rho > 0.0 && params.rho <= 1.0) {
        return Err(KyleError::InvalidParameter {
            name: "rho",
            reason: format!("must lie in (0, 1], got {}", params.rho),
        });
    }
    Ok(params)
}

/// Numerical tolerances carried with every solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Scaled residual bound for each stage root.
    pub root: f64,
    /// Relative bound for algebraic identity checks.
    pub identity: f64,
    /// Relative bound for the date-0 boundary match.
    pub shoot: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            root: 1e-12,
            identity: 1e-10,
            shoot: 1e-10,
        }
    }
}

/// Per-date equilibrium constants.
///
/// For interior dates `xi` is the stored unknown and `beta = xi / (1 + xi)`
/// is derived from it at construction. At the final date the trade is
/// forced, `xi` is absent and `beta = alpha = 1`, `r = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCoefficients {
    n: usize,
    xi: Option<f64>,
    beta: f64,
    alpha: f64,
    lambda: f64,
    r: f64,
}

impl StageCoefficients {
    pub fn interior(n: usize, xi: f64, lambda: f64, r: f64, alpha: f64) -> Result<Self> {
        positive("xi", xi)?;
        positive("lambda", lambda)?;
        positive("r", r)?;
        finite("alpha", alpha)?;
        Ok(StageCoefficients {
            n,
            xi: Some(xi),
            beta: xi / (1.0 + xi),
            alpha,
            lambda,
            r,
        })
    }

    pub fn terminal(n: usize, lambda: f64) -> Result<Self> {
        positive("lambda", lambda)?;
        Ok(StageCoefficients {
            n,
            xi: None,
            beta: 1.0,
            alpha: 1.0,
            lambda,
            r: 0.0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn xi(&self) -> Option<f64> {
        self.xi
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn is_terminal(&self) -> bool {
        self.xi.is_none()
    }
}

/// `sigma1 = E[(a - theta_n - q_n)^2]`, `sigma2 = E[(a - theta_n - q_n)(v - p_n)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub sigma1: f64,
    pub sigma2: f64,
}

impl MomentPair {
    pub fn new(sigma1: f64, sigma2: f64) -> Result<Self> {
        Ok(MomentPair {
            sigma1: finite("sigma1", sigma1)?,
            sigma2: finite("sigma2", sigma2)?,
        })
    }
}

/// Coefficients of the trader's expected remaining cost
/// `i * x^2 + j * x * q + k` with `x = a - theta_n - q_n`, `q = q_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueCoefficients {
    pub i: f64,
    pub j: f64,
    pub k: f64,
}

impl ValueCoefficients {
    pub fn new(i: f64, j: f64, k: f64) -> Result<Self> {
        Ok(ValueCoefficients {
            i: finite("i", i)?,
            j: finite("j", j)?,
            k: finite("k", k)?,
        })
    }

    pub fn eval(&self, x: f64, q: f64) -> f64 {
        self.i * x * x + self.j * x * q + self.k
    }
}

/// A solved linear equilibrium.
///
/// `stages[k]` holds date `k + 1` (dates `1..=N`); `moments[n]` and
/// `values[n]` hold date `n` (dates `0..=N-1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub params: ModelParams,
    pub stages: Vec<StageCoefficients>,
    pub moments: Vec<MomentPair>,
    pub values: Vec<ValueCoefficients>,
    pub a_hat: f64,
    pub b_hat: f64,
    pub residual_phi: f64,
    pub residual_psi: f64,
    pub tol: Tolerances,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EquilibriumSolution {
    pub fn dates(&self) -> usize {
        self.params.n
    }

    /// Stage coefficients at date `n` in `1..=N`.
    pub fn stage(&self, n: usize) -> Result<&StageCoefficients> {
        if n == 0 || n > self.stages.len() {
            return Err(KyleError::Index {
                index: n,
                lo: 1,
                hi: self.stages.len(),
            });
        }
        Ok(&self.stages[n - 1])
    }

    /// Moments at date `n` in `0..=N-1`.
    pub fn moment(&self, n: usize) -> Result<&MomentPair> {
        self.moments.get(n).ok_or(KyleError::Index {
            index: n,
            lo: 0,
            hi: self.moments.len().saturating_sub(1),
        })
    }

    /// Value coefficients at date `n` in `0..=N-1`.
    pub fn value(&self, n: usize) -> Result<&ValueCoefficients> {
        self.values.get(n).ok_or(KyleError::Index {
            index: n,
            lo: 0,
            hi: self.values.len().saturating_sub(1),
        })
    }

    /// Unconditional expected cost of the equilibrium strategy,
    /// `E[I_0 a^2 + K_0] = I_0 sigma_a^2 + K_0`.
    pub fn equilibrium_cost(&self) -> f64 {
        let v = &self.values[0];
        v.i * self.params.sigma_a * self.params.sigma_a + v.k
    }

    /// Expected cost given the target `a`, with `q_0 = 0`.
    pub fn conditional_cost(&self, a: f64) -> f64 {
        let v = &self.values[0];
        v.i * a * a + v.k
    }
}

/// One simulated realisation of the market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketPath {
    pub a: f64,
    pub v: f64,
    /// Noise increments for dates `1..=N`.
    pub dw: Vec<f64>,
    /// Positions for dates `0..=N`.
    pub theta: Vec<f64>,
    /// Order flow for dates `1..=N`.
    pub y: Vec<f64>,
    /// Prices for dates `0..=N`.
    pub p: Vec<f64>,
    /// Market-maker beliefs for dates `0..=N`.
    pub q: Vec<f64>,
    /// Innovations for dates `1..=N`.
    pub z: Vec<f64>,
}

/// Trader-side coefficients for dates `1..=N-1`. The final trade is always
/// `a - theta_{N-1}` and is not represented here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStrategy {
    beta_dev: Vec<f64>,
    alpha_dev: Vec<f64>,
}

impl LinearStrategy {
    pub fn new(beta_dev: Vec<f64>, alpha_dev: Vec<f64>) -> Result<Self> {
        if beta_dev.len() != alpha_dev.len() {
            return Err(KyleError::Dimension {
                what: "alpha_dev",
                expected: beta_dev.len(),
                got: alpha_dev.len(),
            });
        }
        for &b in &beta_dev {
            finite("beta_dev", b)?;
        }
        for &a in &alpha_dev {
            finite("alpha_dev", a)?;
        }
        Ok(LinearStrategy {
            beta_dev,
            alpha_dev,
        })
    }

    /// The equilibrium strategy of `solution`.
    pub fn equilibrium(solution: &EquilibriumSolution) -> Self {
        let interior = &solution.stages[..solution.stages.len() - 1];
        LinearStrategy {
            beta_dev: interior.iter().map(|s| s.beta()).collect(),
            alpha_dev: interior.iter().map(|s| s.alpha()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.beta_dev.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta_dev.is_empty()
    }

    /// `(beta', alpha')` at date `n` in `1..=len()`.
    pub fn at(&self, n: usize) -> (f64, f64) {
        (self.beta_dev[n - 1], self.alpha_dev[n - 1])
    }

    pub fn beta_dev(&self) -> &[f64] {
        &self.beta_dev
    }

    pub fn alpha_dev(&self) -> &[f64] {
        &self.alpha_dev
    }

    /// Copy with `(d_beta, d_alpha)` added at date `n`.
    pub fn perturbed(&self, n: usize, d_beta: f64, d_alpha: f64) -> Self {
        let mut out = self.clone();
        out.beta_dev[n - 1] += d_beta;
        out.alpha_dev[n - 1] += d_alpha;
        out
    }

    pub fn with_beta(&self, n: usize, beta: f64) -> Self {
        let mut out = self.clone();
        out.beta_dev[n - 1] = beta;
        out
    }

    pub fn with_alpha(&self, n: usize, alpha: f64) -> Self {
        let mut out = self.clone();
        out.alpha_dev[n - 1] = alpha;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_parameters_accepted() {
        let p = ModelParams::new(5, 3.0, 1.0, 1.0 / 5f64.sqrt(), 1.0 / 3.0).unwrap();
        assert_eq!(p, ModelParams::reference(5).unwrap());
    }

    #[test]
    fn rejects_zero_dates() {
        let err = ModelParams::new(0, 3.0, 1.0, 1.0, 0.5).unwrap_err();
        assert!(matches!(err, KyleError::InvalidParameter { name: "n", .. }));
    }

    #[test]
    fn rejects_rho_out_of_range() {
        for rho in [0.0, -0.2, 1.0 + 1e-12, f64::NAN] {
            let err = ModelParams::new(3, 3.0, 1.0, 1.0, rho).unwrap_err();
            assert!(matches!(err, KyleError::InvalidParameter { name: "rho", .. }));
        }
        assert!(ModelParams::new(3, 3.0, 1.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn rejects_non_positive_scales() {
        assert!(ModelParams::new(3, 0.0, 1.0, 1.0, 0.5).is_err());
        assert!(ModelParams::new(3, 1.0, -1.0, 1.0, 0.5).is_err());
        assert!(ModelParams::new(3, 1.0, 1.0, f64::INFINITY, 0.5).is_err());
    }

    #[test]
    fn beta_is_derived_from_xi() {
        let s = StageCoefficients::interior(2, 0.75, 0.1, 0.2, 0.4).unwrap();
        assert_eq!(s.beta(), 0.75 / 1.75);
        assert!(StageCoefficients::interior(2, f64::NAN, 0.1, 0.2, 0.4).is_err());
        assert!(StageCoefficients::interior(2, 0.0, 0.1, 0.2, 0.4).is_err());
    }

    #[test]
    fn terminal_stage_is_forced() {
        let s = StageCoefficients::terminal(4, 0.3).unwrap();
        assert_eq!((s.beta(), s.alpha(), s.r()), (1.0, 1.0, 0.0));
        assert!(s.is_terminal());
    }

    #[test]
    fn strategy_lengths_must_agree() {
        assert!(LinearStrategy::new(vec![0.1, 0.2], vec![0.3]).is_err());
        assert!(LinearStrategy::new(vec![0.1], vec![f64::INFINITY]).is_err());
    }
}
