//! Backward construction of the equilibrium coefficients from candidate
//! terminal moments `(Sigma_{N-1}^(1), Sigma_{N-1}^(2)) = (a, b)`.
//!
//! Each interior date solves a cubic in `xi_n = beta_n / (1 - beta_n)` on the
//! bracket `(0, sqrt(sigma_w^2 / Sigma_n^(1)))`, then steps the moments and the
//! value-function coefficients back one date. The map `(a, b) -> (Sigma_0^(1),
//! Sigma_0^(2))` is what the shooting module inverts.

use log::trace;

use crate::error::{KyleError, Result};
use crate::model::{ModelParams, MomentPair, StageCoefficients, Tolerances, ValueCoefficients};

/// Everything known at date `n` before solving for `xi_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageState {
    pub n: usize,
    pub moment: MomentPair,
    pub value: ValueCoefficients,
    pub sigma_w2: f64,
    /// `xi_{n+1}`, absent when `n = N - 1`.
    pub next_xi: Option<f64>,
}

impl StageState {
    /// `Sigma_n^(1) / sigma_w^2`.
    pub fn s1(&self) -> f64 {
        self.moment.sigma1 / self.sigma_w2
    }

    /// `Sigma_n^(2) / sigma_w^2`.
    pub fn s2(&self) -> f64 {
        self.moment.sigma2 / self.sigma_w2
    }

    /// Upper end of the root bracket, `sqrt(sigma_w^2 / Sigma_n^(1))`.
    pub fn xi_upper(&self) -> f64 {
        (self.sigma_w2 / self.moment.sigma1).sqrt()
    }

    /// `Sigma_n^(2)/sigma_w^2 - (Sigma_n^(1)/sigma_w^2) J_n`, the coefficient of
    /// `xi (1 + xi)` in the stage cubic.
    pub fn quadratic_group(&self) -> f64 {
        self.s2() - self.s1() * self.value.j
    }

    /// Closed form of [`Self::quadratic_group`] in terms of `xi_{n+1}`; at the
    /// last interior date this is the `xi_{n+1} -> infinity` limit.
    pub fn quadratic_group_closed_form(&self) -> f64 {
        let (s1, s2, w2) = (self.moment.sigma1, self.moment.sigma2, self.sigma_w2);
        match self.next_xi {
            Some(x) => (1.0 + x) * s2 / ((s1 + w2) * x + w2),
            None => s2 / (s1 + w2),
        }
    }

    /// Stage cubic in factored form.
    pub fn f(&self, xi: f64) -> f64 {
        let s1 = self.s1();
        let ValueCoefficients { i, j, .. } = self.value;
        2.0 * (i + s1 * (i - j) * xi) * (s1 * xi * xi - 1.0) + xi * (1.0 + xi) * self.quadratic_group()
    }

    fn check(&self) -> Result<()> {
        let v = self.value;
        let ok = self.moment.sigma1 > 0.0
            && self.moment.sigma2 > 0.0
            && v.i > 0.0
            && v.j >= v.i
            && self.sigma_w2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(KyleError::Domain {
                date: self.n,
                reason: format!(
                    "stage state outside the admissible set: sigma = ({:e}, {:e}), I = {:e}, J = {:e}",
                    self.moment.sigma1, self.moment.sigma2, v.i, v.j
                ),
            })
        }
    }
}

/// Output of [`terminal_stage`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalStage {
    pub lambda: f64,
    /// Value coefficients at date `N - 1`.
    pub value: ValueCoefficients,
    /// Coefficients of date `N`.
    pub stage: StageCoefficients,
}

/// Forced final trade: `lambda_N = b / (a + sigma_w^2)`, `I = J = lambda_N`, `K = 0`.
pub fn terminal_stage(a: f64, b: f64, params: &ModelParams) -> Result<TerminalStage> {
    let date = params.n;
    if !(a > 0.0 && a.is_finite()) || !(b > 0.0 && b.is_finite()) {
        return Err(KyleError::Domain {
            date,
            reason: format!("terminal moments must be positive, got a = {a:e}, b = {b:e}"),
        });
    }
    let lambda = b / (a + params.noise_var());
    Ok(TerminalStage {
        lambda,
        value: ValueCoefficients::new(lambda, lambda, 0.0)?,
        stage: StageCoefficients::terminal(date, lambda)?,
    })
}

/// Coefficients `[c0, c1, c2, c3]` of the stage cubic `sum c_k xi^k`.
pub fn cubic_coefficients(state: &StageState) -> [f64; 4] {
    let s1 = state.s1();
    let ValueCoefficients { i, j, .. } = state.value;
    let g = state.quadratic_group();
    [
        -2.0 * i,
        g - 2.0 * s1 * (i - j),
        g + 2.0 * s1 * i,
        2.0 * s1 * s1 * (i - j),
    ]
}

fn cubic_derivative(c: &[f64; 4], x: f64) -> f64 {
    c[1] + x * (2.0 * c[2] + x * 3.0 * c[3])
}

/// Unique root of the stage cubic inside `(0, sqrt(sigma_w^2 / Sigma_n^(1)))`.
///
/// Bisection to a relative width of `1e-14`, then at most one Newton step that
/// is kept only if it stays inside the final bracket and lowers `|f|`.
pub fn solve_xi(state: &StageState, tol: &Tolerances) -> Result<f64> {
    state.check()?;
    let upper = state.xi_upper();
    let f_lo = state.f(0.0);
    let f_hi = state.f(upper);
    if !(f_lo < 0.0 && f_hi > 0.0) {
        return Err(KyleError::BracketViolation {
            date: state.n,
            f_lo,
            f_hi,
        });
    }

    let (mut lo, mut hi) = (0.0_f64, upper);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-14 * hi {
            break;
        }
        if state.f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut xi = 0.5 * (lo + hi);
    let mut resid = state.f(xi);

    let coeffs = cubic_coefficients(state);
    let slope = cubic_derivative(&coeffs, xi);
    if slope != 0.0 {
        let polished = xi - resid / slope;
        if polished > lo && polished < hi {
            let r = state.f(polished);
            if r.abs() < resid.abs() {
                xi = polished;
                resid = r;
            }
        }
    }

    let scale = state.value.i.abs().max(state.value.j.abs()).max(1.0);
    if resid.abs() > tol.root * scale {
        return Err(KyleError::Convergence(format!(
            "stage {} root residual {:e} exceeds {:e}",
            state.n,
            resid.abs(),
            tol.root * scale
        )));
    }
    Ok(xi)
}

/// `(Sigma_{n-1}^(1), Sigma_{n-1}^(2))` from `Sigma_n` and `xi_n`.
pub fn moment_map(moment: MomentPair, xi: f64, sigma_w2: f64) -> (f64, f64) {
    let gap = sigma_w2 - moment.sigma1 * xi * xi;
    let one_xi = 1.0 + xi;
    (
        sigma_w2 * moment.sigma1 * one_xi * one_xi / gap,
        sigma_w2 * moment.sigma2 * one_xi / gap,
    )
}

/// Result of stepping from date `n` back to `n - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBack {
    pub lambda: f64,
    pub r: f64,
    pub moment: MomentPair,
    pub value: ValueCoefficients,
}

/// Maps `(Sigma_n, I_n, J_n, K_n)` and `xi_n` to `(lambda_n, r_n)` and the
/// moments and value coefficients of date `n - 1`.
pub fn step_back(state: &StageState, xi: f64) -> Result<StepBack> {
    let date = state.n;
    let w2 = state.sigma_w2;
    let MomentPair { sigma1, sigma2 } = state.moment;
    let ValueCoefficients { i, j, k } = state.value;

    let gap = w2 - sigma1 * xi * xi;
    if !(gap >= 1e-14 * w2) {
        return Err(KyleError::Domain {
            date,
            reason: format!("sigma_w^2 - Sigma_n^(1) xi^2 = {gap:e} is not safely positive"),
        });
    }

    let lambda = sigma2 / w2 * xi;
    let r = sigma1 / w2 * xi;
    let one_xi = 1.0 + xi;
    let (prev1, prev2) = moment_map(state.moment, xi, w2);

    let denom = w2 * w2 * one_xi * one_xi;
    let coef_i = gap * (w2 + 2.0 * w2 * xi + sigma1 * xi * xi) / denom;
    let coef_j = sigma1 * (w2 + sigma1 * xi) * xi * xi * xi / denom;
    let i_prev = coef_i * i + coef_j * j;
    let j_prev = lambda / (1.0 + r);
    let k_prev = k + (i - j) * r * r * w2;

    let out = StepBack {
        lambda,
        r,
        moment: MomentPair::new(prev1, prev2)?,
        value: ValueCoefficients::new(i_prev, j_prev, k_prev)?,
    };
    if !(lambda > 0.0 && r > 0.0 && prev1 > 0.0 && prev2 > 0.0 && i_prev > 0.0 && j_prev >= i_prev) {
        return Err(KyleError::Domain {
            date,
            reason: format!(
                "step back left the admissible set: lambda = {lambda:e}, r = {r:e}, \
                 sigma = ({prev1:e}, {prev2:e}), I = {i_prev:e}, J = {j_prev:e}"
            ),
        });
    }
    Ok(out)
}

/// Second-order condition of the date-`n` trading problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocDiagnostic {
    /// `(1 + r_n)((1 + r_n) I_n - r_n J_n)`.
    pub value: f64,
    /// `(1 + r_n) I_n - r_n J_n`.
    pub inner: f64,
    /// The same inner quantity from the closed form in `xi_n`, `xi_{n+1}`.
    pub closed_form: f64,
    pub relative_gap: f64,
}

/// Fails only on non-positivity. Agreement of the two routes is reported in
/// `relative_gap`; it degrades when `Sigma_n^(1) >> sigma_w^2` because the
/// direct route cancels, so callers judge it against their own tolerance.
pub fn check_soc(state: &StageState, xi: f64, r: f64) -> Result<SocDiagnostic> {
    let ValueCoefficients { i, j, .. } = state.value;
    let inner = (1.0 + r) * i - r * j;
    let value = (1.0 + r) * inner;

    let (s1, w2) = (state.moment.sigma1, state.sigma_w2);
    let closed_form =
        w2 * xi * (1.0 + xi) * state.quadratic_group_closed_form() / (2.0 * (w2 - s1 * xi * xi));
    let relative_gap = rel_diff(inner, closed_form);

    if !(value > 0.0) {
        return Err(KyleError::SocViolation {
            date: state.n,
            value,
        });
    }
    Ok(SocDiagnostic {
        value,
        inner,
        closed_form,
        relative_gap,
    })
}

pub(crate) fn rel_diff(x: f64, y: f64) -> f64 {
    let scale = x.abs().max(y.abs());
    if scale == 0.0 {
        0.0
    } else {
        (x - y).abs() / scale
    }
}

/// One solved interior date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteriorStage {
    pub n: usize,
    pub xi: f64,
    pub lambda: f64,
    pub r: f64,
    pub soc: SocDiagnostic,
}

/// Full output of a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardRun {
    pub a: f64,
    pub b: f64,
    pub lambda_terminal: f64,
    /// Dates `1..=N-1` in ascending order.
    pub interior: Vec<InteriorStage>,
    /// Dates `0..=N-1`.
    pub moments: Vec<MomentPair>,
    /// Dates `0..=N-1`.
    pub values: Vec<ValueCoefficients>,
}

impl BackwardRun {
    /// `Phi(a, b) = Sigma_0^(1)`.
    pub fn phi(&self) -> f64 {
        self.moments[0].sigma1
    }

    /// `Psi(a, b) = Sigma_0^(2)`.
    pub fn psi(&self) -> f64 {
        self.moments[0].sigma2
    }
}

/// Runs the backward construction from `(a, b)` down to date 0. Requires `N >= 2`.
pub fn run_backward(a: f64, b: f64, params: &ModelParams, tol: &Tolerances) -> Result<BackwardRun> {
    let n_dates = params.n;
    if n_dates < 2 {
        return Err(KyleError::InvalidParameter {
            name: "n",
            reason: "the backward recursion needs N >= 2".into(),
        });
    }
    let w2 = params.noise_var();
    let terminal = terminal_stage(a, b, params)?;

    let mut moments = vec![MomentPair { sigma1: 0.0, sigma2: 0.0 }; n_dates];
    let mut values = vec![ValueCoefficients { i: 0.0, j: 0.0, k: 0.0 }; n_dates];
    let mut interior = Vec::with_capacity(n_dates - 1);
    moments[n_dates - 1] = MomentPair::new(a, b)?;
    values[n_dates - 1] = terminal.value;

    let mut next_xi = None;
    for n in (1..n_dates).rev() {
        let state = StageState {
            n,
            moment: moments[n],
            value: values[n],
            sigma_w2: w2,
            next_xi,
        };
        let xi = solve_xi(&state, tol)?;
        let step = step_back(&state, xi)?;
        let soc = check_soc(&state, xi, step.r)?;
        trace!("date {n}: xi = {xi:e}, lambda = {:e}, r = {:e}", step.lambda, step.r);
        moments[n - 1] = step.moment;
        values[n - 1] = step.value;
        interior.push(InteriorStage {
            n,
            xi,
            lambda: step.lambda,
            r: step.r,
            soc,
        });
        next_xi = Some(xi);
    }
    interior.reverse();

    Ok(BackwardRun {
        a,
        b,
        lambda_terminal: terminal.lambda,
        interior,
        moments,
        values,
    })
}
