use thiserror::Error;

pub type Result<T> = std::result::Result<T, KyleError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KyleError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("domain error at date {date}: {reason}")]
    Domain { date: usize, reason: String },

    #[error("root bracket violated at date {date}: f(0) = {f_lo:e}, f(upper) = {f_hi:e}")]
    BracketViolation { date: usize, f_lo: f64, f_hi: f64 },

    #[error("second-order condition violated at date {date}: {value:e}")]
    SocViolation { date: usize, value: f64 },

    #[error("identity `{name}` violated at date {date}: relative residual {residual:e}")]
    IdentityMismatch {
        name: &'static str,
        date: usize,
        residual: f64,
    },

    #[error("no sign change of Phi(a, 1) - sigma_a^2 after {doublings} doublings")]
    NoBracket { doublings: usize },

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("index {index} outside {lo}..={hi}")]
    Index { index: usize, lo: usize, hi: usize },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

impl KyleError {
    /// Errors caused by bad inputs rather than by a failed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            KyleError::InvalidParameter { .. } | KyleError::Index { .. } | KyleError::Dimension { .. }
        )
    }
}
