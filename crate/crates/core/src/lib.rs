//! Linear equilibrium of the discrete-time Kyle model with a constrained
//! trader who must reach a random terminal position.
//!
//! The solver runs a backward recursion from candidate terminal moments and
//! matches the date-0 boundary with a one-dimensional shooting search. The
//! simulator replays the equilibrium forward, estimates moments by seeded
//! Monte Carlo, and evaluates exact expected costs of deviating strategies.

pub mod backward;
pub mod cli;
pub mod equilibrium;
pub mod error;
pub mod model;
pub mod shooting;
pub mod simulator;
pub mod sweep;
pub mod verify;

pub use equilibrium::{solve, Diagnostics};
pub use error::{KyleError, Result};
pub use model::{
    EquilibriumSolution, LinearStrategy, MarketPath, ModelParams, MomentPair, StageCoefficients,
    Tolerances, ValueCoefficients,
};
