//! Numerical solver for a finite-horizon zero-sum game between a stopper and
//! a singular controller, on the state space `[0, T] x [0, inf)` with
//! absorption at zero.
//!
//! The stopper picks a stopping time and collects the payoff
//!
//! ```text
//! E[ e^{-r(tau ^ tau0)} g(t + tau ^ tau0, X)
//!    + int_0^{tau ^ tau0} e^{-rs} h(t+s, X_s) ds
//!    + int_[0, tau ^ tau0] e^{-rs} alpha_bar d|nu|_s ]
//! ```
//!
//! while the controller adds a bounded-variation process `nu` to the diffusion
//! `dX = mu(X) dt + sigma(X) dW + dnu` and pays proportionally to its total
//! variation. The game ends at the horizon, when the stopper stops, or when
//! `X` hits zero.
//!
//! The value function is computed by a penalization pipeline:
//!
//! 1. [`model`] describes a game instance and validates the standing
//!    assumptions (growth, payoff regularity, sign conditions on the
//!    stopping benefit).
//! 2. [`approx`] builds the smooth approximations: payoff truncation at
//!    level `N`, coefficient mollification at level `kappa`, spatial
//!    cut-offs at size `m`, the terminal boundary ramp, the smooth gradient
//!    penalty and the state-dependent control cost.
//! 3. [`hamiltonian`] evaluates the penalized Hamiltonian and the feedback
//!    control rate it induces.
//! 4. [`pde`] solves the penalized semilinear parabolic PDE (and the linear
//!    auxiliary problems used as gradient diagnostics) by implicit finite
//!    differences.
//! 5. [`continuation`] drives the nested limits over the penalty parameters,
//!    extracts stopping/inaction/action regions and verifies the variational
//!    inequality satisfied by the limit.
//! 6. [`game`] simulates the controlled SDE by Euler-Maruyama and checks the
//!    saddle-point inequalities by Monte Carlo.
//! 7. [`cli`] wires everything to config files and CSV/JSON artifacts.
//!
//! Most capabilities have a runnable example under `examples/`; see the
//! README for the artifact formats.

pub mod approx;
pub mod cli;
pub mod continuation;
pub mod expr;
pub mod game;
pub mod hamiltonian;
pub mod model;
pub mod pde;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// A model or solver was configured inconsistently (missing callback,
    /// bad mesh, invalid option value).
    #[error("configuration error: {0}")]
    Config(String),

    /// One of the standing assumptions failed on the validation grid.
    #[error("assumption violation: {0}")]
    AssumptionViolation(String),

    /// A parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An iterative numerical procedure failed to converge or produced
    /// non-finite values.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An internal identity that should hold by construction was violated.
    #[error("internal consistency error: {0}")]
    InternalConsistency(String),

    /// Operation applied outside its domain of validity (e.g. a monotone
    /// projection on a non-monotone model).
    #[error("domain error: {0}")]
    Domain(String),

    /// A limit schedule stopped making progress.
    #[error("non-convergence: {msg}; stage differences {history:?}")]
    NonConvergence { msg: String, history: Vec<f64> },

    /// Path simulation produced an invalid state.
    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
