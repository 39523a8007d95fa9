//! Penalized Hamiltonian `H(y) = sup_p { y p - psi_eps(p^2 - a^2) }` and the
//! feedback control rate it induces.
//!
//! The objective is concave (a convex non-decreasing penalty composed with
//! the convex map `p -> p^2 - a^2`, subtracted from a linear term), so for
//! `y > 0` the supremum sits at the unique `p* >= a` solving
//! `y = 2 p psi'(p^2 - a^2)`; `y < 0` follows by symmetry and `y = 0` gives
//! `(0, 0)` with the tie among maximizers in `[-a, a]` broken at zero to
//! keep the feedback continuous.

use crate::approx::SmoothPenalty;
use crate::{Error, Result};

/// Inputs of one Hamiltonian evaluation: slope argument `y`, local control
/// cost `a > 0`, penalty parameter `eps`.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianQuery {
    pub y: f64,
    pub a: f64,
    pub eps: f64,
}

/// Value and maximizer of the penalized Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianValue {
    pub value: f64,
    pub maximizer: f64,
}

/// Evaluate `H(y) = sup_p { y p - psi_eps(|p|^2 - a^2) }` together with its
/// argmax, by a bracketed monotone root-find on the stationarity condition.
pub fn hamiltonian_eval(query: HamiltonianQuery) -> Result<HamiltonianValue> {
    let HamiltonianQuery { y, a, eps } = query;
    if !a.is_finite() || a <= 0.0 {
        return Err(Error::Parameter(format!("cost a = {a} must be positive")));
    }
    let penalty = SmoothPenalty::new(eps)?;
    if y == 0.0 {
        return Ok(HamiltonianValue {
            value: 0.0,
            maximizer: 0.0,
        });
    }
    let ya = y.abs();
    // g(p) = 2 p psi'(p^2 - a^2) is zero at p = a and non-decreasing beyond;
    // once p^2 - a^2 >= 2 eps it equals 2 p / eps, so a bracket always
    // exists after finitely many doublings.
    let g = |p: f64| 2.0 * p * penalty.prime(p * p - a * a);
    let mut hi = a + eps * ya / 2.0 + 2.0 * a;
    let mut iters = 0;
    while g(hi) < ya {
        hi *= 2.0;
        iters += 1;
        if iters > 200 {
            return Err(Error::Numerical(format!(
                "maximizer bracket did not close after 200 doublings: y = {y}, a = {a}, eps = {eps}, hi = {hi}, g(hi) = {}",
                g(hi)
            )));
        }
    }
    let mut lo = a;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-14 * (1.0 + mid) {
            break;
        }
        if g(mid) < ya {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = 0.5 * (lo + hi) * y.signum();
    let value = y * p - penalty.eval(p * p - a * a);
    // The supremum never falls below the exact penalty-free candidate
    // p = sign(y) a; use it when bisection roundoff leaves a gap.
    let floor = ya * a;
    if value < floor {
        return Ok(HamiltonianValue {
            value: floor,
            maximizer: a * y.signum(),
        });
    }
    Ok(HamiltonianValue {
        value,
        maximizer: p,
    })
}

/// Feedback control rate `-2 psi'(dudx^2 - a^2) dudx` associated with the
/// Hamiltonian's maximizer; zero whenever the slope respects the cost.
pub fn feedback_drift(dudx: f64, a: f64, eps: f64) -> f64 {
    let penalty = SmoothPenalty { eps };
    -2.0 * penalty.prime(dudx * dudx - a * a) * dudx
}
