//! Approximation layer between a raw game model and the penalized PDE:
//! smooth gradient penalty, spatial cut-offs, terminal boundary ramp,
//! payoff truncation, coefficient mollification, the state-dependent
//! control cost and the compatibility-fixed boundary payoff.
//!
//! All objects are immutable after assembly; evaluation is pure and
//! thread-safe.

use crate::model::{first_positive_root, ConstantsLedger, GameModel, Provenance};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Quintic smoothstep `s^3 (10 - 15 s + 6 s^2)` and its first two
/// derivatives, clamped to [0, 1] outside the transition.
fn smoothstep(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if s >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let v = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
        let d = 30.0 * s * s * (1.0 - s) * (1.0 - s);
        let dd = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s);
        (v, d, dd)
    }
}

/// Parameters selecting one penalized approximation of the game.
///
/// `n = 0` and `kappa = 0` mean "identity": no payoff truncation and no
/// coefficient mollification. Those are only valid for models with bounded
/// data and non-degenerate diffusion (regime A1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PenalizationParams {
    /// Payoff truncation level (0 = no truncation).
    pub n: u32,
    /// Coefficient mollification parameter in [0, 1); 0 = no mollification.
    pub kappa: f64,
    /// Gradient-penalty parameter in (0, 1).
    pub eps: f64,
    /// Obstacle-penalty parameter in (0, 1).
    pub delta: f64,
    /// Domain size in state units; must exceed the mollified stopping
    /// threshold.
    pub m: f64,
}

impl PenalizationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.kappa) {
            return Err(Error::Parameter(format!(
                "kappa = {} must lie in [0, 1)",
                self.kappa
            )));
        }
        for (name, v) in [("eps", self.eps), ("delta", self.delta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Parameter(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if self.m <= 1.0 {
            return Err(Error::Parameter(format!("m = {} must exceed 1", self.m)));
        }
        Ok(())
    }
}

/// Smooth one-sided penalty: zero on `(-inf, 0]`, affine `(y - eps)/eps` on
/// `[2 eps, inf)`, and on `[0, 2 eps]` the unique low-order polynomial bridge
/// matching value/slope/curvature (0, 0, 0) at 0 and (1, 1/eps, 0) at 2 eps,
/// namely `2 s^3 - s^4` with `s = y / (2 eps)`. Convex, non-decreasing, C2.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SmoothPenalty {
    pub eps: f64,
}

impl SmoothPenalty {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Parameter(format!("eps = {eps} must lie in (0, 1)")));
        }
        Ok(SmoothPenalty { eps })
    }

    pub fn eval(&self, y: f64) -> f64 {
        if y <= 0.0 {
            0.0
        } else if y >= 2.0 * self.eps {
            (y - self.eps) / self.eps
        } else {
            let s = y / (2.0 * self.eps);
            s * s * s * (2.0 - s)
        }
    }

    pub fn prime(&self, y: f64) -> f64 {
        if y <= 0.0 {
            0.0
        } else if y >= 2.0 * self.eps {
            1.0 / self.eps
        } else {
            let s = y / (2.0 * self.eps);
            // d/dy [2 s^3 - s^4] = (6 s^2 - 4 s^3) / (2 eps)
            s * s * (3.0 - 2.0 * s) / self.eps
        }
    }

    pub fn second(&self, y: f64) -> f64 {
        if y <= 0.0 || y >= 2.0 * self.eps {
            0.0
        } else {
            let s = y / (2.0 * self.eps);
            // d2/dy2 = (12 s - 12 s^2) / (4 eps^2)
            3.0 * s * (1.0 - s) / (self.eps * self.eps)
        }
    }
}

/// Smooth cut-off: 1 on `[0, level]`, 0 on `[level + 1, inf)`, with the
/// transition `1 - smoothstep` on `[level, level + 1]`. The triple root of
/// the complement at the right end gives `|d/dx|^2 <= C0 * value` with a
/// finite `C0` independent of `level`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CutoffProfile {
    pub level: f64,
}

impl CutoffProfile {
    pub fn new(level: f64) -> Self {
        CutoffProfile { level }
    }

    /// `(value, first derivative, second derivative)` at `x >= 0`.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let s = x - self.level;
        if s <= 0.0 {
            (1.0, 0.0, 0.0)
        } else if s >= 1.0 {
            (0.0, 0.0, 0.0)
        } else {
            let (v, d, dd) = smoothstep(s);
            (1.0 - v, -d, -dd)
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).0
    }

    /// Fitted `C0`: max over the transition of `max(xi'^2 / xi, |xi''|)`.
    pub fn fitted_c0(&self) -> f64 {
        let mut c0: f64 = 0.0;
        for i in 0..=4000 {
            let x = self.level + i as f64 / 4000.0;
            let (v, d, dd) = self.eval(x);
            if v > 0.0 {
                c0 = c0.max(d * d / v);
            }
            c0 = c0.max(dd.abs());
        }
        c0
    }
}

/// Non-decreasing lower-boundary ramp: zero until `T - 1/m`, then a quintic
/// rise (zero slope and curvature at both ends) to `theta_bar_nk` at `T`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundaryCurve {
    pub m: f64,
    pub horizon: f64,
    pub theta_bar_nk: f64,
}

impl BoundaryCurve {
    pub fn value(&self, t: f64) -> f64 {
        let ramp_start = self.horizon - 1.0 / self.m;
        if t <= ramp_start {
            0.0
        } else {
            let s = (t - ramp_start) * self.m;
            self.theta_bar_nk * smoothstep(s).0
        }
    }

    pub fn slope(&self, t: f64) -> f64 {
        let ramp_start = self.horizon - 1.0 / self.m;
        if t <= ramp_start {
            0.0
        } else {
            let s = (t - ramp_start) * self.m;
            self.theta_bar_nk * smoothstep(s).1 * self.m
        }
    }
}

/// Smooth clamp at `level`: identity below `level - 1`, constant `level`
/// beyond `level + 1`, with a C2 monotone bridge whose slope is
/// `1 - smoothstep` — so the clamp never exceeds its argument and keeps
/// slopes in [0, 1].
#[derive(Debug, Clone, Copy)]
struct SmoothClamp {
    level: f64,
}

impl SmoothClamp {
    /// `(value, dvalue/dv, d2value/dv2)`.
    fn eval(&self, v: f64) -> (f64, f64, f64) {
        let a = self.level - 1.0;
        if v <= a {
            (v, 1.0, 0.0)
        } else if v >= self.level + 1.0 {
            (self.level, 0.0, 0.0)
        } else {
            // Slope 1 - S(s) with s = (v - a)/2; the antiderivative of the
            // quintic smoothstep is 2.5 s^4 - 3 s^5 + s^6.
            let s = (v - a) / 2.0;
            let (sv, sd, _) = smoothstep(s);
            let anti = 2.5 * s.powi(4) - 3.0 * s.powi(5) + s.powi(6);
            (a + 2.0 * (s - anti), 1.0 - sv, -sd / 2.0)
        }
    }
}

/// Bounded payoffs `g^N`, `h^N` obtained by smooth value-clamping at level
/// `N`, together with the adjusted control cost and the recorded Lipschitz
/// constant.
#[derive(Clone)]
pub struct TruncatedPayoffs {
    pub n: u32,
    model: GameModel,
    clamp: Option<SmoothClamp>,
    /// `alpha_bar^N = alpha_bar + 1/(2N)`, decreasing to `alpha_bar`.
    pub alpha_bar_n: f64,
    /// Fitted Lipschitz constant of `h^N` (also bounds the Lipschitz
    /// constant of the squared control-cost field).
    pub l_n: f64,
}

impl std::fmt::Debug for TruncatedPayoffs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TruncatedPayoffs")
            .field("n", &self.n)
            .field("alpha_bar_n", &self.alpha_bar_n)
            .field("l_n", &self.l_n)
            .finish()
    }
}

impl TruncatedPayoffs {
    pub fn g(&self, t: f64, x: f64) -> f64 {
        match &self.clamp {
            None => (self.model.g)(t, x),
            Some(c) => c.eval((self.model.g)(t, x)).0,
        }
    }

    pub fn h(&self, t: f64, x: f64) -> f64 {
        match &self.clamp {
            None => (self.model.h)(t, x),
            Some(c) => c.eval((self.model.h)(t, x)).0,
        }
    }

    pub fn dg_dt(&self, t: f64, x: f64) -> Result<f64> {
        let raw = self
            .model
            .dg_dt
            .as_ref()
            .ok_or_else(|| Error::Config("missing dg_dt callback".into()))?(t, x);
        Ok(match &self.clamp {
            None => raw,
            Some(c) => c.eval((self.model.g)(t, x)).1 * raw,
        })
    }

    pub fn dg_dx(&self, t: f64, x: f64) -> Result<f64> {
        let raw = self
            .model
            .dg_dx
            .as_ref()
            .ok_or_else(|| Error::Config("missing dg_dx callback".into()))?(t, x);
        Ok(match &self.clamp {
            None => raw,
            Some(c) => c.eval((self.model.g)(t, x)).1 * raw,
        })
    }

    pub fn d2g_dxx(&self, t: f64, x: f64) -> Result<f64> {
        let gx = self
            .model
            .dg_dx
            .as_ref()
            .ok_or_else(|| Error::Config("missing dg_dx callback".into()))?(t, x);
        let gxx =
            self.model
                .d2g_dxx
                .as_ref()
                .ok_or_else(|| Error::Config("missing d2g_dxx callback".into()))?(t, x);
        Ok(match &self.clamp {
            None => gxx,
            Some(c) => {
                let (_, slope, curv) = c.eval((self.model.g)(t, x));
                curv * gx * gx + slope * gxx
            }
        })
    }
}

/// Truncate the payoffs at level `N`. `n = 0` disables truncation.
///
/// Precondition for `n > 0`: the terminal strip `{T} x [0, theta_bar + 1]`
/// must lie inside the identity regions of both payoffs, i.e. `N` large
/// enough that `g, h <= N - 1` there.
pub fn truncate_payoffs(model: &GameModel, n: u32) -> Result<TruncatedPayoffs> {
    if n == 0 {
        return Ok(TruncatedPayoffs {
            n,
            model: model.clone(),
            clamp: None,
            alpha_bar_n: model.alpha_bar,
            l_n: fitted_l_n(model, f64::INFINITY),
        });
    }
    let level = n as f64;
    // Identity must hold on the terminal strip up to theta_bar + 1.
    let strip_hi = match model.theta_bar() {
        Ok(tb) => tb + 1.0,
        Err(_) => 1.0,
    };
    let mut max_payoff: f64 = 0.0;
    for i in 0..=200 {
        let x = strip_hi * i as f64 / 200.0;
        max_payoff = max_payoff
            .max((model.g)(model.horizon, x))
            .max((model.h)(model.horizon, x));
    }
    if max_payoff > level - 1.0 {
        return Err(Error::Parameter(format!(
            "truncation level N = {n} too small: payoffs reach {max_payoff:.3} on the terminal strip"
        )));
    }
    Ok(TruncatedPayoffs {
        n,
        model: model.clone(),
        clamp: Some(SmoothClamp { level }),
        alpha_bar_n: model.alpha_bar + 0.5 / level,
        l_n: fitted_l_n(model, level),
    })
}

fn fitted_l_n(model: &GameModel, level: f64) -> f64 {
    // Lipschitz constant of h^N over a scan box; the clamp has slope <= 1 so
    // scanning the raw h over the region where it is below the cap suffices.
    let mut l: f64 = 0.0;
    let x_hi = 2.0 * level.clamp(10.0, 50.0);
    let n = 200;
    for i in 0..=n {
        let t = model.horizon * i as f64 / n as f64;
        for j in 1..=n {
            let x0 = x_hi * (j - 1) as f64 / n as f64;
            let x1 = x_hi * j as f64 / n as f64;
            let h0 = (model.h)(t, x0).min(level);
            let h1 = (model.h)(t, x1).min(level);
            l = l.max((h1 - h0).abs() / (x1 - x0));
        }
    }
    l
}

/// Mollified coefficients: `mu` clamped to `[-1/kappa, 1/kappa]`,
/// `sigma + kappa` capped at `1/kappa`, both frozen beyond `x = 1/kappa`.
/// `kappa = 0` leaves the coefficients untouched.
#[derive(Clone)]
pub struct MollifiedCoefficients {
    pub kappa: f64,
    model: GameModel,
}

impl std::fmt::Debug for MollifiedCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MollifiedCoefficients")
            .field("kappa", &self.kappa)
            .finish()
    }
}

impl MollifiedCoefficients {
    pub fn mu(&self, x: f64) -> f64 {
        if self.kappa == 0.0 {
            return (self.model.mu)(x);
        }
        let cap = 1.0 / self.kappa;
        let x_eff = x.min(cap);
        (self.model.mu)(x_eff).clamp(-cap, cap)
    }

    pub fn sigma(&self, x: f64) -> f64 {
        if self.kappa == 0.0 {
            return (self.model.sigma)(x);
        }
        let cap = 1.0 / self.kappa;
        let x_eff = x.min(cap);
        ((self.model.sigma)(x_eff) + self.kappa).min(cap)
    }
}

pub fn mollify_coefficients(model: &GameModel, kappa: f64) -> Result<MollifiedCoefficients> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::Parameter(format!(
            "kappa = {kappa} must lie in [0, 1)"
        )));
    }
    if kappa == 0.0 {
        // Identity mollification is only usable when sigma is separated from
        // zero near the origin; the PDE would degenerate otherwise.
        if (model.sigma)(0.0) <= 0.0 {
            return Err(Error::Parameter(
                "kappa = 0 requires sigma bounded away from zero (regime A1)".into(),
            ));
        }
    }
    Ok(MollifiedCoefficients {
        kappa,
        model: model.clone(),
    })
}

/// State-dependent control cost
/// `sqrt((alpha^N)^2 + N^2 xi'^2 + 2 g^N xi xi' dg^N/dx)`, evaluated with the
/// supplied cut-off profile. Equals `alpha^N` wherever the profile is flat
/// and dominates `|d/dx (xi g^N)|` pointwise.
pub fn alpha_field(
    truncated: &TruncatedPayoffs,
    profile: &CutoffProfile,
    t: f64,
    x: f64,
) -> Result<f64> {
    let (xi, xi_d, _) = profile.eval(x);
    if xi_d == 0.0 {
        return Ok(truncated.alpha_bar_n);
    }
    let level = if truncated.n == 0 {
        // Without truncation the payoff bound used in the quadratic term is
        // the payoff itself; cap by its local value.
        truncated.g(t, x).max(1.0)
    } else {
        truncated.n as f64
    };
    let g = truncated.g(t, x);
    let gx = truncated.dg_dx(t, x)?;
    let radicand = truncated.alpha_bar_n * truncated.alpha_bar_n
        + level * level * xi_d * xi_d
        + 2.0 * g * xi * xi_d * gx;
    if radicand < -1e-12 {
        return Err(Error::InternalConsistency(format!(
            "control-cost radicand {radicand:.3e} < 0 at (t, x) = ({t}, {x})"
        )));
    }
    Ok(radicand.max(0.0).sqrt())
}

/// One-sided second differences of the penalty at a knot (`0` or `2 eps`),
/// evaluated branch-by-branch so that no O(1) cancellation pollutes the
/// estimate. Returns `(left, right)`; their gap measures the jump of the
/// second derivative across the knot.
pub fn knot_second_difference_jump(p: &SmoothPenalty, knot: f64) -> (f64, f64) {
    let eps = p.eps;
    // The one-sided estimate carries an O(h / eps^3) error from the third
    // derivative; this step keeps it well under the 1e-6 budget.
    let h = 1e-8 * eps * eps * eps;
    if knot == 0.0 {
        // Left branch is identically zero; right-sided difference uses the
        // bridge polynomial at tiny arguments (exact small values).
        let bridge = |y: f64| {
            let s = y / (2.0 * eps);
            s * s * s * (2.0 - s)
        };
        let right = (bridge(2.0 * h) - 2.0 * bridge(h) + bridge(0.0)) / (h * h);
        (0.0, right)
    } else {
        // Right branch is affine, so its second difference vanishes; on the
        // left subtract the affine continuation analytically:
        // psi(y) - (y - eps)/eps = u^3 (2 - u) with u = 1 - y/(2 eps),
        // computed from the gap to the knot so no digits cancel.
        let phi = |gap: f64| {
            let u = gap / (2.0 * eps);
            u * u * u * (2.0 - u)
        };
        let left = (phi(0.0) - 2.0 * phi(h) + phi(2.0 * h)) / (h * h);
        (left, 0.0)
    }
}

/// Upper bound for the state-dependent cost:
/// `Lambda_N = sqrt((alpha^N)^2 + N^2 C0 + 2 N sqrt(C0) alpha^N)`.
pub fn lambda_n(truncated: &TruncatedPayoffs, c0: f64) -> f64 {
    let a = truncated.alpha_bar_n;
    let level = truncated.n.max(1) as f64;
    (a * a + level * level * c0 + 2.0 * level * c0.sqrt() * a).sqrt()
}

/// Everything the penalized PDE needs, assembled once per parameter point.
#[derive(Clone)]
pub struct ApproxBundle {
    pub model: GameModel,
    pub params: PenalizationParams,
    pub penalty: SmoothPenalty,
    /// Cut-off applied to the payoffs and (with the same index) to the
    /// control cost; flat on `[0, m - 1]`, zero from `m`.
    pub payoff_cutoff: CutoffProfile,
    pub boundary: BoundaryCurve,
    pub truncated: TruncatedPayoffs,
    pub coeffs: MollifiedCoefficients,
    /// Root of the mollified-truncated stopping benefit at the horizon.
    pub theta_bar_nk: f64,
    /// Compatibility replacement payoff for the boundary diagnostics, when
    /// one is needed.
    pub boundary_payoff_fix: Option<CompatiblePayoff>,
    pub ledger: ConstantsLedger,
}

impl std::fmt::Debug for ApproxBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ApproxBundle")
            .field("params", &self.params)
            .field("theta_bar_nk", &self.theta_bar_nk)
            .finish()
    }
}

impl ApproxBundle {
    /// Assemble the full approximation stack for one parameter point.
    pub fn assemble(model: &GameModel, params: PenalizationParams) -> Result<ApproxBundle> {
        params.validate()?;
        let penalty = SmoothPenalty::new(params.eps)?;
        let truncated = truncate_payoffs(model, params.n)?;
        let coeffs = mollify_coefficients(model, params.kappa)?;
        let payoff_cutoff = CutoffProfile::new(params.m - 1.0);

        let mut ledger = ConstantsLedger::new();
        let c0 = payoff_cutoff.fitted_c0();
        ledger.record("C0", c0, Provenance::Fitted);
        ledger.record("L_N", truncated.l_n, Provenance::Fitted);
        ledger.record("Lambda_N", lambda_n(&truncated, c0), Provenance::Fitted);

        // Partial bundle to evaluate theta and locate its terminal root.
        let mut bundle = ApproxBundle {
            model: model.clone(),
            params,
            penalty,
            payoff_cutoff,
            boundary: BoundaryCurve {
                m: params.m,
                horizon: model.horizon,
                theta_bar_nk: 0.0,
            },
            truncated,
            coeffs,
            theta_bar_nk: 0.0,
            boundary_payoff_fix: None,
            ledger,
        };

        let theta_bar_nk = bundle.theta_bar_nk_root()?;
        let theta_bar = model.theta_bar()?;
        if theta_bar_nk >= theta_bar + 1.0 {
            return Err(Error::AssumptionViolation(format!(
                "mollified stopping threshold {theta_bar_nk:.4} escaped (0, theta_bar + 1) = (0, {:.4}); kappa = {} is above the admissible range for this model",
                theta_bar + 1.0,
                params.kappa
            )));
        }
        if theta_bar_nk >= params.m {
            return Err(Error::Parameter(format!(
                "domain size m = {} must exceed the mollified stopping threshold {theta_bar_nk:.4}",
                params.m
            )));
        }
        bundle.theta_bar_nk = theta_bar_nk;
        bundle.boundary.theta_bar_nk = theta_bar_nk;

        // Sup of |theta^N_{k,m}| and of its negative part (the constant that
        // caps the obstacle-penalty term), plus payoff/coefficient growth
        // constants, recorded for the ledger.
        let mut c_theta: f64 = 0.0;
        let mut k2: f64 = 0.0;
        let nscan = 201;
        for i in 0..nscan {
            let t = model.horizon * i as f64 / (nscan - 1) as f64;
            for j in 0..nscan {
                let x = params.m * j as f64 / (nscan - 1) as f64;
                let th = bundle.theta_nkm(t, x)?;
                c_theta = c_theta.max(th.abs());
                k2 = k2.max(-th);
            }
        }
        bundle.ledger.record("C_Theta", c_theta, Provenance::Fitted);
        bundle.ledger.record("K2", k2.max(0.0), Provenance::Fitted);
        let mut k1: f64 = 0.0;
        let mut d1: f64 = 0.0;
        let x_hi = 2.0 * params.m.max(theta_bar + 1.0);
        for i in 0..nscan {
            let t = model.horizon * i as f64 / (nscan - 1) as f64;
            for j in 0..nscan {
                let x = x_hi * j as f64 / (nscan - 1) as f64;
                k1 = k1
                    .max((model.g)(t, x) / (1.0 + x))
                    .max((model.h)(t, x) / (1.0 + x * x));
                if i == 0 {
                    d1 = d1.max(((model.mu)(x).abs() + (model.sigma)(x)) / (1.0 + x));
                }
            }
        }
        bundle.ledger.record("K1", k1, Provenance::Fitted);
        bundle.ledger.record("D1", d1, Provenance::Fitted);

        bundle.boundary_payoff_fix = compatibility_fix(&bundle)?;
        Ok(bundle)
    }

    /// Localized payoff `g^N_m = xi_{m-1} g^N`.
    pub fn g_nm(&self, t: f64, x: f64) -> f64 {
        self.payoff_cutoff.value(x) * self.truncated.g(t, x)
    }

    /// Localized payoff `h^N_m = xi_{m-1} h^N`.
    pub fn h_nm(&self, t: f64, x: f64) -> f64 {
        self.payoff_cutoff.value(x) * self.truncated.h(t, x)
    }

    pub fn dg_nm_dx(&self, t: f64, x: f64) -> Result<f64> {
        let (xi, xi_d, _) = self.payoff_cutoff.eval(x);
        Ok(xi_d * self.truncated.g(t, x) + xi * self.truncated.dg_dx(t, x)?)
    }

    pub fn d2g_nm_dxx(&self, t: f64, x: f64) -> Result<f64> {
        let (xi, xi_d, xi_dd) = self.payoff_cutoff.eval(x);
        Ok(xi_dd * self.truncated.g(t, x)
            + 2.0 * xi_d * self.truncated.dg_dx(t, x)?
            + xi * self.truncated.d2g_dxx(t, x)?)
    }

    pub fn dg_nm_dt(&self, t: f64, x: f64) -> Result<f64> {
        Ok(self.payoff_cutoff.value(x) * self.truncated.dg_dt(t, x)?)
    }

    /// State-dependent control cost with the bundle's own cut-off.
    pub fn alpha(&self, t: f64, x: f64) -> Result<f64> {
        alpha_field(&self.truncated, &self.payoff_cutoff, t, x)
    }

    /// Stopping benefit of the approximated game:
    /// `theta^N_{k,m} = h^N_m + dg^N_m/dt + L_kappa g^N_m - r g^N_m`.
    pub fn theta_nkm(&self, t: f64, x: f64) -> Result<f64> {
        let s = self.coeffs.sigma(x);
        Ok(self.h_nm(t, x)
            + self.dg_nm_dt(t, x)?
            + 0.5 * s * s * self.d2g_nm_dxx(t, x)?
            + self.coeffs.mu(x) * self.dg_nm_dx(t, x)?
            - self.model.r * self.g_nm(t, x))
    }

    /// Same benefit but with the compatibility-fixed payoff in place of
    /// `g^N_m`, used by the boundary gradient diagnostics.
    pub fn theta_nkm_fixed(&self, t: f64, x: f64) -> Result<f64> {
        match &self.boundary_payoff_fix {
            None => self.theta_nkm(t, x),
            Some(fix) => {
                let s = self.coeffs.sigma(x);
                Ok(self.h_nm(t, x)
                    + fix.dg_dt(t, x)
                    + 0.5 * s * s * fix.d2g_dxx(x)
                    + self.coeffs.mu(x) * fix.dg_dx(x)
                    - self.model.r * fix.g(t, x))
            }
        }
    }

    /// Spatial slope of the boundary-diagnostic payoff (the fixed payoff
    /// when installed, `g^N_m` otherwise).
    pub fn dg_fixed_dx(&self, t: f64, x: f64) -> Result<f64> {
        match &self.boundary_payoff_fix {
            None => self.dg_nm_dx(t, x),
            Some(fix) => Ok(fix.dg_dx(x)),
        }
    }

    /// Smallest root of `x -> theta^N_{k,m}(T, x)`.
    fn theta_bar_nk_root(&self) -> Result<f64> {
        let t = self.model.horizon;
        let x_hi = self.params.m;
        if self.theta_nkm(t, 0.0)? >= 0.0 {
            return Err(Error::AssumptionViolation(format!(
                "mollified stopping benefit at (T, 0) is {:.6} >= 0",
                self.theta_nkm(t, 0.0)?
            )));
        }
        first_positive_root(&|x| self.theta_nkm(t, x), x_hi, 4001).ok_or_else(|| {
            Error::AssumptionViolation(
                "mollified stopping benefit has no terminal sign change".into(),
            )
        })
    }

    pub fn theta_bar_nk(&self) -> f64 {
        self.theta_bar_nk
    }
}

/// Boundary payoff `f(t) phi(x) xi_{m-1}(x)` restoring the parabolic
/// compatibility condition at the terminal corners: it matches `g^N_m` on
/// the lateral boundaries, has zero slope at both terminal corners, and
/// keeps the terminal operator inequality non-negative there.
#[derive(Clone, Debug)]
pub struct CompatiblePayoff {
    /// Center of the parabola `phi(x) = (x - center)^2 + offset`.
    pub center: f64,
    pub offset: f64,
    pub cutoff: CutoffProfile,
    /// Samples of `t -> f(t)` are recomputed on the fly from the stored
    /// boundary data.
    f_values: FCurve,
}

#[derive(Clone)]
struct FCurve {
    boundary: BoundaryCurve,
    g_nm_on_boundary: std::sync::Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for FCurve {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FCurve").finish()
    }
}

impl CompatiblePayoff {
    fn phi(&self, x: f64) -> f64 {
        let d = x - self.center;
        d * d + self.offset
    }

    fn phi_d(&self, x: f64) -> f64 {
        2.0 * (x - self.center)
    }

    /// `f(t) = g^N_m(t, zeta(t)) / (phi(zeta(t)) xi(zeta(t)))`.
    pub fn f(&self, t: f64) -> f64 {
        let z = self.f_values.boundary.value(t);
        let denom = self.phi(z) * self.cutoff.value(z);
        (self.f_values.g_nm_on_boundary)(t, z) / denom
    }

    fn f_dot(&self, t: f64) -> f64 {
        let dt = 1e-6;
        let horizon = self.f_values.boundary.horizon;
        let (lo, hi) = ((t - dt).max(0.0), (t + dt).min(horizon));
        (self.f(hi) - self.f(lo)) / (hi - lo)
    }

    pub fn g(&self, t: f64, x: f64) -> f64 {
        self.f(t) * self.phi(x) * self.cutoff.value(x)
    }

    pub fn dg_dt(&self, t: f64, x: f64) -> f64 {
        self.f_dot(t) * self.phi(x) * self.cutoff.value(x)
    }

    pub fn dg_dx_at(&self, t: f64, x: f64) -> f64 {
        let (xi, xi_d, _) = self.cutoff.eval(x);
        self.f(t) * (self.phi_d(x) * xi + self.phi(x) * xi_d)
    }

    /// Spatial slope with the time factor frozen at the terminal value,
    /// matching how the diagnostic uses it.
    pub fn dg_dx(&self, x: f64) -> f64 {
        self.dg_dx_at(self.f_values.boundary.horizon, x)
    }

    pub fn d2g_dxx(&self, x: f64) -> f64 {
        let t = self.f_values.boundary.horizon;
        let (xi, xi_d, xi_dd) = self.cutoff.eval(x);
        self.f(t) * (2.0 * xi + 2.0 * self.phi_d(x) * xi_d + self.phi(x) * xi_dd)
    }
}

/// Construct the compatibility-fixed payoff, or `None` when the slope of
/// `g^N_m` already vanishes at the terminal corner. Errors when the corner
/// value vanishes with a non-zero slope (impossible for a non-negative
/// payoff).
pub fn compatibility_fix(bundle: &ApproxBundle) -> Result<Option<CompatiblePayoff>> {
    let t_end = bundle.model.horizon;
    let tb = bundle.theta_bar_nk;
    let corner_slope = bundle.dg_nm_dx(t_end, tb)?;
    if corner_slope.abs() <= 1e-14 {
        return Ok(None);
    }
    let corner_value = bundle.g_nm(t_end, tb);
    if corner_value <= 0.0 {
        return Err(Error::InternalConsistency(format!(
            "payoff vanishes at the terminal corner x = {tb:.4} while its slope is {corner_slope:.3e}; a non-negative payoff cannot do both"
        )));
    }

    // Terminal operator applied to g^N_m at the corner, minus the boundary
    // slope term; its sign selects the parabola offset.
    let s = bundle.coeffs.sigma(tb);
    let lg = 0.5 * s * s * bundle.d2g_nm_dxx(t_end, tb)? + bundle.coeffs.mu(tb) * corner_slope;
    let zeta_dot = BoundaryCurve {
        m: bundle.params.m,
        horizon: t_end,
        theta_bar_nk: tb,
    }
    .slope(t_end);
    let rhs = lg - corner_slope * zeta_dot;
    let offset = if rhs <= 0.0 {
        1.0
    } else {
        s * s * corner_value / rhs
    };

    let trunc = bundle.truncated.clone();
    let cutoff = bundle.payoff_cutoff;
    let g_on_boundary: std::sync::Arc<dyn Fn(f64, f64) -> f64 + Send + Sync> =
        std::sync::Arc::new(move |t, x| cutoff.value(x) * trunc.g(t, x));

    Ok(Some(CompatiblePayoff {
        center: tb,
        offset,
        cutoff,
        f_values: FCurve {
            boundary: bundle.boundary,
            g_nm_on_boundary: g_on_boundary,
        },
    }))
}
