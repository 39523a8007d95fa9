//! Game instances: coefficients, payoffs, discounting, control cost, and the
//! validation of the standing assumptions they must satisfy.
//!
//! A [`GameModel`] is immutable after construction and all operations on it
//! are pure, so it can be shared freely across threads.

use crate::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

pub type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Relative step used by the central finite-difference fallback for payoff
/// derivatives.
pub const FD_STEP: f64 = 1e-5;

/// One instance of the stopper vs. singular-controller game.
///
/// `mu` and `sigma` drive the diffusion, `g` is the stopping/terminal payoff,
/// `h` the running payoff, `r` the discount rate, `alpha_bar` the
/// proportional control cost and `T` the horizon. Derivatives of `g` and `h`
/// are supplied as callbacks; [`GameModelBuilder::finite_difference_derivatives`]
/// installs central-difference fallbacks with step `FD_STEP * (1 + |x|)`.
#[derive(Clone)]
pub struct GameModel {
    pub name: String,
    pub mu: Fn1,
    pub sigma: Fn1,
    pub r: f64,
    pub alpha_bar: f64,
    pub horizon: f64,
    pub g: Fn2,
    pub h: Fn2,
    pub dg_dt: Option<Fn2>,
    pub dg_dx: Option<Fn2>,
    pub d2g_dxx: Option<Fn2>,
    pub dh_dx: Option<Fn2>,
    /// Holder exponent of `sigma` in (1/2, 1]; 1 means Lipschitz.
    pub holder_gamma: f64,
}

impl fmt::Debug for GameModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameModel")
            .field("name", &self.name)
            .field("r", &self.r)
            .field("alpha_bar", &self.alpha_bar)
            .field("horizon", &self.horizon)
            .field("holder_gamma", &self.holder_gamma)
            .finish()
    }
}

pub struct GameModelBuilder {
    model: GameModel,
}

impl GameModelBuilder {
    pub fn new(name: &str) -> Self {
        GameModelBuilder {
            model: GameModel {
                name: name.to_string(),
                mu: Arc::new(|_| 0.0),
                sigma: Arc::new(|_| 0.0),
                r: 0.0,
                alpha_bar: 1.0,
                horizon: 1.0,
                g: Arc::new(|_, _| 0.0),
                h: Arc::new(|_, _| 0.0),
                dg_dt: None,
                dg_dx: None,
                d2g_dxx: None,
                dh_dx: None,
                holder_gamma: 1.0,
            },
        }
    }

    pub fn mu(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.model.mu = Arc::new(f);
        self
    }

    pub fn sigma(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.model.sigma = Arc::new(f);
        self
    }

    pub fn discount(mut self, r: f64) -> Self {
        self.model.r = r;
        self
    }

    pub fn control_cost(mut self, alpha_bar: f64) -> Self {
        self.model.alpha_bar = alpha_bar;
        self
    }

    pub fn horizon(mut self, t: f64) -> Self {
        self.model.horizon = t;
        self
    }

    pub fn stopping_payoff(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.model.g = Arc::new(f);
        self
    }

    pub fn running_payoff(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.model.h = Arc::new(f);
        self
    }

    pub fn dg_dt(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.model.dg_dt = Some(Arc::new(f));
        self
    }

    pub fn dg_dx(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.model.dg_dx = Some(Arc::new(f));
        self
    }

    pub fn d2g_dxx(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.model.d2g_dxx = Some(Arc::new(f));
        self
    }

    pub fn dh_dx(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.model.dh_dx = Some(Arc::new(f));
        self
    }

    pub fn holder_gamma(mut self, gamma: f64) -> Self {
        self.model.holder_gamma = gamma;
        self
    }

    /// Install central finite-difference derivative callbacks for `g` and `h`
    /// (step `FD_STEP * (1 + |x|)` in space, `FD_STEP` in time, one-sided at
    /// the domain edges).
    pub fn finite_difference_derivatives(mut self) -> Self {
        let horizon = self.model.horizon;
        let g = self.model.g.clone();
        let h = self.model.h.clone();

        let g1 = g.clone();
        self.model.dg_dt = Some(Arc::new(move |t, x| {
            let dt = FD_STEP;
            let (lo, hi) = ((t - dt).max(0.0), (t + dt).min(horizon));
            (g1(hi, x) - g1(lo, x)) / (hi - lo)
        }));
        let g2 = g.clone();
        self.model.dg_dx = Some(Arc::new(move |t, x| fd_dx(&*g2, t, x)));
        let g3 = g.clone();
        self.model.d2g_dxx = Some(Arc::new(move |t, x| fd_dxx(&*g3, t, x)));
        self.model.dh_dx = Some(Arc::new(move |t, x| fd_dx(&*h, t, x)));
        self
    }

    pub fn build(self) -> Result<GameModel> {
        let m = self.model;
        if m.horizon <= 0.0 {
            return Err(Error::Parameter("horizon must be positive".into()));
        }
        if m.alpha_bar <= 0.0 {
            return Err(Error::Parameter("control cost must be positive".into()));
        }
        if m.r < 0.0 {
            return Err(Error::Parameter("discount rate must be >= 0".into()));
        }
        if !(m.holder_gamma > 0.5 && m.holder_gamma <= 1.0) {
            return Err(Error::Parameter("holder_gamma must lie in (1/2, 1]".into()));
        }
        Ok(m)
    }
}

fn fd_dx(f: &dyn Fn(f64, f64) -> f64, t: f64, x: f64) -> f64 {
    let dx = FD_STEP * (1.0 + x.abs());
    let lo = (x - dx).max(0.0);
    let hi = x + dx;
    (f(t, hi) - f(t, lo)) / (hi - lo)
}

fn fd_dxx(f: &dyn Fn(f64, f64) -> f64, t: f64, x: f64) -> f64 {
    let dx = FD_STEP * (1.0 + x.abs());
    let x0 = if x < dx { dx } else { x };
    (f(t, x0 + dx) - 2.0 * f(t, x0) + f(t, x0 - dx)) / (dx * dx)
}

impl GameModel {
    pub fn builder(name: &str) -> GameModelBuilder {
        GameModelBuilder::new(name)
    }

    /// Built-in reference models by name.
    pub fn builtin(name: &str) -> Result<GameModel> {
        match name {
            "gbm-quad" => Ok(gbm_quad()),
            "convertible-bond" => Ok(convertible_bond()),
            other => Err(Error::Config(format!(
                "unknown built-in model `{other}` (available: gbm-quad, convertible-bond)"
            ))),
        }
    }

    fn deriv<'a>(&self, which: &'a Option<Fn2>, name: &str) -> Result<&'a Fn2> {
        which.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "model `{}` is missing the {name} derivative callback",
                self.name
            ))
        })
    }

    /// Net running benefit of postponing the stop:
    /// `theta = h + dg/dt + (sigma^2/2) d2g/dxx + mu dg/dx - r g`.
    ///
    /// A negative value means immediate stopping beats waiting locally.
    pub fn theta(&self, t: f64, x: f64) -> Result<f64> {
        let dg_dt = self.deriv(&self.dg_dt, "dg_dt")?;
        let dg_dx = self.deriv(&self.dg_dx, "dg_dx")?;
        let d2g_dxx = self.deriv(&self.d2g_dxx, "d2g_dxx")?;
        let s = (self.sigma)(x);
        Ok(
            (self.h)(t, x) + dg_dt(t, x) + 0.5 * s * s * d2g_dxx(t, x) + (self.mu)(x) * dg_dx(t, x)
                - self.r * (self.g)(t, x),
        )
    }

    /// Smallest positive root of `x -> theta(T, x)`.
    ///
    /// Requires `theta(T, 0) < 0` and `theta(T, x) > 0` on the top decade of
    /// the scan grid; errors otherwise.
    pub fn theta_bar(&self) -> Result<f64> {
        let x_max = self.scan_x_max();
        let t = self.horizon;
        let f = |x: f64| self.theta(t, x);
        if f(0.0)? >= 0.0 {
            return Err(Error::AssumptionViolation(format!(
                "theta(T, 0) = {:.6} must be negative (model `{}`)",
                f(0.0)?,
                self.name
            )));
        }
        // Top-decade positivity is checked by validate_assumptions; here we
        // only need a bracket.
        first_positive_root(&|x| f(x), x_max, 4001).ok_or_else(|| {
            Error::AssumptionViolation(format!(
                "theta(T, .) has no sign change on (0, {x_max:.3}] (model `{}`)",
                self.name
            ))
        })
    }

    /// Default scan half-width: 4 * theta_bar when a root exists, else 10.
    fn scan_x_max(&self) -> f64 {
        let t = self.horizon;
        if let Ok(th0) = self.theta(t, 0.0) {
            if th0 < 0.0 {
                if let Some(root) = first_positive_root(&|x| self.theta(t, x), 10.0, 4001) {
                    return (4.0 * root).max(2.0);
                }
            }
        }
        10.0
    }
}

/// Bracket the first sign change of `f` on `(0, x_max]` over `n` scan points,
/// then refine by bisection to tolerance `1e-10 * (1 + x)`.
pub fn first_positive_root(f: &dyn Fn(f64) -> Result<f64>, x_max: f64, n: usize) -> Option<f64> {
    let mut prev_x = 0.0;
    let mut prev_v = f(0.0).ok()?;
    for i in 1..n {
        let x = x_max * i as f64 / (n - 1) as f64;
        let v = f(x).ok()?;
        if prev_v < 0.0 && v >= 0.0 {
            // refine on [prev_x, x]
            let (mut lo, mut hi) = (prev_x, x);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if hi - lo <= 1e-10 * (1.0 + mid) {
                    break;
                }
                let fm = f(mid).ok()?;
                if fm < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev_x = x;
        prev_v = v;
    }
    None
}

/// Regime declaration for the main theorem's two alternative hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    /// Bounded coefficients (`|mu| <= 1/k`, `k <= sigma <= 1/k`) and bounded
    /// smooth payoffs.
    A1,
    /// `x -> g(t, x)` and `x -> h(t, x)` non-decreasing.
    A2,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegimeFlags {
    pub regime: Regime,
    /// Whether `sigma` is Lipschitz; required for the optimal stopping rule
    /// under A2.
    pub sigma_lipschitz: bool,
}

/// Provenance of a named constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Provenance {
    /// Fixed a priori from model data.
    Declared,
    /// Estimated by a grid scan or a solve.
    Fitted,
    /// Recorded as a running diagnostic, not asserted.
    Monitored,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConstantEntry {
    pub value: f64,
    pub provenance: Provenance,
}

/// Home for every named constant used by bound checks (growth constants,
/// penalty bounds, cut-off constants, gradient bounds).
#[derive(Debug, Clone, Default, Serialize)]
pub struct ConstantsLedger {
    entries: BTreeMap<String, ConstantEntry>,
}

impl ConstantsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, name: &str, value: f64, provenance: Provenance) {
        self.entries
            .insert(name.to_string(), ConstantEntry { value, provenance });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.get(name).map(|e| e.value)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &ConstantEntry)> {
        self.entries.iter()
    }

    pub fn merge(&mut self, other: &ConstantsLedger) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), *v);
        }
    }
}

/// Outcome of one assumption check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Report produced by [`validate_assumptions`]; failures are carried, not
/// raised.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub checks: Vec<CheckResult>,
    pub ledger: ConstantsLedger,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Grid used for the assumption checks; "holds on the grid" is the testable
/// surrogate for "holds everywhere".
#[derive(Debug, Clone, Copy)]
pub struct ScanGrid {
    pub nt: usize,
    pub nx: usize,
    pub x_max: f64,
}

impl Default for ScanGrid {
    fn default() -> Self {
        ScanGrid {
            nt: 401,
            nx: 401,
            x_max: 0.0, // 0 = auto: 4 * theta_bar or 10
        }
    }
}

/// Check the standing assumptions on a sample grid and fit the growth
/// constants into a [`ConstantsLedger`]. Pure: identical inputs give
/// identical reports.
pub fn validate_assumptions(
    model: &GameModel,
    flags: RegimeFlags,
    grid: ScanGrid,
) -> AssumptionReport {
    let mut checks = Vec::new();
    let mut ledger = ConstantsLedger::new();
    let x_max = if grid.x_max > 0.0 {
        grid.x_max
    } else {
        model.scan_x_max()
    };
    let ts: Vec<f64> = (0..grid.nt)
        .map(|i| model.horizon * i as f64 / (grid.nt - 1) as f64)
        .collect();
    let xs: Vec<f64> = (0..grid.nx)
        .map(|j| x_max * j as f64 / (grid.nx - 1) as f64)
        .collect();

    // --- coefficients: positivity of sigma and linear growth (fit D1).
    let mut sigma_pos = true;
    let mut d1: f64 = 0.0;
    let mut sigma_lip: f64 = 0.0;
    let mut d_gamma: f64 = 0.0;
    for (j, &x) in xs.iter().enumerate() {
        let s = (model.sigma)(x);
        if x > 0.0 && s <= 0.0 {
            sigma_pos = false;
        }
        d1 = d1.max(((model.mu)(x).abs() + s) / (1.0 + x));
        if j > 0 {
            let xp = xs[j - 1];
            let ds = (s - (model.sigma)(xp)).abs();
            sigma_lip = sigma_lip.max(ds / (x - xp));
            d_gamma = d_gamma.max(ds / (x - xp).powf(model.holder_gamma));
        }
    }
    // Lipschitz constant of mu on the grid, folded into D1 as in the growth
    // condition.
    for j in 1..xs.len() {
        let dm = ((model.mu)(xs[j]) - (model.mu)(xs[j - 1])).abs() / (xs[j] - xs[j - 1]);
        d1 = d1.max(dm);
    }
    ledger.record("D1", d1, Provenance::Fitted);
    ledger.record("D_gamma", d_gamma, Provenance::Fitted);
    checks.push(CheckResult {
        name: "coefficients: sigma > 0 on (0, x_max]".into(),
        passed: sigma_pos,
        detail: format!("linear-growth constant D1 = {d1:.6}"),
    });

    // --- payoff non-negativity and growth (fit K1).
    let mut g_nonneg = true;
    let mut h_nonneg = true;
    let mut k1: f64 = 0.0;
    for &t in &ts {
        for &x in &xs {
            let gv = (model.g)(t, x);
            let hv = (model.h)(t, x);
            if gv < 0.0 {
                g_nonneg = false;
            }
            if hv < 0.0 {
                h_nonneg = false;
            }
            k1 = k1.max(gv / (1.0 + x)).max(hv / (1.0 + x * x));
        }
    }
    ledger.record("K1", k1, Provenance::Fitted);
    checks.push(CheckResult {
        name: "payoffs: 0 <= g <= K1(1+x), 0 <= h <= K1(1+x^2)".into(),
        passed: g_nonneg && h_nonneg,
        detail: format!("fitted K1 = {k1:.6}"),
    });

    // --- one-sided time Lipschitz bound (fit K0).
    let mut k0: f64 = 0.0;
    for &x in &xs {
        for i in 1..ts.len() {
            let dt = ts[i] - ts[i - 1];
            k0 = k0.max(((model.g)(ts[i], x) - (model.g)(ts[i - 1], x)) / dt);
            k0 = k0.max(((model.h)(ts[i], x) - (model.h)(ts[i - 1], x)) / dt);
        }
    }
    let k0 = k0.max(0.0);
    ledger.record("K0", k0, Provenance::Fitted);
    checks.push(CheckResult {
        name: "payoffs: g(t,x)-g(s,x) <= K0 (t-s), same for h".into(),
        passed: k0.is_finite(),
        detail: format!("fitted K0 = {k0:.6}"),
    });

    // --- gradient bound |dg/dx| <= alpha_bar, cross-checked against the
    // finite-difference fallback when a callback is installed.
    let mut grad_ok = true;
    let mut worst_grad: f64 = 0.0;
    let mut fd_mismatch: f64 = 0.0;
    for &t in &ts {
        for &x in &xs {
            let fd = fd_dx(&*model.g, t, x);
            let gx = match &model.dg_dx {
                Some(cb) => {
                    let v = cb(t, x);
                    fd_mismatch = fd_mismatch.max((v - fd).abs() / (1.0 + v.abs()));
                    v
                }
                None => fd,
            };
            worst_grad = worst_grad.max(gx.abs());
            if gx.abs() > model.alpha_bar * (1.0 + 1e-9) {
                grad_ok = false;
            }
        }
    }
    checks.push(CheckResult {
        name: "payoffs: |dg/dx| <= alpha_bar".into(),
        passed: grad_ok,
        detail: format!(
            "max |dg/dx| = {worst_grad:.6} vs alpha_bar = {}; callback/FD mismatch {fd_mismatch:.2e}",
            model.alpha_bar
        ),
    });

    // --- theta lower bound (fit K2 = sup (-theta)^+).
    let theta_ok = model.dg_dt.is_some() && model.dg_dx.is_some() && model.d2g_dxx.is_some();
    let mut k2: f64 = 0.0;
    let mut theta0 = f64::NAN;
    let mut top_decade_positive = true;
    if theta_ok {
        for &t in &ts {
            for &x in &xs {
                let th = model.theta(t, x).unwrap_or(f64::NAN);
                k2 = k2.max(-th);
            }
        }
        k2 = k2.max(0.0);
        theta0 = model.theta(model.horizon, 0.0).unwrap_or(f64::NAN);
        for &x in xs.iter().filter(|&&x| x >= 0.9 * x_max) {
            if model.theta(model.horizon, x).unwrap_or(-1.0) <= 0.0 {
                top_decade_positive = false;
            }
        }
    }
    ledger.record("K2", k2, Provenance::Fitted);
    checks.push(CheckResult {
        name: "theta >= -K2 on the grid".into(),
        passed: theta_ok,
        detail: format!("fitted K2 = {k2:.6}"),
    });
    checks.push(CheckResult {
        name: "theta(T,0) < 0 and theta(T,x) > 0 on the top decade".into(),
        passed: theta_ok && theta0 < 0.0 && top_decade_positive,
        detail: format!("theta(T,0) = {theta0:.6}, top decade positive: {top_decade_positive}"),
    });

    // --- regime-specific conditions.
    match flags.regime {
        Regime::A1 => {
            let mut mu_bound: f64 = 0.0;
            let mut sigma_min = f64::INFINITY;
            let mut sigma_max: f64 = 0.0;
            let mut payoff_max: f64 = 0.0;
            for &x in &xs {
                mu_bound = mu_bound.max((model.mu)(x).abs());
                sigma_min = sigma_min.min((model.sigma)(x));
                sigma_max = sigma_max.max((model.sigma)(x));
            }
            for &t in &ts {
                for &x in &xs {
                    payoff_max = payoff_max.max((model.g)(t, x)).max((model.h)(t, x));
                }
            }
            // A kappa > 0 with |mu| <= 1/kappa and kappa <= sigma <= 1/kappa
            // exists iff sigma is separated from zero; boundedness on the
            // grid stands in for boundedness everywhere.
            let passed = sigma_min > 0.0 && mu_bound.is_finite() && payoff_max.is_finite();
            checks.push(CheckResult {
                name: "A1: bounded mu, sigma within [kappa, 1/kappa], bounded payoffs".into(),
                passed,
                detail: format!(
                    "max|mu| = {mu_bound:.4}, sigma in [{sigma_min:.4}, {sigma_max:.4}], max payoff = {payoff_max:.4}"
                ),
            });
        }
        Regime::A2 => {
            let mut monotone = true;
            let mut worst: f64 = 0.0;
            for &t in &ts {
                for j in 1..xs.len() {
                    let dg = (model.g)(t, xs[j]) - (model.g)(t, xs[j - 1]);
                    let dh = (model.h)(t, xs[j]) - (model.h)(t, xs[j - 1]);
                    worst = worst.min(dg).min(dh);
                    if dg < -1e-12 || dh < -1e-12 {
                        monotone = false;
                    }
                }
            }
            checks.push(CheckResult {
                name: "A2: x -> g(t,x) and x -> h(t,x) non-decreasing".into(),
                passed: monotone,
                detail: format!("worst finite difference = {worst:.3e}"),
            });
        }
    }

    if flags.sigma_lipschitz {
        ledger.record("sigma_lipschitz", sigma_lip, Provenance::Fitted);
        checks.push(CheckResult {
            name: "sigma Lipschitz (declared)".into(),
            passed: sigma_lip.is_finite(),
            detail: format!("fitted Lipschitz constant = {sigma_lip:.6}"),
        });
    }

    AssumptionReport { checks, ledger }
}

/// GBM dynamics with an affine stopping payoff and a quadratic running
/// payoff: `mu = 0.02 x`, `sigma = 0.2 x`, `r = 0.05`, `g = 1 + 0.5 x`,
/// `h = 0.1 x^2`, `alpha_bar = 1`, `T = 1`. Satisfies regime A2.
pub fn gbm_quad() -> GameModel {
    GameModel::builder("gbm-quad")
        .mu(|x| 0.02 * x)
        .sigma(|x| 0.2 * x)
        .discount(0.05)
        .control_cost(1.0)
        .horizon(1.0)
        .stopping_payoff(|_, x| 1.0 + 0.5 * x)
        .running_payoff(|_, x| 0.1 * x * x)
        .dg_dt(|_, _| 0.0)
        .dg_dx(|_, _| 0.5)
        .d2g_dxx(|_, _| 0.0)
        .dh_dx(|_, x| 0.2 * x)
        .holder_gamma(1.0)
        .build()
        .expect("builtin model is valid")
}

/// Callable convertible bond with gradual recall: GBM firm value, conversion
/// payoff `g = gamma x`, coupon stream `h = c`, proportional recall cost
/// `alpha_bar = k`. Has `theta(T, 0) = c > 0`, so it sits outside the main
/// theorem's hypotheses; validation flags it rather than rejecting it.
pub fn convertible_bond() -> GameModel {
    let gamma_frac = 0.5;
    let coupon = 0.02;
    GameModel::builder("convertible-bond")
        .mu(|x| 0.01 * x)
        .sigma(|x| 0.25 * x)
        .discount(0.03)
        .control_cost(0.5)
        .horizon(1.0)
        .stopping_payoff(move |_, x| gamma_frac * x)
        .running_payoff(move |_, _| coupon)
        .dg_dt(|_, _| 0.0)
        .dg_dx(move |_, _| gamma_frac)
        .d2g_dxx(|_, _| 0.0)
        .dh_dx(|_, _| 0.0)
        .holder_gamma(1.0)
        .build()
        .expect("builtin model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {b} within {tol}, got {a} (diff {})",
            (a - b).abs()
        );
    }

    #[test]
    fn theta_hand_values_on_gbm_quad() {
        let m = gbm_quad();
        // h(T,0) + mu(0) * 0.5 - r * g(T,0) = 0 + 0 - 0.05
        assert_close(m.theta(1.0, 0.0).unwrap(), -0.05, 1e-14);
        // 0.1 + 0.02*0.5 - 0.05*1.5
        assert_close(m.theta(1.0, 1.0).unwrap(), 0.035, 1e-14);
    }

    #[test]
    fn theta_zero_for_zero_payoffs() {
        let m = GameModel::builder("zero")
            .mu(|x| 0.02 * x)
            .sigma(|x| 0.2 * x)
            .discount(0.05)
            .control_cost(1.0)
            .horizon(1.0)
            .stopping_payoff(|_, _| 0.0)
            .running_payoff(|_, _| 0.0)
            .finite_difference_derivatives()
            .build()
            .unwrap();
        for &(t, x) in &[(0.0, 0.0), (0.5, 1.3), (1.0, 7.7)] {
            assert_close(m.theta(t, x).unwrap(), 0.0, 1e-12);
        }
    }

    #[test]
    fn theta_requires_derivative_callbacks() {
        let m = GameModel::builder("noderivs")
            .sigma(|_| 1.0)
            .stopping_payoff(|_, x| x)
            .build()
            .unwrap();
        match m.theta(0.0, 1.0) {
            Err(Error::Config(_)) => {}
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    // Independent oracle for the gbm-quad root: plain bisection on the
    // quadratic 0.1 x^2 - 0.015 x - 0.05 written out by hand.
    fn quad_root_oracle() -> f64 {
        let f = |x: f64| 0.1 * x * x - 0.015 * x - 0.05;
        let (mut lo, mut hi) = (0.0, 10.0);
        assert!(f(lo) < 0.0 && f(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn theta_bar_matches_bisection_oracle() {
        let m = gbm_quad();
        let root = m.theta_bar().unwrap();
        let oracle = quad_root_oracle();
        assert_close(root, oracle, 1e-8);
        // Post-conditions: |theta(T, root)| small, theta negative below.
        assert!(m.theta(1.0, root).unwrap().abs() <= 1e-8);
        for i in 1..50 {
            let x = root * i as f64 / 50.0;
            assert!(
                m.theta(1.0, x).unwrap() < 0.0,
                "theta must be < 0 below the root"
            );
        }
    }

    #[test]
    fn root_finder_linear_synthetic() {
        let f = |x: f64| -> crate::Result<f64> { Ok(x - 1.0) };
        let r = first_positive_root(&f, 5.0, 101).unwrap();
        assert_close(r, 1.0, 1e-9);
    }

    #[test]
    fn theta_bar_errors_without_sign_change() {
        // theta(T, .) >= 0 everywhere: convertible bond has theta(T,0) = c > 0.
        let m = convertible_bond();
        assert!(matches!(m.theta_bar(), Err(Error::AssumptionViolation(_))));
    }

    #[test]
    fn validate_gbm_quad_passes_a2() {
        let m = gbm_quad();
        let rep = validate_assumptions(
            &m,
            RegimeFlags {
                regime: Regime::A2,
                sigma_lipschitz: true,
            },
            ScanGrid::default(),
        );
        assert!(rep.all_passed(), "failures: {:?}", rep.failures());
        // K2 must dominate sup (-theta)^+ = 0.05 + 0.015^2/(4*0.1) at the
        // vertex x = 0.075.
        let k2 = rep.ledger.get("K2").unwrap();
        assert!(k2 >= 0.05);
        assert!(k2 <= 0.06);
    }

    #[test]
    fn validate_convertible_bond_flags_sign_condition() {
        let m = convertible_bond();
        let rep = validate_assumptions(
            &m,
            RegimeFlags {
                regime: Regime::A2,
                sigma_lipschitz: true,
            },
            ScanGrid::default(),
        );
        assert!(!rep.all_passed());
        let failed: Vec<_> = rep.failures();
        assert!(
            failed.iter().any(|c| c.name.contains("theta(T,0) < 0")),
            "expected the terminal sign condition to fail, got {failed:?}"
        );
    }

    #[test]
    fn validate_flags_gradient_violation() {
        // dg/dx = 2 * alpha_bar somewhere.
        let m = GameModel::builder("steep")
            .mu(|_| 0.0)
            .sigma(|_| 1.0)
            .control_cost(1.0)
            .horizon(1.0)
            .stopping_payoff(|_, x| 2.0 * x)
            .running_payoff(|_, _| 0.0)
            .finite_difference_derivatives()
            .build()
            .unwrap();
        let rep = validate_assumptions(
            &m,
            RegimeFlags {
                regime: Regime::A2,
                sigma_lipschitz: true,
            },
            ScanGrid {
                nt: 41,
                nx: 41,
                x_max: 5.0,
            },
        );
        assert!(rep
            .failures()
            .iter()
            .any(|c| c.name.contains("|dg/dx| <= alpha_bar")));
    }

    #[test]
    fn validate_is_pure() {
        let m = gbm_quad();
        let flags = RegimeFlags {
            regime: Regime::A2,
            sigma_lipschitz: true,
        };
        let a = validate_assumptions(&m, flags, ScanGrid::default());
        let b = validate_assumptions(&m, flags, ScanGrid::default());
        assert_eq!(
            serde_json::to_string(&a.checks).unwrap(),
            serde_json::to_string(&b.checks).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&a.ledger).unwrap(),
            serde_json::to_string(&b.ledger).unwrap()
        );
    }

    #[test]
    fn fd_fallback_matches_exact_callbacks() {
        let with_cb = gbm_quad();
        let without = GameModel::builder("fd")
            .mu(|x| 0.02 * x)
            .sigma(|x| 0.2 * x)
            .discount(0.05)
            .control_cost(1.0)
            .horizon(1.0)
            .stopping_payoff(|_, x| 1.0 + 0.5 * x)
            .running_payoff(|_, x| 0.1 * x * x)
            .finite_difference_derivatives()
            .build()
            .unwrap();
        for &(t, x) in &[(0.0, 0.3), (0.5, 1.0), (1.0, 3.4)] {
            let a = with_cb.theta(t, x).unwrap();
            let b = without.theta(t, x).unwrap();
            assert_close(b, a, 1e-6 * (1.0 + a.abs()));
        }
    }
}
