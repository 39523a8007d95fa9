//! Drives the nested limits over the penalty parameters, extracts the
//! stopping/inaction/action regions and the free boundaries between them,
//! and verifies the variational inequality satisfied by the limit field.
//!
//! The schedule tightens the parameters in the order the limits are taken:
//! first the domain size and the obstacle penalty `(m, delta)`, then the
//! gradient penalty `eps`, then the coefficient mollification `kappa`
//! together with the payoff truncation `N`. Abstract subsequences are
//! replaced by concrete geometric schedules with monitored stage-to-stage
//! differences on a fixed compact.

use crate::approx::{ApproxBundle, PenalizationParams};
use crate::model::{ConstantsLedger, GameModel, Provenance};
use crate::pde::{solve_penalized_warm, stage_mesh, ScalarField, SolverOptions};
use crate::{Error, Result};
use serde::Serialize;

/// One stage of a limit schedule: a parameter point plus its mesh budget.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stage {
    pub params: PenalizationParams,
    pub nt: usize,
    pub nx: usize,
}

/// Rectangle on which stage-to-stage convergence is monitored.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonitorRect {
    pub t_lo: f64,
    pub t_hi: f64,
    pub x_lo: f64,
    pub x_hi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitSchedule {
    pub stages: Vec<Stage>,
    pub stage_tol: f64,
    pub monitor: MonitorRect,
}

impl LimitSchedule {
    /// Geometric default over `m in {8, 16}`, `delta in {1e-2, 1e-3}`,
    /// `eps in {1e-1, 3e-2, 1e-2}`, `kappa in {5e-2, 1e-2}`,
    /// `N in {100, 400}`: the domain/obstacle pair completes first (riding
    /// with the first gradient step), then the gradient penalty, then
    /// mollification and truncation — matching the order of the limits.
    pub fn default_for(model: &GameModel) -> LimitSchedule {
        let t = model.horizon;
        LimitSchedule {
            stages: vec![
                Stage {
                    params: PenalizationParams {
                        n: 100,
                        kappa: 5e-2,
                        eps: 1e-1,
                        delta: 1e-2,
                        m: 8.0,
                    },
                    nt: 400,
                    nx: 320,
                },
                Stage {
                    params: PenalizationParams {
                        n: 100,
                        kappa: 5e-2,
                        eps: 3e-2,
                        delta: 1e-3,
                        m: 16.0,
                    },
                    nt: 400,
                    nx: 640,
                },
                Stage {
                    params: PenalizationParams {
                        n: 100,
                        kappa: 5e-2,
                        eps: 1e-2,
                        delta: 1e-3,
                        m: 16.0,
                    },
                    nt: 400,
                    nx: 640,
                },
                Stage {
                    params: PenalizationParams {
                        n: 400,
                        kappa: 1e-2,
                        eps: 1e-2,
                        delta: 1e-3,
                        m: 16.0,
                    },
                    nt: 400,
                    nx: 640,
                },
            ],
            stage_tol: 5e-2,
            monitor: MonitorRect {
                t_lo: 0.0,
                t_hi: 0.9 * t,
                x_lo: 0.1,
                x_hi: 4.0,
            },
        }
    }

    /// Within a schedule the approximations may only tighten: `m` and `N`
    /// non-decreasing, `delta`, `eps`, `kappa` non-increasing.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Parameter("schedule needs at least one stage".into()));
        }
        if !self.stage_tol.is_finite() || self.stage_tol <= 0.0 {
            return Err(Error::Parameter("stage tolerance must be positive".into()));
        }
        for s in &self.stages {
            s.params.validate()?;
        }
        for w in self.stages.windows(2) {
            let (a, b) = (w[0].params, w[1].params);
            if b.m < a.m || b.n < a.n {
                return Err(Error::Parameter(
                    "m and N must be non-decreasing along the schedule".into(),
                ));
            }
            if b.delta > a.delta || b.eps > a.eps || b.kappa > a.kappa {
                return Err(Error::Parameter(
                    "delta, eps and kappa must be non-increasing along the schedule".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Node classification of the limit field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegionLabel {
    /// `v = g` up to the obstacle tolerance.
    Stop,
    /// `v > g` and `|dv/dx| < alpha_bar` strictly.
    Inaction,
    /// The gradient constraint binds.
    Action,
}

impl RegionLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegionLabel::Stop => "STOP",
            RegionLabel::Inaction => "INACTION",
            RegionLabel::Action => "ACTION",
        }
    }
}

/// A point of an extracted free boundary.
#[derive(Debug, Clone, Serialize)]
pub struct BoundaryPoint {
    pub t: f64,
    pub x: f64,
    /// "stop" for the obstacle boundary, "action" for the gradient one.
    pub kind: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub stage_params: Vec<Stage>,
    pub stage_diffs: Vec<f64>,
    /// Richardson estimate of the final-stage discretization error on the
    /// monitor compact.
    pub mesh_error: f64,
    /// Estimate of the distance to the limit: discretization error plus the
    /// last stage difference (the tail of the geometric schedule).
    pub error_estimate: f64,
    pub ledger: ConstantsLedger,
}

/// Converged value field with region labels and free boundaries.
#[derive(Debug, Clone, Serialize)]
pub struct ValueSolution {
    pub v: ScalarField,
    pub regions: Vec<RegionLabel>,
    pub boundaries: Vec<BoundaryPoint>,
    pub diagnostics: Diagnostics,
    /// Parameters of the stage that produced `v` (the feedback policy needs
    /// its `eps` and cost level).
    pub final_params: PenalizationParams,
}

impl ValueSolution {
    pub fn label_at(&self, i: usize, j: usize) -> RegionLabel {
        self.regions[i * self.v.xs.len() + j]
    }
}

/// Run a limit schedule: solve each stage (warm-started from the previous
/// one when the domain matches), record sup-norm stage differences on the
/// monitor compact, and package the last field with regions, boundaries and
/// diagnostics.
pub fn run_schedule(
    model: &GameModel,
    schedule: &LimitSchedule,
    options: &SolverOptions,
) -> Result<ValueSolution> {
    schedule.validate()?;
    let mon = schedule.monitor;
    let mut ledger = ConstantsLedger::new();
    let mut prev: Option<(ScalarField, Stage)> = None;
    let mut diffs: Vec<f64> = Vec::new();
    let mut last_bundle: Option<ApproxBundle> = None;

    for stage in &schedule.stages {
        let bundle = ApproxBundle::assemble(model, stage.params)?;
        let mesh = stage_mesh(&bundle, stage.nt, stage.nx);
        let warm = match &prev {
            Some((field, prev_stage)) if prev_stage.params.m == stage.params.m => Some(field),
            _ => None,
        };
        let field = solve_penalized_warm(&bundle, &mesh, options, warm)?;
        if let Some((prev_field, _)) = &prev {
            let d = field.sup_diff_on(prev_field, mon.t_lo, mon.t_hi, mon.x_lo, mon.x_hi);
            diffs.push(d);
            let k = diffs.len();
            if k >= 3 && diffs[k - 1] >= diffs[k - 2] && diffs[k - 2] >= diffs[k - 3] {
                return Err(Error::NonConvergence {
                    msg: "stage differences failed to decrease across 3 stages".into(),
                    history: diffs,
                });
            }
        }
        ledger.merge(&bundle.ledger);
        prev = Some((field, *stage));
        last_bundle = Some(bundle);
    }

    let (v, last_stage) = prev.expect("at least one stage");
    if let Some(&last_diff) = diffs.last() {
        if last_diff > schedule.stage_tol {
            return Err(Error::NonConvergence {
                msg: format!(
                    "final stage difference {last_diff:.3e} above tolerance {:.3e}",
                    schedule.stage_tol
                ),
                history: diffs,
            });
        }
    }

    // Discretization error of the final stage estimated by re-solving at
    // half resolution and comparing on the monitor compact.
    let bundle = last_bundle.expect("bundle kept");
    let coarse_mesh = stage_mesh(&bundle, last_stage.nt / 2, last_stage.nx / 2);
    let coarse = solve_penalized_warm(&bundle, &coarse_mesh, options, Some(&v))?;
    let mesh_error = v
        .sup_diff_on(&coarse, mon.t_lo, mon.t_hi, mon.x_lo, mon.x_hi)
        .max(1e-12);
    ledger.record("mesh_error", mesh_error, Provenance::Fitted);
    let error_estimate = mesh_error + diffs.last().copied().unwrap_or(0.0);
    ledger.record("error_estimate", error_estimate, Provenance::Fitted);

    // Fitted growth constant of the final field.
    let mut k3_obs: f64 = 0.0;
    for i in 0..v.ts.len() {
        for (j, &x) in v.xs.iter().enumerate() {
            k3_obs = k3_obs.max(v.at(i, j) / (1.0 + x * x));
        }
    }
    ledger.record("K3_observed", k3_obs, Provenance::Monitored);

    let tol_obstacle = 10.0 * mesh_error;
    let tol_grad = 0.02 * model.alpha_bar;
    let (regions, boundaries) = extract_regions(&v, model, tol_grad, tol_obstacle);

    Ok(ValueSolution {
        v,
        regions,
        boundaries,
        diagnostics: Diagnostics {
            stage_params: schedule.stages.clone(),
            stage_diffs: diffs,
            mesh_error,
            error_estimate,
            ledger,
        },
        final_params: last_stage.params,
    })
}

/// Label every node and trace the free boundaries by linear interpolation
/// of the level sets `v - g = tol_obstacle` and `|dv/dx| = alpha_bar -
/// tol_grad`.
pub fn extract_regions(
    v: &ScalarField,
    model: &GameModel,
    tol_grad: f64,
    tol_obstacle: f64,
) -> (Vec<RegionLabel>, Vec<BoundaryPoint>) {
    let nt = v.ts.len();
    let nx = v.xs.len();
    let mut labels = vec![RegionLabel::Stop; nt * nx];
    for i in 0..nt {
        let t = v.ts[i];
        for j in 0..nx {
            let x = v.xs[j];
            let gap = v.at(i, j) - (model.g)(t, x);
            let label = if gap <= tol_obstacle || i == nt - 1 || j == 0 {
                RegionLabel::Stop
            } else if v.ddx(i, j).abs() >= model.alpha_bar - tol_grad {
                RegionLabel::Action
            } else {
                RegionLabel::Inaction
            };
            labels[i * nx + j] = label;
        }
    }

    let mut boundaries = Vec::new();
    for i in 0..nt {
        let t = v.ts[i];
        for j in 1..nx {
            let a = labels[i * nx + j - 1];
            let b = labels[i * nx + j];
            if a == b {
                continue;
            }
            // Locate the crossing of the relevant level set on [x_{j-1}, x_j].
            if a == RegionLabel::Stop || b == RegionLabel::Stop {
                let f0 = v.at(i, j - 1) - (model.g)(t, v.xs[j - 1]) - tol_obstacle;
                let f1 = v.at(i, j) - (model.g)(t, v.xs[j]) - tol_obstacle;
                let x = cross(v.xs[j - 1], v.xs[j], f0, f1);
                boundaries.push(BoundaryPoint { t, x, kind: "stop" });
            }
            if a == RegionLabel::Action || b == RegionLabel::Action {
                let f0 = v.ddx(i, j - 1).abs() - (model.alpha_bar - tol_grad);
                let f1 = v.ddx(i, j).abs() - (model.alpha_bar - tol_grad);
                let x = cross(v.xs[j - 1], v.xs[j], f0, f1);
                boundaries.push(BoundaryPoint {
                    t,
                    x,
                    kind: "action",
                });
            }
        }
    }
    (labels, boundaries)
}

fn cross(x0: f64, x1: f64, f0: f64, f1: f64) -> f64 {
    if (f1 - f0).abs() < 1e-300 {
        0.5 * (x0 + x1)
    } else {
        (x0 - f0 * (x1 - x0) / (f1 - f0)).clamp(x0.min(x1), x0.max(x1))
    }
}

/// Tolerances for the variational-inequality verification.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VITolerances {
    /// Equality-residual tolerance (default 5x the mesh-error estimate).
    pub tol_eq: f64,
    /// Obstacle-gap tolerance.
    pub tol_obstacle: f64,
    /// Gradient-bound slack.
    pub tol_grad: f64,
    /// Trace tolerance at the lateral and terminal boundaries.
    pub tol_trace: f64,
    /// Quadratic growth constant.
    pub growth_c: f64,
}

impl VITolerances {
    /// Derive the line tolerances from the distance-to-limit estimate
    /// (discretization plus schedule tail).
    pub fn from_error_estimate(estimate: f64, model: &GameModel, growth_c: f64) -> VITolerances {
        VITolerances {
            tol_eq: 5.0 * estimate,
            tol_obstacle: 10.0 * estimate,
            tol_grad: 0.02 * model.alpha_bar,
            tol_trace: estimate.max(1e-9),
            growth_c,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LineReport {
    pub name: String,
    pub applicable: usize,
    pub passed: usize,
    pub worst: f64,
}

impl LineReport {
    pub fn pass_rate(&self) -> f64 {
        if self.applicable == 0 {
            1.0
        } else {
            self.passed as f64 / self.applicable as f64
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VIReport {
    pub lines: Vec<LineReport>,
    pub max_grad: f64,
}

impl VIReport {
    /// Every line passes on at least the given fraction of its applicable
    /// nodes.
    pub fn all_passed(&self, min_rate: f64) -> bool {
        self.lines.iter().all(|l| l.pass_rate() >= min_rate)
    }
}

/// Check the seven lines of the variational inequality, with residuals
/// assembled from the original model coefficients.
///
/// The differential lines are verified on the given region (normally the
/// monitor compact, where the finite-domain field actually approximates the
/// limit); the boundary traces are checked on their own lines: `x = 0` over
/// the region's time span and `t = T` up to the region's right edge.
pub fn verify_variational_inequality(
    v: &ScalarField,
    model: &GameModel,
    tols: &VITolerances,
    region: &MonitorRect,
) -> VIReport {
    let nt = v.ts.len();
    let nx = v.xs.len();
    let mut lines: Vec<LineReport> = [
        "equality on inaction&continuation",
        "residual >= 0 on continuation",
        "residual <= 0 on strict inaction",
        "obstacle v >= g",
        "gradient bound |dv/dx| <= alpha",
        "lateral trace v(t,0) = g(t,0)",
        "terminal trace v(T,x) = g(T,x)",
        "quadratic growth",
    ]
    .iter()
    .map(|n| LineReport {
        name: n.to_string(),
        applicable: 0,
        passed: 0,
        worst: 0.0,
    })
    .collect();

    let mut max_grad: f64 = 0.0;

    for i in 0..nt {
        let t = v.ts[i];
        for j in 0..nx {
            let x = v.xs[j];
            let val = v.at(i, j);
            let g = (model.g)(t, x);

            // (vi) lateral trace.
            if j == 0 {
                lines[5].applicable += 1;
                let d = (val - g).abs();
                if d <= tols.tol_trace {
                    lines[5].passed += 1;
                } else {
                    lines[5].worst = lines[5].worst.max(d);
                }
            }
            // (vii) terminal trace up to the region's right edge.
            if i == nt - 1 && x <= region.x_hi {
                lines[6].applicable += 1;
                let d = (val - g).abs();
                if d <= tols.tol_trace {
                    lines[6].passed += 1;
                } else {
                    lines[6].worst = lines[6].worst.max(d);
                }
            }

            if t < region.t_lo || t > region.t_hi || x < region.x_lo || x > region.x_hi {
                continue;
            }

            // (iv) obstacle on the region.
            lines[3].applicable += 1;
            let gap = val - g;
            if gap >= -tols.tol_obstacle {
                lines[3].passed += 1;
            } else {
                lines[3].worst = lines[3].worst.max(-gap);
            }

            // growth on the region.
            lines[7].applicable += 1;
            if val.abs() <= tols.growth_c * (1.0 + x * x) {
                lines[7].passed += 1;
            } else {
                lines[7].worst = lines[7].worst.max(val.abs() / (1.0 + x * x));
            }

            // Interior-only lines.
            if i == 0 || i >= nt - 1 || j == 0 || j >= nx - 1 {
                continue;
            }
            let slope = v.ddx(i, j);
            max_grad = max_grad.max(slope.abs());

            // (v) gradient bound at interior nodes.
            lines[4].applicable += 1;
            if slope.abs() <= model.alpha_bar + tols.tol_grad {
                lines[4].passed += 1;
            } else {
                lines[4].worst = lines[4].worst.max(slope.abs() - model.alpha_bar);
            }

            let s = (model.sigma)(x);
            let residual = v.ddt(i, j) + 0.5 * s * s * v.d2dxx(i, j) + (model.mu)(x) * slope
                - model.r * val
                + (model.h)(t, x);

            let in_continuation = gap > tols.tol_obstacle;
            let in_strict_inaction = slope.abs() < model.alpha_bar - tols.tol_grad;

            if in_continuation && in_strict_inaction {
                lines[0].applicable += 1;
                if residual.abs() <= tols.tol_eq {
                    lines[0].passed += 1;
                } else {
                    lines[0].worst = lines[0].worst.max(residual.abs());
                }
            }
            if in_continuation {
                lines[1].applicable += 1;
                if residual >= -tols.tol_eq {
                    lines[1].passed += 1;
                } else {
                    lines[1].worst = lines[1].worst.max(-residual);
                }
            }
            if in_strict_inaction {
                lines[2].applicable += 1;
                if residual <= tols.tol_eq {
                    lines[2].passed += 1;
                } else {
                    lines[2].worst = lines[2].worst.max(residual);
                }
            }
        }
    }
    VIReport { lines, max_grad }
}

/// Re-run the final stage with both penalties tightened and return the
/// maximal upward deviation on the monitor compact; the limit field is the
/// maximal solution, so tighter penalties may only lower it (up to the
/// stage tolerance).
pub fn maximality_probe(
    model: &GameModel,
    solution: &ValueSolution,
    schedule: &LimitSchedule,
    options: &SolverOptions,
) -> Result<f64> {
    let last = *schedule.stages.last().unwrap();
    let tighter = PenalizationParams {
        delta: last.params.delta / 2.0,
        eps: last.params.eps / 2.0,
        ..last.params
    };
    let bundle = ApproxBundle::assemble(model, tighter)?;
    let mesh = stage_mesh(&bundle, last.nt, last.nx);
    let v2 = solve_penalized_warm(&bundle, &mesh, options, Some(&solution.v))?;
    let mon = schedule.monitor;
    let mut worst = f64::NEG_INFINITY;
    for (i, &t) in v2.ts.iter().enumerate() {
        if t < mon.t_lo || t > mon.t_hi {
            continue;
        }
        for (j, &x) in v2.xs.iter().enumerate() {
            if x < mon.x_lo || x > mon.x_hi {
                continue;
            }
            worst = worst.max(v2.at(i, j) - solution.v.interp(t, x));
        }
    }
    Ok(worst)
}

/// Fitted constant of the spatial modulus of continuity
/// `sup_t |u(t,x1) - u(t,x2)| <= C |x1 - x2|^exponent`, measured over node
/// pairs with separation at most each `eta` inside the monitor rectangle.
pub fn modulus_constant(
    field: &ScalarField,
    monitor: &MonitorRect,
    etas: &[f64],
    exponent: f64,
) -> f64 {
    let mut c: f64 = 0.0;
    for &eta in etas {
        let mut sup: f64 = 0.0;
        for (i, &t) in field.ts.iter().enumerate() {
            if t < monitor.t_lo || t > monitor.t_hi {
                continue;
            }
            for (j, &xj) in field.xs.iter().enumerate() {
                if xj < monitor.x_lo || xj > monitor.x_hi {
                    continue;
                }
                for k in j + 1..field.xs.len() {
                    let xk = field.xs[k];
                    if xk - xj > eta || xk > monitor.x_hi {
                        break;
                    }
                    sup = sup.max((field.at(i, j) - field.at(i, k)).abs());
                }
            }
        }
        c = c.max(sup / eta.powf(exponent));
    }
    c
}
