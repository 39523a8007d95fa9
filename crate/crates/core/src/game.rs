//! Monte Carlo engine: simulates the controlled, absorbed diffusion by
//! Euler-Maruyama, evaluates game payoffs, implements the optimal stopping
//! rule and the feedback control, and checks the saddle-point inequalities
//! against the PDE value.
//!
//! Paths are independent; each draws its own counter-based RNG stream from
//! `(seed, path index)`, so ensembles are bitwise reproducible regardless of
//! scheduling. The value field is shared read-only.

use crate::continuation::ValueSolution;
use crate::hamiltonian::feedback_drift;
use crate::model::{GameModel, Regime, RegimeFlags};
use crate::pde::ScalarField;
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Simulation configuration. `dt` must not exceed the time step of the
/// value mesh driving the policies.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self, policy_mesh_dt: Option<f64>) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::Parameter("n_paths must be positive".into()));
        }
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(Error::Parameter("dt must be positive".into()));
        }
        if let Some(mesh_dt) = policy_mesh_dt {
            if self.dt > mesh_dt * (1.0 + 1e-12) {
                return Err(Error::Parameter(format!(
                    "simulation dt = {} exceeds the value-mesh step {mesh_dt}",
                    self.dt
                )));
            }
        }
        Ok(())
    }
}

/// Discretized bounded-variation control along one path: per-step
/// absolutely-continuous increments split into their increasing and
/// decreasing parts, plus atomic jumps.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ControlPath {
    pub times: Vec<f64>,
    pub dnu_plus: Vec<f64>,
    pub dnu_minus: Vec<f64>,
    /// Applied jumps `(time, signed size)` (after any truncation needed to
    /// land exactly at zero).
    pub jumps: Vec<(f64, f64)>,
}

impl ControlPath {
    pub fn total_variation(&self) -> f64 {
        self.dnu_plus.iter().sum::<f64>()
            + self.dnu_minus.iter().sum::<f64>()
            + self.jumps.iter().map(|(_, s)| s.abs()).sum::<f64>()
    }
}

/// One simulated path with its control record.
#[derive(Debug, Clone, Serialize)]
pub struct PathRecord {
    pub t0: f64,
    pub x0: f64,
    /// State at step boundaries, `xs[0] = x0`.
    pub xs: Vec<f64>,
    pub control: ControlPath,
    /// Absorption time, when the path hit zero.
    pub tau0: Option<f64>,
    /// Effective end of the game for this path (stop, absorption or
    /// horizon), relative to `t0`.
    pub stop_time: f64,
    pub stopped_by_rule: bool,
}

/// Mean payoff and its decomposition over an ensemble.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PayoffStats {
    pub mean: f64,
    pub std_error: f64,
    pub mean_terminal: f64,
    pub mean_running: f64,
    pub mean_cost: f64,
    pub absorption_fraction: f64,
    pub mean_stop_time: f64,
    pub mean_total_variation: f64,
    pub n_paths: usize,
}

/// Control strategies available to the simulator.
pub enum Policy<'a> {
    /// No control.
    Zero,
    /// Absolutely continuous feedback with rate
    /// `-2 psi_eps'(|du/dx|^2 - a^2) du/dx` read from a value field.
    Feedback {
        field: &'a ScalarField,
        cost_level: f64,
        eps: f64,
    },
    /// Open-loop control: piecewise-constant rate (per interval of length
    /// `interval`) plus finitely many jumps.
    Piecewise(PiecewiseControl),
}

#[derive(Debug, Clone, Serialize)]
pub struct PiecewiseControl {
    pub rates: Vec<f64>,
    pub interval: f64,
    pub jumps: Vec<(f64, f64)>,
}

impl Policy<'_> {
    fn rate(&self, t: f64, x: f64) -> f64 {
        match self {
            Policy::Zero => 0.0,
            Policy::Feedback {
                field,
                cost_level,
                eps,
            } => feedback_drift(field.interp_ddx(t, x), *cost_level, *eps),
            Policy::Piecewise(pc) => {
                if pc.rates.is_empty() {
                    0.0
                } else {
                    let k = ((t / pc.interval) as usize).min(pc.rates.len() - 1);
                    pc.rates[k]
                }
            }
        }
    }

    fn jumps(&self) -> &[(f64, f64)] {
        match self {
            Policy::Piecewise(pc) => &pc.jumps,
            _ => &[],
        }
    }
}

/// Stopping rules evaluated at pre-jump and post-jump states.
pub enum StopRule<'a> {
    /// Run to the horizon.
    Never,
    /// Stop at the first step at or past the given relative time.
    FixedTime(f64),
    /// Stop the first time the state reaches the barrier from above
    /// (`true`) or below (`false`).
    Level { barrier: f64, from_above: bool },
    /// Optimal rule: stop when `v - g <= tol` at the sampled state.
    ValueMatch {
        field: &'a ScalarField,
        model: &'a GameModel,
        tol: f64,
    },
}

impl StopRule<'_> {
    fn should_stop(&self, s: f64, t_abs: f64, x: f64) -> bool {
        match self {
            StopRule::Never => false,
            StopRule::FixedTime(s0) => s >= *s0 - 1e-12,
            StopRule::Level {
                barrier,
                from_above,
            } => {
                if *from_above {
                    x <= *barrier
                } else {
                    x >= *barrier
                }
            }
            StopRule::ValueMatch { field, model, tol } => {
                field.interp(t_abs, x) - (model.g)(t_abs, x) <= *tol
            }
        }
    }
}

/// The diffusion the paths follow: the raw model coefficients or the
/// mollified ones of an approximation stage.
pub struct Dynamics<'a> {
    pub mu: Box<dyn Fn(f64) -> f64 + 'a>,
    pub sigma: Box<dyn Fn(f64) -> f64 + 'a>,
}

impl<'a> Dynamics<'a> {
    pub fn from_model(model: &'a GameModel) -> Dynamics<'a> {
        Dynamics {
            mu: Box::new(|x| (model.mu)(x)),
            sigma: Box::new(|x| (model.sigma)(x)),
        }
    }
}

/// Build the optimal stopping rule from a converged value solution: stop at
/// the first step where `v - g <= tol`, checked at both the pre-jump and
/// the post-jump state.
pub fn optimal_stop_rule<'a>(
    solution: &'a ValueSolution,
    model: &'a GameModel,
    tol: f64,
) -> StopRule<'a> {
    StopRule::ValueMatch {
        field: &solution.v,
        model,
        tol,
    }
}

/// Build the near-optimal feedback policy from the final-stage field.
pub fn feedback_policy<'a>(solution: &'a ValueSolution, model: &GameModel) -> Policy<'a> {
    let params = solution.final_params;
    let cost_level = if params.n == 0 {
        model.alpha_bar
    } else {
        model.alpha_bar + 0.5 / params.n as f64
    };
    Policy::Feedback {
        field: &solution.v,
        cost_level,
        eps: params.eps,
    }
}

/// Simulated ensemble: aggregate statistics plus the first `retain` full
/// path records.
#[derive(Debug, Clone, Serialize)]
pub struct Ensemble {
    pub stats: PayoffStats,
    pub retained: Vec<PathRecord>,
}

/// Per-path payoff components.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PayoffParts {
    pub terminal: f64,
    pub running: f64,
    pub cost: f64,
}

impl PayoffParts {
    pub fn total(&self) -> f64 {
        self.terminal + self.running + self.cost
    }
}

/// Game payoff of one recorded path for a stopping time `tau` (relative to
/// the path's `t0`, capped by absorption): discounted stopping payoff plus
/// the trapezoid integral of the discounted running payoff plus the
/// discounted control costs over the closed interval `[0, tau ^ tau0]`.
pub fn payoff(model: &GameModel, path: &PathRecord, tau: f64) -> PayoffParts {
    let r = model.r;
    let end = match path.tau0 {
        Some(t_abs) => tau.min(t_abs),
        None => tau,
    };
    let grid = &path.control.times;
    let mut running = 0.0;
    let mut cost = 0.0;
    for k in 0..grid.len().saturating_sub(1) {
        let (s0, s1) = (grid[k], grid[k + 1]);
        if s1 > end + 1e-12 {
            break;
        }
        let h0 = (model.h)(path.t0 + s0, path.xs[k]);
        let h1 = (model.h)(path.t0 + s1, path.xs[k + 1]);
        running += 0.5 * ((-r * s0).exp() * h0 + (-r * s1).exp() * h1) * (s1 - s0);
        // Absolutely continuous control cost, discounted at the step edge.
        cost += (-r * s0).exp()
            * model.alpha_bar
            * (path.control.dnu_plus[k] + path.control.dnu_minus[k]);
    }
    for &(s, size) in &path.control.jumps {
        if s <= end + 1e-12 {
            cost += (-r * s).exp() * model.alpha_bar * size.abs();
        }
    }
    let x_end = state_at(path, end);
    let terminal = (-r * end).exp() * (model.g)(path.t0 + end, x_end);
    PayoffParts {
        terminal,
        running,
        cost,
    }
}

fn state_at(path: &PathRecord, s: f64) -> f64 {
    let k = path
        .control
        .times
        .partition_point(|&u| u <= s + 1e-12)
        .saturating_sub(1);
    path.xs[k.min(path.xs.len() - 1)]
}

/// Simulate an ensemble of controlled absorbed paths from `(t0, x0)` under
/// the given policy and stopping rule.
///
/// Absorption uses the post-step state (overshoot clamped to zero, control
/// frozen afterwards); control jumps are atomic mid-step events, truncated
/// to land exactly at zero when they would cross it, and the stopping rule
/// sees both the pre-jump and the post-jump state. When the rule fires on
/// the pre-jump state the game ends before the jump, so neither its cost
/// nor its displacement enters the payoff — the conservative side of the
/// saddle inequalities, since the stopping payoff is Lipschitz below the
/// control cost.
#[allow(clippy::too_many_arguments)]
pub fn simulate_paths(
    model: &GameModel,
    dynamics: &Dynamics<'_>,
    policy: &Policy<'_>,
    stop_rule: &StopRule<'_>,
    config: &SimConfig,
    t0: f64,
    x0: f64,
    retain: usize,
) -> Result<Ensemble> {
    config.validate(None)?;
    let horizon = model.horizon - t0;
    if horizon <= 0.0 {
        return Err(Error::Parameter(
            "start time is at or past the horizon".into(),
        ));
    }
    let n_steps = (horizon / config.dt).ceil() as usize;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut parts_sum = PayoffParts::default();
    let mut absorbed = 0usize;
    let mut stop_sum = 0.0;
    let mut tv_sum = 0.0;
    let mut retained = Vec::new();

    for p in 0..config.n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(p as u64);
        let record = simulate_one(
            model, dynamics, policy, stop_rule, config, t0, x0, n_steps, &mut rng,
        )?;
        let parts = payoff(model, &record, record.stop_time);
        let total = parts.total();
        sum += total;
        sumsq += total * total;
        parts_sum.terminal += parts.terminal;
        parts_sum.running += parts.running;
        parts_sum.cost += parts.cost;
        if record.tau0.is_some() {
            absorbed += 1;
        }
        stop_sum += record.stop_time;
        tv_sum += record.control.total_variation();
        if p < retain {
            retained.push(record);
        }
    }
    let n = config.n_paths as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    let stats = PayoffStats {
        mean,
        std_error: (var / n).sqrt(),
        mean_terminal: parts_sum.terminal / n,
        mean_running: parts_sum.running / n,
        mean_cost: parts_sum.cost / n,
        absorption_fraction: absorbed as f64 / n,
        mean_stop_time: stop_sum / n,
        mean_total_variation: tv_sum / n,
        n_paths: config.n_paths,
    };
    Ok(Ensemble { stats, retained })
}

#[allow(clippy::too_many_arguments)]
fn simulate_one(
    model: &GameModel,
    dynamics: &Dynamics<'_>,
    policy: &Policy<'_>,
    stop_rule: &StopRule<'_>,
    config: &SimConfig,
    t0: f64,
    x0: f64,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PathRecord> {
    let horizon = model.horizon - t0;
    let mut control = ControlPath::default();
    let mut xs = vec![x0];
    control.times.push(0.0);
    let mut jumps_pending: Vec<(f64, f64)> = policy.jumps().to_vec();
    jumps_pending.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut jump_idx = 0;

    let mut x = x0;
    let mut s = 0.0;
    let mut tau0: Option<f64> = None;
    let mut stop_time = horizon;
    let mut stopped_by_rule = false;

    'steps: for _ in 0..n_steps {
        // Pre-jump stopping check (the stopper sees the left limit).
        if stop_rule.should_stop(s, t0 + s, x) {
            stop_time = s;
            stopped_by_rule = true;
            break;
        }
        // Atomic jumps scheduled in [s, s + dt).
        while jump_idx < jumps_pending.len() && jumps_pending[jump_idx].0 < s + config.dt - 1e-15 {
            let (_, size) = jumps_pending[jump_idx];
            jump_idx += 1;
            let applied = if x + size < 0.0 { -x } else { size };
            if applied != 0.0 {
                x += applied;
                control.jumps.push((s, applied));
                // The recorded state at this time is the post-jump value.
                *xs.last_mut().unwrap() = x;
            }
            if x <= 0.0 {
                tau0 = Some(s);
                stop_time = s;
                break 'steps;
            }
            // Post-jump stopping check.
            if stop_rule.should_stop(s, t0 + s, x) {
                stop_time = s;
                stopped_by_rule = true;
                break 'steps;
            }
        }

        let dt = config.dt.min(horizon - s);
        if dt <= 1e-15 {
            break;
        }
        let rate = policy.rate(t0 + s, x);
        if !rate.is_finite() {
            return Err(Error::Simulation(format!(
                "policy produced a non-finite rate at (t, x) = ({}, {x})",
                t0 + s
            )));
        }
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let dnu = rate * dt;
        let x_next = x + ((dynamics.mu)(x) + rate) * dt + (dynamics.sigma)(x) * dt.sqrt() * z;
        if dnu >= 0.0 {
            control.dnu_plus.push(dnu);
            control.dnu_minus.push(0.0);
        } else {
            control.dnu_plus.push(0.0);
            control.dnu_minus.push(-dnu);
        }
        s += dt;
        control.times.push(s);
        if x_next <= 0.0 {
            xs.push(0.0);
            tau0 = Some(s);
            stop_time = s;
            break;
        }
        xs.push(x_next);
        x = x_next;
    }

    Ok(PathRecord {
        t0,
        x0,
        xs,
        control,
        tau0,
        stop_time,
        stopped_by_rule,
    })
}

/// Keep only the decreasing part of an open-loop control (the projection
/// that the monotone-payoff regime makes advantageous); requires regime A2.
/// The absorption-completing jump is applied by the simulator, which
/// truncates crossings to land exactly at zero.
pub fn decreasing_projection(
    control: &PiecewiseControl,
    flags: RegimeFlags,
) -> Result<PiecewiseControl> {
    if flags.regime != Regime::A2 {
        return Err(Error::Domain(
            "the decreasing projection requires the monotone-payoff regime".into(),
        ));
    }
    Ok(PiecewiseControl {
        rates: control.rates.iter().map(|&r| r.min(0.0)).collect(),
        interval: control.interval,
        jumps: control
            .jumps
            .iter()
            .copied()
            .filter(|&(_, s)| s < 0.0)
            .collect(),
    })
}

/// Draw a random admissible open-loop control: piecewise-constant rates
/// bounded by `rate_bound` over 8 intervals plus at most 2 jumps.
pub fn random_control(
    rng: &mut ChaCha8Rng,
    horizon: f64,
    rate_bound: f64,
    jump_scale: f64,
) -> PiecewiseControl {
    let n_int = 8;
    let rates = (0..n_int)
        .map(|_| rng.gen_range(-rate_bound..rate_bound))
        .collect();
    let n_jumps = rng.gen_range(0..=2usize);
    let jumps = (0..n_jumps)
        .map(|_| {
            (
                rng.gen_range(0.0..horizon),
                rng.gen_range(-jump_scale..jump_scale),
            )
        })
        .collect();
    PiecewiseControl {
        rates,
        interval: horizon / n_int as f64,
        jumps,
    }
}

/// Outcome of the three saddle-point inequalities at one start point.
#[derive(Debug, Clone, Serialize)]
pub struct SaddlePointReport {
    pub t0: f64,
    pub x0: f64,
    pub value: f64,
    pub disc_tol: f64,
    /// `J(nu*, tau_random) - v` for each sampled stopping rule; all must
    /// stay below `3 SE + disc_tol`.
    pub stopper_deviations: Vec<f64>,
    pub stopper_se: Vec<f64>,
    /// `v - J(nu_random, tau*)` for each sampled control; all must stay
    /// below `3 SE + disc_tol`.
    pub controller_deviations: Vec<f64>,
    pub controller_se: Vec<f64>,
    /// `|J(nu*, tau*) - v|` with its standard error and full statistics.
    pub equilibrium_gap: f64,
    pub equilibrium_se: f64,
    pub equilibrium_stats: PayoffStats,
    /// Expected total variation of the feedback control against the
    /// quadratic budget; informational.
    pub budget_flagged: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SaddleReport {
    pub points: Vec<SaddlePointReport>,
    pub fitted_k5: f64,
}

impl SaddleReport {
    pub fn all_passed(&self) -> bool {
        self.points.iter().all(|p| p.passed)
    }
}

/// Check the saddle-point inequalities at the given start points:
/// (a) the feedback control caps the payoff against random stopping rules,
/// (b) the optimal stopping rule floors it against random controls,
/// (c) the candidate pair reproduces the PDE value.
///
/// `disc_tol` is five times the combined error estimate: the schedule's
/// distance-to-limit estimate plus a step-halving gap of the equilibrium
/// payoff.
pub fn saddle_check(
    model: &GameModel,
    solution: &ValueSolution,
    config: &SimConfig,
    start_points: &[(f64, f64)],
) -> Result<SaddleReport> {
    let mesh_dt = solution.v.ts[1] - solution.v.ts[0];
    config.validate(Some(mesh_dt))?;
    let stop_tol = 10.0 * solution.diagnostics.mesh_error;
    let dynamics = Dynamics::from_model(model);
    let mut points = Vec::new();
    let mut fitted_k5 = 0.0f64;

    for (run_block, &(t0, x0)) in start_points.iter().enumerate() {
        let value = solution.v.interp(t0, x0);
        let seed_of = |k: u64| SimConfig {
            seed: config
                .seed
                .wrapping_add((run_block as u64 * 64 + k).wrapping_mul(0x9E3779B97F4A7C15)),
            ..*config
        };

        // (c) equilibrium pair, plus its dt-halving gap for the tolerance.
        let nu_star = feedback_policy(solution, model);
        let tau_star = optimal_stop_rule(solution, model, stop_tol);
        let eq = simulate_paths(
            model,
            &dynamics,
            &nu_star,
            &tau_star,
            &seed_of(0),
            t0,
            x0,
            0,
        )?;
        let half = SimConfig {
            dt: config.dt / 2.0,
            ..seed_of(1)
        };
        let eq_half = simulate_paths(model, &dynamics, &nu_star, &tau_star, &half, t0, x0, 0)?;
        let dt_gap = (eq.stats.mean - eq_half.stats.mean).abs();
        let disc_tol = 5.0 * (solution.diagnostics.error_estimate + dt_gap);

        // (a) feedback control against random stopping rules (the no-stop
        // rule is always included as the adversarial extreme).
        let mut stopper_deviations = Vec::new();
        let mut stopper_se = Vec::new();
        let horizon = model.horizon - t0;
        let mut rule_rng = ChaCha8Rng::seed_from_u64(seed_of(2).seed);
        for k in 0..5u64 {
            let rule = match k {
                0 => StopRule::Never,
                1 | 2 => StopRule::FixedTime(rule_rng.gen_range(0.05..1.0) * horizon),
                _ => StopRule::Level {
                    barrier: rule_rng.gen_range(0.2..2.5) * x0.max(0.2),
                    from_above: rule_rng.gen_bool(0.5),
                },
            };
            let ens = simulate_paths(
                model,
                &dynamics,
                &nu_star,
                &rule,
                &seed_of(3 + k),
                t0,
                x0,
                0,
            )?;
            stopper_deviations.push(ens.stats.mean - value);
            stopper_se.push(ens.stats.std_error);
        }

        // (b) optimal rule against random admissible controls.
        let mut controller_deviations = Vec::new();
        let mut controller_se = Vec::new();
        let mut ctrl_rng = ChaCha8Rng::seed_from_u64(seed_of(16).seed);
        let rate_bound = (1.0 / solution.final_params.eps).min(20.0);
        for k in 0..5u64 {
            let pc = random_control(&mut ctrl_rng, horizon, rate_bound, 0.5 * x0 + 0.2);
            let policy = Policy::Piecewise(pc);
            let ens = simulate_paths(
                model,
                &dynamics,
                &policy,
                &tau_star,
                &seed_of(24 + k),
                t0,
                x0,
                0,
            )?;
            controller_deviations.push(value - ens.stats.mean);
            controller_se.push(ens.stats.std_error);
        }

        // Budget sanity: quadratic bound on the expected total variation.
        let k5_here = eq.stats.mean_total_variation / (1.0 + x0 * x0);
        if run_block == 0 {
            fitted_k5 = k5_here.max(1e-9);
        }
        let budget_flagged = k5_here > fitted_k5 * 1.5 + 1e-9;

        let equilibrium_gap = (eq.stats.mean - value).abs();
        let passed = stopper_deviations
            .iter()
            .zip(&stopper_se)
            .all(|(&d, &se)| d <= 3.0 * se + disc_tol)
            && controller_deviations
                .iter()
                .zip(&controller_se)
                .all(|(&d, &se)| d <= 3.0 * se + disc_tol)
            && equilibrium_gap <= 3.0 * eq.stats.std_error + disc_tol;

        points.push(SaddlePointReport {
            t0,
            x0,
            value,
            disc_tol,
            stopper_deviations,
            stopper_se,
            controller_deviations,
            controller_se,
            equilibrium_gap,
            equilibrium_se: eq.stats.std_error,
            equilibrium_stats: eq.stats,
            budget_flagged,
            passed,
        });
    }
    Ok(SaddleReport { points, fitted_k5 })
}
