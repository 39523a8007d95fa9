//! Acceptance suite: every criterion runs at its stated tolerance and
//! prints one pass/fail line (visible with `--nocapture`; the test names
//! mirror the criteria).

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stopctrl::approx::{
    knot_second_difference_jump, ApproxBundle, PenalizationParams, SmoothPenalty,
};
use stopctrl::continuation::{
    maximality_probe, modulus_constant, run_schedule, verify_variational_inequality, LimitSchedule,
    MonitorRect, VITolerances, ValueSolution,
};
use stopctrl::game::{
    decreasing_projection, random_control, saddle_check, simulate_paths, Dynamics,
    PiecewiseControl, Policy, SimConfig, StopRule,
};
use stopctrl::hamiltonian::{hamiltonian_eval, HamiltonianQuery};
use stopctrl::model::{gbm_quad, GameModel, Regime, RegimeFlags};
use stopctrl::pde::{
    declared_k3, fleming_diagnostic_with, fleming_gradient_diagnostic, solve_penalized,
    solve_penalized_unbounded, stage_mesh, Mesh, SolverOptions,
};

fn report(criterion: &str, passed: bool, elapsed: Duration, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {status} in {elapsed:.2?} ({detail})");
    assert!(passed, "criterion {criterion} failed: {detail}");
}

struct Solved {
    model: GameModel,
    schedule: LimitSchedule,
    solution: ValueSolution,
}

fn solved() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| {
        let model = gbm_quad();
        let schedule = LimitSchedule::default_for(&model);
        let solution =
            run_schedule(&model, &schedule, &SolverOptions::default()).expect("schedule runs");
        Solved {
            model,
            schedule,
            solution,
        }
    })
}

fn default_bundle() -> ApproxBundle {
    ApproxBundle::assemble(
        &gbm_quad(),
        PenalizationParams {
            n: 100,
            kappa: 0.05,
            eps: 0.1,
            delta: 0.01,
            m: 8.0,
        },
    )
    .unwrap()
}

/// Independent brute-force oracle: grid maximum of the Hamiltonian
/// objective over p in [-20, 20].
fn brute_force_hamiltonian(y: f64, a: f64, eps: f64, step: f64) -> f64 {
    let penalty = SmoothPenalty::new(eps).unwrap();
    let n = (40.0 / step) as usize;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=n {
        let p = -20.0 + i as f64 * step;
        let v = y * p - penalty.eval(p * p - a * a);
        if v > best {
            best = v;
        }
    }
    best
}

fn random_queries(n: usize) -> Vec<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    (0..n)
        .map(|_| {
            (
                rng.gen_range(-10.0..10.0),
                rng.gen_range(0.1..3.0),
                rng.gen_range(0.01..0.5),
            )
        })
        .collect()
}

#[test]
fn criterion_01_hamiltonian_oracle_equivalence() {
    let t0 = Instant::now();
    let queries = random_queries(1000);
    let mut worst = 0.0f64;
    for &(y, a, eps) in &queries {
        let hv = hamiltonian_eval(HamiltonianQuery { y, a, eps }).unwrap();
        let oracle = brute_force_hamiltonian(y, a, eps, 1e-4);
        let err = (hv.value - oracle).abs() / (1.0 + hv.value.abs());
        if err > worst {
            worst = err;
        }
    }
    let elapsed = t0.elapsed();
    report(
        "01 hamiltonian oracle equivalence",
        worst <= 1e-5 && elapsed < Duration::from_secs(5),
        elapsed,
        &format!("worst relative gap {worst:.3e}"),
    );
}

#[test]
fn criterion_02_hamiltonian_lower_bounds() {
    let t0 = Instant::now();
    let queries = random_queries(1000);
    let mut ok = true;
    let mut worst = 0.0f64;
    for &(y, a, eps) in &queries {
        let h = hamiltonian_eval(HamiltonianQuery { y, a, eps })
            .unwrap()
            .value;
        let bound = (eps * y * y / 4.0).max(a * y.abs());
        worst = worst.max(bound - h);
        if h < bound - 1e-10 {
            ok = false;
        }
    }
    let elapsed = t0.elapsed();
    report(
        "02 hamiltonian lower bounds",
        ok && elapsed < Duration::from_secs(1),
        elapsed,
        &format!("worst bound violation {worst:.3e}"),
    );
}

#[test]
fn criterion_03_penalty_contract() {
    let t0 = Instant::now();
    let mut ok = true;
    for eps in [0.02, 0.05, 0.1, 0.3, 0.49] {
        let p = SmoothPenalty::new(eps).unwrap();
        // Exact affine branch.
        for k in 0..200 {
            let y = 2.0 * eps + k as f64 * 0.01;
            if p.eval(y) != (y - eps) / eps {
                ok = false;
            }
        }
        // Exact zero branch.
        for k in 0..200 {
            let y = -(k as f64) * 0.01;
            if p.eval(y) != 0.0 {
                ok = false;
            }
        }
        // Knot continuity of the second derivative.
        for knot in [0.0, 2.0 * eps] {
            let (lo, hi) = knot_second_difference_jump(&p, knot);
            if (hi - lo).abs() > 1e-6 {
                ok = false;
            }
        }
    }
    let elapsed = t0.elapsed();
    report(
        "03 penalty contract",
        ok && elapsed < Duration::from_secs(1),
        elapsed,
        "affine/zero branches exact, knot jumps <= 1e-6",
    );
}

#[test]
fn criterion_04_penalized_solve_bounds() {
    let t0 = Instant::now();
    let bundle = default_bundle();
    let mesh = stage_mesh(&bundle, 400, 320);
    let u = solve_penalized(&bundle, &mesh, &SolverOptions::default()).unwrap();

    let k1 = bundle.ledger.get("K1").unwrap();
    let d1 = bundle.ledger.get("D1").unwrap();
    let k3 = declared_k3(k1, d1, bundle.model.horizon);
    let mut min_u = f64::INFINITY;
    let mut worst_growth = 0.0f64;
    for i in 0..u.ts.len() {
        for (j, &x) in u.xs.iter().enumerate() {
            min_u = min_u.min(u.at(i, j));
            worst_growth = worst_growth.max(u.at(i, j) / (1.0 + x * x));
        }
    }
    // Terminal and lateral traces exact.
    let mut traces_exact = true;
    let nt = u.ts.len();
    for (j, &x) in u.xs.iter().enumerate() {
        if u.at(nt - 1, j) != bundle.g_nm(bundle.model.horizon, x) {
            traces_exact = false;
        }
    }
    for (i, &t) in u.ts.iter().enumerate() {
        if u.at(i, u.xs.len() - 1) != bundle.g_nm(t, *u.xs.last().unwrap()) {
            traces_exact = false;
        }
        let zeta = mesh.boundary_level(t);
        if zeta == 0.0 && u.at(i, 0) != bundle.g_nm(t, 0.0) {
            traces_exact = false;
        }
    }
    let elapsed = t0.elapsed();
    report(
        "04 penalized solve bounds",
        min_u >= -1e-8 && worst_growth <= k3 && traces_exact && elapsed < Duration::from_secs(30),
        elapsed,
        &format!("min u {min_u:.2e}, sup u/(1+x^2) {worst_growth:.3} vs K3 {k3:.3}"),
    );
}

#[test]
fn criterion_05_obstacle_penalty_uniformity() {
    let t0 = Instant::now();
    let model = gbm_quad();
    // Uniform bound constant: negative part of the stopping benefit of the
    // truncated-mollified (but spatially uncut) data.
    let base = PenalizationParams {
        n: 100,
        kappa: 0.05,
        eps: 0.1,
        delta: 0.1,
        m: 8.0,
    };
    let bundle0 = ApproxBundle::assemble(&model, base).unwrap();
    let x_max = 2.0 * base.m;
    let mut k2 = 0.0f64;
    for i in 0..=200 {
        let t = model.horizon * i as f64 / 200.0;
        for j in 0..=400 {
            let x = x_max * j as f64 / 400.0;
            let s = bundle0.coeffs.sigma(x);
            let theta = bundle0.truncated.h(t, x)
                + bundle0.truncated.dg_dt(t, x).unwrap()
                + 0.5 * s * s * bundle0.truncated.d2g_dxx(t, x).unwrap()
                + bundle0.coeffs.mu(x) * bundle0.truncated.dg_dx(t, x).unwrap()
                - model.r * bundle0.truncated.g(t, x);
            k2 = k2.max(-theta);
        }
    }

    let mut max_penalties = Vec::new();
    for delta in [1e-1, 3e-2, 1e-2, 3e-3] {
        let bundle = ApproxBundle::assemble(&model, PenalizationParams { delta, ..base }).unwrap();
        let mesh = Mesh::uniform(model.horizon, 400, x_max, 256);
        let u = solve_penalized_unbounded(&bundle, &mesh, &SolverOptions::default()).unwrap();
        let mut worst = 0.0f64;
        for i in 0..u.ts.len() - 1 {
            for (j, &x) in u.xs.iter().enumerate() {
                let pen = (bundle.truncated.g(u.ts[i], x) - u.at(i, j)).max(0.0) / delta;
                worst = worst.max(pen);
            }
        }
        max_penalties.push(worst);
    }
    let hi = max_penalties.iter().cloned().fold(f64::MIN, f64::max);
    let lo = max_penalties.iter().cloned().fold(f64::MAX, f64::min);
    let spread = (hi - lo) / hi;
    let elapsed = t0.elapsed();
    report(
        "05 obstacle penalty uniformity",
        spread <= 0.25 && hi <= 1.5 * k2 && elapsed < Duration::from_secs(120),
        elapsed,
        &format!("penalties {max_penalties:?}, spread {spread:.3}, K2 {k2:.4}"),
    );
}

#[test]
fn criterion_06_fleming_diagnostic() {
    let t0 = Instant::now();
    // Mild parameters keep the exponential transform inside f64 range.
    let bundle = ApproxBundle::assemble(
        &gbm_quad(),
        PenalizationParams {
            n: 100,
            kappa: 0.9,
            eps: 0.9,
            delta: 0.01,
            m: 4.0,
        },
    )
    .unwrap();
    let mesh = stage_mesh(&bundle, 400, 160);
    let opts = SolverOptions::default();
    let rep = fleming_gradient_diagnostic(&bundle, &mesh, &opts).unwrap();

    // Zero-weight instance collapses to the constant solution.
    let zero = fleming_diagnostic_with(&bundle, &mesh, &opts, &|_, _| 0.0).unwrap();
    let zero_exact = (zero.min_psi - 1.0).abs() <= 1e-12 && (zero.max_psi - 1.0).abs() <= 1e-12;

    let elapsed = t0.elapsed();
    report(
        "06 fleming diagnostic",
        rep.min_psi >= 1.0 - 1e-8
            && zero_exact
            && rep.hjb_residual <= 10.0 * rep.linear_residual
            && elapsed < Duration::from_secs(30),
        elapsed,
        &format!(
            "min psi {:.6}, hjb {:.3e} vs 10x linear {:.3e}",
            rep.min_psi,
            rep.hjb_residual,
            10.0 * rep.linear_residual
        ),
    );
}

#[test]
fn criterion_07_boundary_compatibility() {
    let t0 = Instant::now();
    let bundle = default_bundle();
    let fix = bundle
        .boundary_payoff_fix
        .as_ref()
        .expect("the reference model needs the fix");
    let model = &bundle.model;
    let mut ok = true;
    // Boundary match at 20 sampled times, 1e-12 relative.
    for i in 0..20 {
        let t = model.horizon * i as f64 / 19.0;
        let z = bundle.boundary.value(t);
        let a = fix.g(t, z);
        let b = bundle.g_nm(t, z);
        if (a - b).abs() > 1e-12 * (1.0 + b.abs()) {
            ok = false;
        }
    }
    // Flat slope at both terminal corners.
    let s1 = fix.dg_dx(bundle.theta_bar_nk()).abs();
    let s2 = fix.dg_dx(bundle.params.m).abs();
    if s1 > 1e-10 || s2 > 1e-10 {
        ok = false;
    }
    // Terminal operator inequality at both corners.
    let g1 = bundle
        .theta_nkm_fixed(model.horizon, bundle.theta_bar_nk())
        .unwrap();
    let g2 = bundle
        .theta_nkm_fixed(model.horizon, bundle.params.m)
        .unwrap();
    if g1 < -1e-10 || g2 < -1e-10 {
        ok = false;
    }
    let elapsed = t0.elapsed();
    report(
        "07 boundary compatibility",
        ok && elapsed < Duration::from_secs(1),
        elapsed,
        &format!("corner slopes ({s1:.2e}, {s2:.2e}), operator values ({g1:.2e}, {g2:.2e})"),
    );
}

#[test]
fn criterion_08_variational_inequality() {
    let t0 = Instant::now();
    let s = solved();
    let k3 = s
        .solution
        .diagnostics
        .ledger
        .get("K3_observed")
        .unwrap()
        .max(1.0)
        * 1.5;
    let tols =
        VITolerances::from_error_estimate(s.solution.diagnostics.error_estimate, &s.model, k3);
    let rep = verify_variational_inequality(&s.solution.v, &s.model, &tols, &s.schedule.monitor);
    let all_pass = rep.all_passed(0.99);

    // Fault injection: a lifted interior patch must be detected.
    let mut corrupted = s.solution.v.clone();
    let j0 = corrupted.xs.partition_point(|&x| x <= 1.5);
    let nt = corrupted.ts.len();
    for i in nt / 4..nt / 4 + 8 {
        for j in j0..j0 + 8 {
            let v = corrupted.at(i, j) + 0.1;
            corrupted.set(i, j, v);
        }
    }
    let bad = verify_variational_inequality(&corrupted, &s.model, &tols, &s.schedule.monitor);
    // Detection: the differential lines must pick up new failing nodes.
    let failures = |r: &stopctrl::continuation::VIReport| {
        r.lines[..3]
            .iter()
            .map(|l| l.applicable - l.passed)
            .sum::<usize>()
    };
    let detected = failures(&bad) > failures(&rep);

    let elapsed = t0.elapsed();
    let rates: Vec<String> = rep
        .lines
        .iter()
        .map(|l| format!("{:.3}", l.pass_rate()))
        .collect();
    report(
        "08 variational inequality verification",
        all_pass && detected && elapsed < Duration::from_secs(60),
        elapsed,
        &format!("pass rates {rates:?}, fault detected: {detected}"),
    );
}

#[test]
fn criterion_09_gradient_constraint_in_limit() {
    let t0 = Instant::now();
    let s = solved();
    let k3 = s
        .solution
        .diagnostics
        .ledger
        .get("K3_observed")
        .unwrap()
        .max(1.0)
        * 1.5;
    let tols =
        VITolerances::from_error_estimate(s.solution.diagnostics.error_estimate, &s.model, k3);
    let rep = verify_variational_inequality(&s.solution.v, &s.model, &tols, &s.schedule.monitor);
    let bound = s.model.alpha_bar * 1.05;
    let elapsed = t0.elapsed();
    report(
        "09 gradient constraint in the limit",
        rep.max_grad <= bound,
        elapsed,
        &format!("max |dv/dx| {:.4} vs bound {bound:.4}", rep.max_grad),
    );
}

#[test]
fn criterion_10_saddle_point_monte_carlo() {
    let t0 = Instant::now();
    let s = solved();
    let config = SimConfig {
        n_paths: 10_000,
        dt: 2e-3,
        seed: 7,
    };
    let starts = [(0.0, 0.5), (0.0, 1.0), (0.0, 5.0)];
    let rep = saddle_check(&s.model, &s.solution, &config, &starts).unwrap();
    let elapsed = t0.elapsed();
    let gaps: Vec<String> = rep
        .points
        .iter()
        .map(|p| format!("{:.4}", p.equilibrium_gap))
        .collect();
    report(
        "10 saddle-point monte carlo",
        rep.all_passed() && elapsed < Duration::from_secs(120),
        elapsed,
        &format!("equilibrium gaps {gaps:?}"),
    );
}

#[test]
fn criterion_11_decreasing_control_optimality() {
    let t0 = Instant::now();
    let s = solved();
    let flags = RegimeFlags {
        regime: Regime::A2,
        sigma_lipschitz: true,
    };
    let dynamics = Dynamics::from_model(&s.model);
    let stop_tol = 10.0 * s.solution.diagnostics.mesh_error;
    let rule = StopRule::ValueMatch {
        field: &s.solution.v,
        model: &s.model,
        tol: stop_tol,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xA2);
    let mut ok = true;
    let mut worst = f64::NEG_INFINITY;
    for k in 0..10u64 {
        let control: PiecewiseControl = random_control(&mut rng, s.model.horizon, 5.0, 0.6);
        let projected = decreasing_projection(&control, flags).unwrap();
        let cfg = SimConfig {
            n_paths: 5000,
            dt: 2e-3,
            seed: 1000 + k,
        };
        let orig = simulate_paths(
            &s.model,
            &dynamics,
            &Policy::Piecewise(control),
            &rule,
            &cfg,
            0.0,
            1.0,
            0,
        )
        .unwrap();
        let proj = simulate_paths(
            &s.model,
            &dynamics,
            &Policy::Piecewise(projected),
            &rule,
            &cfg,
            0.0,
            1.0,
            0,
        )
        .unwrap();
        let se = (orig.stats.std_error.powi(2) + proj.stats.std_error.powi(2)).sqrt();
        let gap = proj.stats.mean - orig.stats.mean;
        worst = worst.max(gap - 3.0 * se);
        if gap > 3.0 * se {
            ok = false;
        }
    }
    let elapsed = t0.elapsed();
    report(
        "11 decreasing-control optimality",
        ok && elapsed < Duration::from_secs(120),
        elapsed,
        &format!("worst (gap - 3 SE) = {worst:.4e}"),
    );
}

#[test]
fn criterion_12_equicontinuity_surrogate() {
    let t0 = Instant::now();
    let model = gbm_quad();
    let opts = SolverOptions::default();
    let mon = MonitorRect {
        t_lo: 0.0,
        t_hi: 0.9,
        x_lo: 0.1,
        x_hi: 4.0,
    };
    let etas = [0.125, 0.25, 0.5, 1.0];
    let exponent = 1.0 / 8.0;
    let solve = |delta: f64, m: f64, nx: usize| {
        let bundle = ApproxBundle::assemble(
            &model,
            PenalizationParams {
                n: 100,
                kappa: 0.05,
                eps: 0.1,
                delta,
                m,
            },
        )
        .unwrap();
        let mesh = stage_mesh(&bundle, 200, nx);
        solve_penalized(&bundle, &mesh, &opts).unwrap()
    };
    let coarse = solve(1e-2, 8.0, 160);
    let c0 = modulus_constant(&coarse, &mon, &etas, exponent);
    let finer1 = solve(1e-3, 8.0, 160);
    let c1 = modulus_constant(&finer1, &mon, &etas, exponent);
    let finer2 = solve(1e-3, 16.0, 320);
    let c2 = modulus_constant(&finer2, &mon, &etas, exponent);
    let elapsed = t0.elapsed();
    report(
        "12 equicontinuity surrogate",
        c1 <= 1.5 * c0 && c2 <= 1.5 * c0 && elapsed < Duration::from_secs(180),
        elapsed,
        &format!("modulus constants {c0:.4}, {c1:.4}, {c2:.4}"),
    );
}

#[test]
fn criterion_13_maximality_probe() {
    let t0 = Instant::now();
    let s = solved();
    let worst = maximality_probe(
        &s.model,
        &s.solution,
        &s.schedule,
        &SolverOptions::default(),
    )
    .unwrap();
    let elapsed = t0.elapsed();
    report(
        "13 maximality probe",
        worst <= s.schedule.stage_tol && elapsed < Duration::from_secs(120),
        elapsed,
        &format!(
            "sup(v_tight - v) = {worst:.3e} vs stage tol {:.3e}",
            s.schedule.stage_tol
        ),
    );
}

#[test]
fn criterion_14_determinism() {
    let t0 = Instant::now();
    // Cheapest run: a single coarse stage through the CLI layer, twice.
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let config_json = serde_json::json!({
        "schema_version": 1,
        "model": {"name": "gbm-quad"},
        "schedule": {
            "stages": [
                {"n": 100, "kappa": 0.05, "eps": 0.1, "delta": 0.01, "m": 8.0, "nt": 60, "nx": 60}
            ],
            "stage_tol": 0.2,
            "monitor": {"t_lo": 0.0, "t_hi": 0.9, "x_lo": 0.1, "x_hi": 4.0}
        },
        "sim": {"n_paths": 200, "dt": 0.01, "seed": 7},
        "out_dir": null
    });
    let cfg: stopctrl::cli::RunConfig = serde_json::from_value(config_json).unwrap();
    stopctrl::cli::cmd_solve(&cfg, None, Some(dir_a.path())).unwrap();
    stopctrl::cli::cmd_solve(&cfg, None, Some(dir_b.path())).unwrap();
    let mut identical = true;
    for name in ["value.csv", "regions.csv", "boundaries.csv"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        if a != b {
            identical = false;
        }
    }
    // Manifest hashes agree (timestamps are deliberately absent).
    let ma: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir_a.path().join("manifest.json")).unwrap())
            .unwrap();
    let mb: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir_b.path().join("manifest.json")).unwrap())
            .unwrap();
    let hashes_match = ma["content_hash"] == mb["content_hash"];
    let elapsed = t0.elapsed();
    report(
        "14 determinism",
        identical && hashes_match,
        elapsed,
        &format!("artifacts identical: {identical}, hashes match: {hashes_match}"),
    );
}
