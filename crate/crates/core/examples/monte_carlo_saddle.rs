//! Solve the game, then check the saddle-point inequalities by simulation:
//! the feedback control caps the payoff against arbitrary stopping rules,
//! the optimal stopping rule floors it against arbitrary controls, and the
//! pair reproduces the PDE value.
//!
//! ```bash
//! cargo run --release -p stopctrl --example monte_carlo_saddle
//! ```

use stopctrl::continuation::{run_schedule, LimitSchedule};
use stopctrl::game::{saddle_check, SimConfig};
use stopctrl::model::gbm_quad;
use stopctrl::pde::SolverOptions;

fn main() {
    let model = gbm_quad();
    let schedule = LimitSchedule::default_for(&model);
    println!("solving the value function...");
    let solution = run_schedule(&model, &schedule, &SolverOptions::default()).unwrap();

    let config = SimConfig {
        n_paths: 10_000,
        dt: 2e-3,
        seed: 7,
    };
    let starts = [(0.0, 0.5), (0.0, 1.0), (0.0, 5.0)];
    println!(
        "simulating {} paths per run at dt = {}...",
        config.n_paths, config.dt
    );
    let report = saddle_check(&model, &solution, &config, &starts).unwrap();

    for p in &report.points {
        println!(
            "\nstart (t, x) = ({}, {}): value v = {:.5}",
            p.t0, p.x0, p.value
        );
        println!("  tolerance: 3 SE + {:.4}", p.disc_tol);
        println!(
            "  J(nu*, rule) - v over random stopping rules: {:?}",
            p.stopper_deviations
                .iter()
                .map(|d| format!("{d:.4}"))
                .collect::<Vec<_>>()
        );
        println!(
            "  v - J(nu, tau*) over random controls:        {:?}",
            p.controller_deviations
                .iter()
                .map(|d| format!("{d:.4}"))
                .collect::<Vec<_>>()
        );
        println!(
            "  equilibrium gap |J(nu*, tau*) - v| = {:.4e} (SE {:.1e}); components: terminal {:.4}, running {:.4}, cost {:.4}",
            p.equilibrium_gap,
            p.equilibrium_se,
            p.equilibrium_stats.mean_terminal,
            p.equilibrium_stats.mean_running,
            p.equilibrium_stats.mean_cost
        );
        println!("  passed: {}", p.passed);
    }
}
