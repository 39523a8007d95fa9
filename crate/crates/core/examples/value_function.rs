//! Run the full limit schedule, extract the regions and free boundaries of
//! the value function, and verify the variational inequality.
//!
//! ```bash
//! cargo run --release -p stopctrl --example value_function
//! ```

use stopctrl::continuation::{
    run_schedule, verify_variational_inequality, LimitSchedule, RegionLabel, VITolerances,
};
use stopctrl::model::gbm_quad;
use stopctrl::pde::SolverOptions;

fn main() {
    let model = gbm_quad();
    let schedule = LimitSchedule::default_for(&model);
    println!("running {} stages...", schedule.stages.len());
    let sol = run_schedule(&model, &schedule, &SolverOptions::default()).unwrap();
    println!(
        "stage sup-norm differences on the monitor compact: {:?}",
        sol.diagnostics.stage_diffs
    );
    println!(
        "mesh error {:.3e}, distance-to-limit estimate {:.3e}",
        sol.diagnostics.mesh_error, sol.diagnostics.error_estimate
    );

    // Region census.
    let (mut stop, mut inaction, mut action) = (0usize, 0usize, 0usize);
    for label in &sol.regions {
        match label {
            RegionLabel::Stop => stop += 1,
            RegionLabel::Inaction => inaction += 1,
            RegionLabel::Action => action += 1,
        }
    }
    println!("regions: {stop} stop, {inaction} inaction, {action} action nodes");

    // Stopping boundary at a few times.
    println!("stopping boundary (first crossing per time):");
    let mut last_t = f64::NEG_INFINITY;
    for b in sol.boundaries.iter().filter(|b| b.kind == "stop") {
        if b.t - last_t >= 0.2 {
            println!("  t = {:4.2}  x* = {:.4}", b.t, b.x);
            last_t = b.t;
        }
    }

    let k3 = sol.diagnostics.ledger.get("K3_observed").unwrap().max(1.0) * 1.5;
    let tols = VITolerances::from_error_estimate(sol.diagnostics.error_estimate, &model, k3);
    let vi = verify_variational_inequality(&sol.v, &model, &tols, &schedule.monitor);
    println!("\nvariational-inequality verification:");
    for line in &vi.lines {
        println!(
            "  {:40} pass rate {:.4} over {} nodes",
            line.name,
            line.pass_rate(),
            line.applicable
        );
    }
    println!("max |dv/dx| on the monitor compact: {:.4}", vi.max_grad);
}
