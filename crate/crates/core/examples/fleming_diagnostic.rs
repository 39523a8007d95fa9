//! Run the boundary-gradient diagnostic: the logarithmic transform turns
//! the quadratic-Hamiltonian auxiliary problem into a linear PDE whose
//! solution must stay at or above one.
//!
//! ```bash
//! cargo run --release -p stopctrl --example fleming_diagnostic
//! ```

use stopctrl::approx::{ApproxBundle, PenalizationParams};
use stopctrl::model::gbm_quad;
use stopctrl::pde::{
    fleming_diagnostic_with, fleming_gradient_diagnostic, stage_mesh, SolverOptions,
};

fn main() {
    // The reaction weight scales like 1/(eps kappa^2)^2; mild parameters
    // keep the exponential transform inside f64 range.
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

    let report = fleming_gradient_diagnostic(&bundle, &mesh, &opts).unwrap();
    println!(
        "transformed solution range: [{:.8}, {:.3e}]",
        report.min_psi, report.max_psi
    );
    println!(
        "linear-route defect (w-units): {:.3e}",
        report.linear_residual
    );
    println!(
        "direct quadratic-equation defect: {:.3e}",
        report.hjb_residual
    );
    println!("fitted boundary slope of w: {:.3e}", report.boundary_slope);
    println!(
        "reaction weight at the terminal corners: ({:.2e}, {:.2e})",
        report.corner_reaction.0, report.corner_reaction.1
    );

    // Zero-weight instance: the transform collapses to the constant 1.
    let zero = fleming_diagnostic_with(&bundle, &mesh, &opts, &|_, _| 0.0).unwrap();
    println!(
        "\nzero-weight instance: psi in [{:.12}, {:.12}]",
        zero.min_psi, zero.max_psi
    );
}
