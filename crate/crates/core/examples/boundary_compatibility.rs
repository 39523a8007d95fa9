//! Inspect the compatibility-fixed boundary payoff: it matches the payoff
//! on the lateral boundaries, has flat slope at both terminal corners, and
//! keeps the terminal operator inequality non-negative there.
//!
//! ```bash
//! cargo run --release -p stopctrl --example boundary_compatibility
//! ```

use stopctrl::approx::{ApproxBundle, PenalizationParams};
use stopctrl::model::gbm_quad;

fn main() {
    let model = gbm_quad();
    let bundle = ApproxBundle::assemble(
        &model,
        PenalizationParams {
            n: 100,
            kappa: 0.05,
            eps: 0.1,
            delta: 0.01,
            m: 8.0,
        },
    )
    .unwrap();
    let fix = bundle.boundary_payoff_fix.as_ref().expect("fix installed");
    let tb = bundle.theta_bar_nk();
    let m = bundle.params.m;

    println!("terminal corner x = {tb:.5}, outer boundary x = {m}");
    println!(
        "parabola center {:.5}, offset {:.5}",
        fix.center, fix.offset
    );

    println!("\nboundary match along the ramp:");
    for i in 0..8 {
        let t = model.horizon * (0.86 + 0.02 * i as f64);
        let z = bundle.boundary.value(t);
        println!(
            "  t = {t:.3}  zeta = {z:.4}  payoff {:.6}  fixed {:.6}",
            bundle.g_nm(t, z),
            fix.g(t, z)
        );
    }

    println!(
        "\ncorner slopes: {:.2e} at the threshold, {:.2e} at the outer edge",
        fix.dg_dx(tb),
        fix.dg_dx(m)
    );
    println!(
        "terminal operator values: {:.3e} and {:.3e} (must be >= 0)",
        bundle.theta_nkm_fixed(model.horizon, tb).unwrap(),
        bundle.theta_nkm_fixed(model.horizon, m).unwrap()
    );
}
