//! Solve one penalized stage on the bounded domain and inspect the
//! obstacle-penalty term and the solution bounds.
//!
//! ```bash
//! cargo run --release -p stopctrl --example penalized_solve
//! ```

use stopctrl::approx::{ApproxBundle, PenalizationParams};
use stopctrl::model::gbm_quad;
use stopctrl::pde::{residual, solve_penalized, stage_mesh, SolverOptions};

fn main() {
    let model = gbm_quad();
    let params = PenalizationParams {
        n: 100,
        kappa: 0.05,
        eps: 0.1,
        delta: 0.01,
        m: 8.0,
    };
    let bundle = ApproxBundle::assemble(&model, params).unwrap();
    println!(
        "bundle: stopping threshold {:.4}, cost level {:.4}",
        bundle.theta_bar_nk(),
        bundle.truncated.alpha_bar_n
    );
    for (name, entry) in bundle.ledger.entries() {
        println!(
            "  constant {name} = {:.6} ({:?})",
            entry.value, entry.provenance
        );
    }

    let mesh = stage_mesh(&bundle, 400, 320);
    let u = solve_penalized(&bundle, &mesh, &SolverOptions::default()).unwrap();

    let mut max_penalty: f64 = 0.0;
    let mut max_growth: f64 = 0.0;
    for i in 0..u.ts.len() - 1 {
        for (j, &x) in u.xs.iter().enumerate() {
            let pen = (bundle.g_nm(u.ts[i], x) - u.at(i, j)).max(0.0) / params.delta;
            max_penalty = max_penalty.max(pen);
            max_growth = max_growth.max(u.at(i, j) / (1.0 + x * x));
        }
    }
    println!(
        "max obstacle-penalty term: {max_penalty:.4} (bound constant K2 = {:.4})",
        bundle.ledger.get("K2").unwrap()
    );
    println!("sup u / (1 + x^2) = {max_growth:.4}");

    let defect = residual(&u, &bundle, &mesh);
    let worst = defect.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    println!("worst interior defect of the discrete equation: {worst:.3e}");

    println!("\nvalue slice at t = 0:");
    for j in (0..u.xs.len()).step_by(u.xs.len() / 16) {
        println!(
            "  x = {:6.3}  u = {:8.5}  du/dx = {:8.5}",
            u.xs[j],
            u.at(0, j),
            u.ddx(0, j)
        );
    }
}
