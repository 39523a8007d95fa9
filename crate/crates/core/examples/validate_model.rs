//! Check the standing assumptions of the built-in models and of a custom
//! expression-defined model.
//!
//! ```bash
//! cargo run --release -p stopctrl --example validate_model
//! ```

use stopctrl::expr::Expr;
use stopctrl::model::{validate_assumptions, GameModel, Regime, RegimeFlags, ScanGrid};

fn show(model: &GameModel, flags: RegimeFlags) {
    println!("== model `{}`", model.name);
    let report = validate_assumptions(model, flags, ScanGrid::default());
    for check in &report.checks {
        let status = if check.passed { "ok  " } else { "FAIL" };
        println!("  [{status}] {} — {}", check.name, check.detail);
    }
    match model.theta_bar() {
        Ok(tb) => println!("  terminal stopping threshold: {tb:.6}"),
        Err(e) => println!("  terminal stopping threshold: {e}"),
    }
    println!();
}

fn main() {
    let a2 = RegimeFlags {
        regime: Regime::A2,
        sigma_lipschitz: true,
    };
    show(&GameModel::builtin("gbm-quad").unwrap(), a2);

    // The coupon-paying recallable-bond model sits outside the main
    // theorem's hypotheses (its stopping benefit is positive at the
    // terminal corner); validation flags it rather than rejecting it.
    show(&GameModel::builtin("convertible-bond").unwrap(), a2);

    // Expression-defined model, derivatives by central finite differences.
    let mu = Expr::parse("0.01*x").unwrap();
    let sigma = Expr::parse("0.3*x").unwrap();
    let g = Expr::parse("0.5 + 0.4*x").unwrap();
    let h = Expr::parse("0.2*x^2").unwrap();
    let custom = GameModel::builder("custom-quad")
        .mu(move |x| mu.eval(0.0, x))
        .sigma(move |x| sigma.eval(0.0, x))
        .stopping_payoff(move |t, x| g.eval(t, x))
        .running_payoff(move |t, x| h.eval(t, x))
        .discount(0.04)
        .control_cost(0.8)
        .horizon(1.0)
        .finite_difference_derivatives()
        .build()
        .unwrap();
    show(&custom, a2);
}
